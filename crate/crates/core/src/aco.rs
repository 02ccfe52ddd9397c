//! Ant colony construction of device trees.
//!
//! Each ant builds a tree top-down through a sequence of probabilistic
//! decisions (root type, child count per node, child types, processing level
//! per loop). Every decision draws from
//!
//! ```text
//! P(i) = τ_i^α η_i^β / Σ_k τ_k^α η_k^β
//! ```
//!
//! and pheromone evolves as `τ ← (1 − ρ) τ + Δτ`, clamped to `[τ_min, τ_max]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::instance::{validate_instance, Mode, ProblemInstance, Violation};
use crate::local_search;
use crate::schedule::{validate_schedule_range, ParamRole, RangeViolation, ScheduleExpr};
use crate::structure::{
    check_feasibility, fits_above, fits_below, total_cost, LoopPlacement, Solution, TreeBuilder,
};

pub const DEFAULT_TAU_MIN: f64 = 0.01;
pub const DEFAULT_TAU0: f64 = 1.0;
pub const DEFAULT_TAU_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("no options to choose from")]
    Empty,
    #[error("option {0} has a non-positive or non-finite pheromone or desirability")]
    BadOption(usize),
    #[error("negative or non-finite exponent")]
    BadExponent,
    #[error("all option weights vanish")]
    Degenerate,
}

/// Unnormalized selection weights `τ^α η^β`, scaled so the largest is 1.
///
/// Computed in log space so that large exponents neither overflow nor
/// collapse every weight to zero; the scaling cancels in the normalization.
pub fn selection_weights(options: &[(f64, f64)], alpha: f64, beta: f64) -> Result<Vec<f64>, SelectError> {
    if options.is_empty() {
        return Err(SelectError::Empty);
    }
    if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
        return Err(SelectError::BadExponent);
    }
    let mut logs = Vec::with_capacity(options.len());
    for (i, &(tau, eta)) in options.iter().enumerate() {
        if !(tau > 0.0 && tau.is_finite() && eta > 0.0 && eta.is_finite()) {
            return Err(SelectError::BadOption(i));
        }
        logs.push(alpha * tau.ln() + beta * eta.ln());
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(logs.into_iter().map(|l| (l - top).exp()).collect())
}

/// Probability of each option under the selection rule; sums to 1.
pub fn selection_probabilities(
    options: &[(f64, f64)],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>, SelectError> {
    let w = selection_weights(options, alpha, beta)?;
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Roulette-wheel draw over non-negative weights. `None` when the weights sum to
/// zero or overflow.
pub fn draw_weighted(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return Some(i);
            }
            target -= w;
            last = Some(i);
        }
    }
    last
}

/// Draws an option index with probability `τ_i^α η_i^β / Σ τ_k^α η_k^β`.
pub fn select_option(
    options: &[(f64, f64)],
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<usize, SelectError> {
    let w = selection_weights(options, alpha, beta)?;
    draw_weighted(&w, rng).ok_or(SelectError::Degenerate)
}

// ---------------------------------------------------------------------------
// Pheromone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableId {
    /// (level, parent type or root context, child type)
    Type,
    /// (level, node type, child count)
    Count,
    /// (loop, processing level)
    LoopLevel,
}

/// One pheromone cell touched by an ant decision.
pub type Decision = (TableId, usize);

/// Cells behind every probabilistic choice of one ant, in decision order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionTrace(pub Vec<Decision>);

impl DecisionTrace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Distinct cells, sorted.
    pub fn cells(&self) -> Vec<Decision> {
        let mut c = self.0.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PheromoneError {
    #[error("rho {0} out of [0,1]")]
    Rho(f64),
    #[error("deposit amount {0} must be non-negative and finite")]
    Amount(f64),
    #[error("bounds must satisfy 0 < tau_min <= tau0 <= tau_max")]
    Bounds,
    #[error("cell {1} out of range for {0:?} table")]
    Cell(TableId, usize),
}

/// Pheromone mass for every structural decision. Shapes depend only on the
/// instance: `S × (U+1) × U` type cells, `S × U × max_ports` count cells and
/// `A × S` loop-level cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PheromoneTables {
    levels: usize,
    types: usize,
    max_count: usize,
    loops: usize,
    tau_min: f64,
    tau_max: f64,
    type_table: Vec<f64>,
    count_table: Vec<f64>,
    loop_level_table: Vec<f64>,
}

impl PheromoneTables {
    pub fn new(inst: &ProblemInstance, tau0: f64, tau_min: f64, tau_max: f64) -> Result<Self, PheromoneError> {
        if !(tau_min > 0.0 && tau_min <= tau0 && tau0 <= tau_max && tau_max.is_finite()) {
            return Err(PheromoneError::Bounds);
        }
        let levels = inst.levels().max(1);
        let types = inst.devices.len();
        let max_count = inst.max_children().max(1) as usize;
        let loops = inst.loops.len();
        Ok(Self {
            levels,
            types,
            max_count,
            loops,
            tau_min,
            tau_max,
            type_table: vec![tau0; levels * (types + 1) * types],
            count_table: vec![tau0; levels * types * max_count],
            loop_level_table: vec![tau0; loops * levels],
        })
    }

    pub fn with_defaults(inst: &ProblemInstance) -> Self {
        Self::new(inst, DEFAULT_TAU0, DEFAULT_TAU_MIN, DEFAULT_TAU_MAX).expect("default bounds")
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    /// `parent_type = None` is the root context.
    pub fn type_cell(&self, level: usize, parent_type: Option<usize>, child_type: usize) -> usize {
        let ctx = parent_type.unwrap_or(0);
        ((level - 1) * (self.types + 1) + ctx) * self.types + (child_type - 1)
    }

    pub fn count_cell(&self, level: usize, type_id: usize, k: usize) -> usize {
        ((level - 1) * self.types + (type_id - 1)) * self.max_count + (k - 1)
    }

    pub fn loop_level_cell(&self, loop_id: usize, level: usize) -> usize {
        (loop_id - 1) * self.levels + (level - 1)
    }

    fn table(&self, id: TableId) -> &[f64] {
        match id {
            TableId::Type => &self.type_table,
            TableId::Count => &self.count_table,
            TableId::LoopLevel => &self.loop_level_table,
        }
    }

    fn table_mut(&mut self, id: TableId) -> &mut Vec<f64> {
        match id {
            TableId::Type => &mut self.type_table,
            TableId::Count => &mut self.count_table,
            TableId::LoopLevel => &mut self.loop_level_table,
        }
    }

    pub fn get(&self, id: TableId, cell: usize) -> f64 {
        self.table(id)[cell]
    }

    pub fn set(&mut self, id: TableId, cell: usize, value: f64) {
        let (lo, hi) = (self.tau_min, self.tau_max);
        self.table_mut(id)[cell] = value.clamp(lo, hi);
    }

    pub fn len(&self, id: TableId) -> usize {
        self.table(id).len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_table.is_empty() && self.count_table.is_empty() && self.loop_level_table.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.type_table
            .iter()
            .chain(&self.count_table)
            .chain(&self.loop_level_table)
            .copied()
    }

    /// `τ ← (1 − ρ) τ` on every cell, then clamp.
    pub fn evaporate(&mut self, rho: f64) -> Result<(), PheromoneError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(PheromoneError::Rho(rho));
        }
        let keep = 1.0 - rho;
        let (lo, hi) = (self.tau_min, self.tau_max);
        for v in self
            .type_table
            .iter_mut()
            .chain(self.count_table.iter_mut())
            .chain(self.loop_level_table.iter_mut())
        {
            *v = (*v * keep).clamp(lo, hi);
        }
        Ok(())
    }

    /// Adds `amount` once to every distinct cell of `trace`, then clamps.
    pub fn deposit(&mut self, trace: &DecisionTrace, amount: f64) -> Result<(), PheromoneError> {
        if !(amount >= 0.0 && amount.is_finite()) {
            return Err(PheromoneError::Amount(amount));
        }
        let cells = trace.cells();
        for &(id, cell) in &cells {
            if cell >= self.len(id) {
                return Err(PheromoneError::Cell(id, cell));
            }
        }
        let (lo, hi) = (self.tau_min, self.tau_max);
        for (id, cell) in cells {
            let v = &mut self.table_mut(id)[cell];
            *v = (*v + amount).clamp(lo, hi);
        }
        Ok(())
    }

    /// Cells an ant would have touched to build `sol`.
    ///
    /// For an unmodified construction this is the multiset of its own trace; for
    /// a solution changed by local search it credits the improved structure.
    pub fn trace_of(&self, sol: &Solution) -> DecisionTrace {
        let mut out = Vec::with_capacity(2 * sol.nodes.len() + sol.placements.len());
        for node in &sol.nodes {
            let parent_type = node.parent.map(|p| sol.nodes[p].type_id);
            out.push((TableId::Type, self.type_cell(node.level, parent_type, node.type_id)));
            if node.level < self.levels && !node.children.is_empty() {
                out.push((
                    TableId::Count,
                    self.count_cell(node.level, node.type_id, node.children.len()),
                ));
            }
        }
        for p in &sol.placements {
            let level = sol.nodes[p.process_node].level;
            out.push((TableId::LoopLevel, self.loop_level_cell(p.loop_id, level)));
        }
        DecisionTrace(out)
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// The decision that had no admissible option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ConstructionFailure {
    #[error("no admissible root type")]
    RootType,
    #[error("no admissible child count at level {level}")]
    ChildCount { level: usize },
    #[error("no admissible child type at level {level}")]
    ChildType { level: usize },
    #[error("no leaf can take loop {loop_id}")]
    ConnectLeaf { loop_id: usize },
    #[error("no processing node for loop {loop_id}")]
    ProcessLevel { loop_id: usize },
    #[error("selection weights degenerate")]
    Selection,
}

#[derive(Debug, Clone)]
pub struct Construction {
    pub solution: Solution,
    pub trace: DecisionTrace,
}

#[derive(Debug, Clone, Default)]
struct Choice {
    values: Vec<usize>,
    cells: Vec<usize>,
    weights: Vec<f64>,
}

impl Choice {
    fn draw(&self, rng: &mut impl Rng) -> Option<usize> {
        draw_weighted(&self.weights, rng)
    }
}

/// Selection weights for one iteration, precomputed from a read-only pheromone
/// snapshot. Shared by all ants of the iteration.
#[derive(Debug, Clone)]
pub struct Colony<'a> {
    inst: &'a ProblemInstance,
    tables: &'a PheromoneTables,
    alpha: f64,
    beta: f64,
    /// `[level-1][ctx]`, ctx 0 = root.
    type_choices: Vec<Vec<Choice>>,
    /// `[level-1][type-1]`
    count_choices: Vec<Vec<Choice>>,
    /// `(τ/τ_max)^α`, indexed like the loop-level table.
    loop_level_weights: Vec<f64>,
    /// `((c+1)/(c_max+1))^β` for residual channel count `c`.
    leaf_weights: Vec<f64>,
}

impl<'a> Colony<'a> {
    pub fn new(
        inst: &'a ProblemInstance,
        tables: &'a PheromoneTables,
        alpha: f64,
        beta: f64,
    ) -> Result<Self, SelectError> {
        if !(alpha >= 0.0 && alpha.is_finite() && beta >= 0.0 && beta.is_finite()) {
            return Err(SelectError::BadExponent);
        }
        let levels = inst.levels();
        let u = inst.devices.len();

        let mut type_choices = Vec::with_capacity(levels);
        for level in 1..=levels {
            let mut per_ctx = Vec::with_capacity(u + 1);
            for ctx in 0..=u {
                let parent = (ctx > 0).then_some(ctx);
                let parent_mode = parent.and_then(|p| inst.device(p)).map(|d| d.mode);
                let valid_ctx = match parent {
                    None => level == 1,
                    Some(_) => level > 1,
                };
                let mut c = Choice::default();
                if valid_ctx {
                    for d in &inst.devices {
                        if !child_type_allowed(inst, level, parent_mode, d.id) {
                            continue;
                        }
                        c.values.push(d.id);
                        c.cells.push(tables.type_cell(level, parent, d.id));
                    }
                    let opts: Vec<(f64, f64)> = c
                        .values
                        .iter()
                        .zip(&c.cells)
                        .map(|(&t, &cell)| {
                            (tables.get(TableId::Type, cell), 1.0 / inst.devices[t - 1].cost)
                        })
                        .collect();
                    if !opts.is_empty() {
                        c.weights = selection_weights(&opts, alpha, beta)?;
                    }
                }
                per_ctx.push(c);
            }
            type_choices.push(per_ctx);
        }

        let mut count_choices = Vec::with_capacity(levels);
        for level in 1..=levels {
            let mut per_type = Vec::with_capacity(u);
            for d in &inst.devices {
                let mut c = Choice::default();
                if level < levels {
                    for k in 1..=d.max_children as usize {
                        c.values.push(k);
                        c.cells.push(tables.count_cell(level, d.id, k));
                    }
                    let opts: Vec<(f64, f64)> =
                        c.cells.iter().map(|&cell| (tables.get(TableId::Count, cell), 1.0)).collect();
                    if !opts.is_empty() {
                        c.weights = selection_weights(&opts, alpha, beta)?;
                    }
                }
                per_type.push(c);
            }
            count_choices.push(per_type);
        }

        let tau_max = tables.tau_max();
        let loop_level_weights = tables
            .loop_level_table
            .iter()
            .map(|&t| (alpha * (t / tau_max).ln()).exp())
            .collect();

        let c_max = inst.devices.iter().map(|d| d.channels).max().unwrap_or(0) as usize;
        let top = ((c_max + 1) as f64).ln();
        let leaf_weights = (0..=c_max)
            .map(|c| (beta * (((c + 1) as f64).ln() - top)).exp())
            .collect();

        Ok(Self {
            inst,
            tables,
            alpha,
            beta,
            type_choices,
            count_choices,
            loop_level_weights,
            leaf_weights,
        })
    }

    /// Builds one tree and places every loop, or reports the starved decision.
    pub fn construct(&self, rng: &mut impl Rng) -> Result<Construction, ConstructionFailure> {
        let inst = self.inst;
        let levels = inst.levels();
        let mut trace = Vec::new();

        let root_choice = &self.type_choices[0][0];
        let pick = root_choice.draw(rng).ok_or(ConstructionFailure::RootType)?;
        trace.push((TableId::Type, root_choice.cells[pick]));
        let mut tree = TreeBuilder::new(root_choice.values[pick]);

        let mut frontier = vec![0usize];
        for level in 1..levels {
            let mut next = Vec::new();
            for &v in &frontier {
                let t = tree.nodes()[v].type_id;
                let counts = &self.count_choices[level - 1][t - 1];
                let pick = counts
                    .draw(rng)
                    .ok_or(ConstructionFailure::ChildCount { level })?;
                trace.push((TableId::Count, counts.cells[pick]));
                let k = counts.values[pick];
                let kids = &self.type_choices[level][t];
                for _ in 0..k {
                    let pick = kids
                        .draw(rng)
                        .ok_or(ConstructionFailure::ChildType { level: level + 1 })?;
                    trace.push((TableId::Type, kids.cells[pick]));
                    next.push(tree.add_child(v, kids.values[pick]));
                }
            }
            frontier = next;
        }

        let placements = self.place_loops(tree.nodes(), &frontier, rng, &mut trace)?;
        Ok(Construction {
            solution: tree.finish(placements),
            trace: DecisionTrace(trace),
        })
    }

    fn place_loops(
        &self,
        nodes: &[crate::structure::Node],
        leaves: &[usize],
        rng: &mut impl Rng,
        trace: &mut Vec<Decision>,
    ) -> Result<Vec<LoopPlacement>, ConstructionFailure> {
        let inst = self.inst;
        let lim = &inst.limits;
        let dev = |v: usize| &inst.devices[nodes[v].type_id - 1];

        // Per leaf: the chain leaf..root with path reliability (inclusive) and
        // forwarding delay (exclusive of the chain node itself).
        struct Chain {
            nodes: Vec<usize>,
            reliability: Vec<f64>,
            delay: Vec<f64>,
        }
        let chains: Vec<Chain> = leaves
            .iter()
            .map(|&leaf| {
                let mut c = Chain {
                    nodes: Vec::new(),
                    reliability: Vec::new(),
                    delay: Vec::new(),
                };
                let (mut r, mut d) = (1.0, 0.0);
                let mut cur = Some(leaf);
                while let Some(v) = cur {
                    r *= 1.0 - dev(v).fail_prob;
                    c.nodes.push(v);
                    c.reliability.push(r);
                    c.delay.push(d);
                    d += dev(v).relay_delay;
                    cur = nodes[v].parent;
                }
                c
            })
            .collect();

        let mut residual: Vec<u32> = leaves.iter().map(|&l| dev(l).channels).collect();
        let mut mem_used = vec![0.0f64; nodes.len()];
        let mut instr_used = vec![0u64; nodes.len()];

        let mut order: Vec<usize> = (0..inst.loops.len()).collect();
        order.shuffle(rng);

        let mut placements = vec![None; inst.loops.len()];
        let mut cand_leaf = Vec::with_capacity(leaves.len());
        let mut cand_w = Vec::with_capacity(leaves.len());
        let mut levels_ok = Vec::new();
        let mut level_w = Vec::new();

        for j in order {
            let lp = &inst.loops[j];
            let loop_id = lp.id;
            let admissible = |chain: &Chain, depth: usize, mem_used: &[f64], instr_used: &[u64]| {
                let v = chain.nodes[depth];
                let d = dev(v);
                d.mode == Mode::Processor
                    && fits_below(mem_used[v] + lp.mem_demand, d.memory)
                    && fits_below(
                        d.instr_time * (instr_used[v] + lp.instr_count as u64) as f64,
                        lim.max_cycle_time,
                    )
                    && fits_above(chain.reliability[depth], lim.min_loop_reliability)
                    && fits_below(chain.delay[depth], lim.max_loop_delay)
            };

            cand_leaf.clear();
            cand_w.clear();
            for (i, chain) in chains.iter().enumerate() {
                if residual[i] < lp.signals {
                    continue;
                }
                if (0..chain.nodes.len()).any(|depth| admissible(chain, depth, &mem_used, &instr_used)) {
                    cand_leaf.push(i);
                    cand_w.push(self.leaf_weights[residual[i] as usize]);
                }
            }
            if cand_leaf.is_empty() {
                return Err(ConstructionFailure::ConnectLeaf { loop_id });
            }
            let pick = match draw_weighted(&cand_w, rng) {
                Some(p) => p,
                None => {
                    let opts: Vec<(f64, f64)> = cand_leaf
                        .iter()
                        .map(|&i| (1.0, residual[i] as f64 + 1.0))
                        .collect();
                    select_option(&opts, 0.0, self.beta, rng).map_err(|_| ConstructionFailure::Selection)?
                }
            };
            let li = cand_leaf[pick];
            let chain = &chains[li];

            levels_ok.clear();
            level_w.clear();
            for depth in 0..chain.nodes.len() {
                if admissible(chain, depth, &mem_used, &instr_used) {
                    let level = nodes[chain.nodes[depth]].level;
                    levels_ok.push(depth);
                    level_w.push(self.loop_level_weights[self.tables.loop_level_cell(loop_id, level)]);
                }
            }
            let pick = match draw_weighted(&level_w, rng) {
                Some(p) => p,
                None => {
                    let opts: Vec<(f64, f64)> = levels_ok
                        .iter()
                        .map(|&depth| {
                            let level = nodes[chain.nodes[depth]].level;
                            let cell = self.tables.loop_level_cell(loop_id, level);
                            (self.tables.get(TableId::LoopLevel, cell), 1.0)
                        })
                        .collect();
                    select_option(&opts, self.alpha, 0.0, rng)
                        .map_err(|_| ConstructionFailure::ProcessLevel { loop_id })?
                }
            };
            let depth = levels_ok[pick];
            let proc_node = chain.nodes[depth];
            trace.push((
                TableId::LoopLevel,
                self.tables.loop_level_cell(loop_id, nodes[proc_node].level),
            ));

            residual[li] -= lp.signals;
            mem_used[proc_node] += lp.mem_demand;
            instr_used[proc_node] += lp.instr_count as u64;
            placements[j] = Some(LoopPlacement {
                loop_id,
                connect_leaf: leaves[li],
                process_node: proc_node,
            });
        }
        Ok(placements.into_iter().map(|p| p.expect("every loop placed")).collect())
    }
}

/// Child type restrictions: the root is a Processor, descendants of Repeaters are
/// Repeaters, and nodes above the leaf level need at least one port.
fn child_type_allowed(inst: &ProblemInstance, level: usize, parent_mode: Option<Mode>, type_id: usize) -> bool {
    let d = &inst.devices[type_id - 1];
    let mode_ok = match parent_mode {
        None => d.mode == Mode::Processor,
        Some(Mode::Repeater) => d.mode == Mode::Repeater,
        Some(Mode::Processor) => true,
    };
    mode_ok && (level == inst.levels() || d.max_children >= 1)
}

/// One ant: builds a tree from the current pheromone and returns it with its trace.
pub fn construct_solution(
    inst: &ProblemInstance,
    tables: &PheromoneTables,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<Construction, ConstructionFailure> {
    let colony = Colony::new(inst, tables, alpha, beta).map_err(|_| ConstructionFailure::Selection)?;
    colony.construct(rng)
}

// ---------------------------------------------------------------------------
// Iteration loop
// ---------------------------------------------------------------------------

/// Numerator of the deposit `Δτ = Q / cost`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepositScale {
    /// Fixed to the first feasible cost the run finds.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct AcoParams {
    pub n_ants: usize,
    pub n_iterations: usize,
    pub alpha: ScheduleExpr,
    pub beta: ScheduleExpr,
    pub rho: ScheduleExpr,
    pub seed: u64,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub deposit_scale: DepositScale,
    pub local_search: bool,
    /// Moves evaluated per local-search call.
    pub ls_budget: usize,
}

impl Default for AcoParams {
    fn default() -> Self {
        Self {
            n_ants: 20,
            n_iterations: 500,
            alpha: ScheduleExpr::constant(2.0),
            beta: ScheduleExpr::constant(1.0),
            rho: ScheduleExpr::constant(0.25),
            seed: 1,
            tau0: DEFAULT_TAU0,
            tau_min: DEFAULT_TAU_MIN,
            tau_max: DEFAULT_TAU_MAX,
            deposit_scale: DepositScale::Auto,
            local_search: true,
            ls_budget: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AcoError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("{}", .0.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; "))]
    Schedule(Vec<RangeViolation>),
    #[error("invalid instance: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Instance(Vec<Violation>),
}

impl AcoParams {
    pub fn validate(&self) -> Result<(), AcoError> {
        if self.n_ants < 1 {
            return Err(AcoError::Params("n_ants must be at least 1".into()));
        }
        if self.n_iterations < 1 {
            return Err(AcoError::Params("n_iterations must be at least 1".into()));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau0 && self.tau0 <= self.tau_max && self.tau_max.is_finite()) {
            return Err(AcoError::Params("need 0 < tau_min <= tau0 <= tau_max".into()));
        }
        if let DepositScale::Fixed(q) = self.deposit_scale {
            if !(q > 0.0 && q.is_finite()) {
                return Err(AcoError::Params("deposit scale must be positive".into()));
            }
        }
        let n = self.n_iterations as u64;
        let mut bad = Vec::new();
        bad.extend(validate_schedule_range(&self.rho, n, ParamRole::Rho));
        bad.extend(validate_schedule_range(&self.alpha, n, ParamRole::Alpha));
        bad.extend(validate_schedule_range(&self.beta, n, ParamRole::Beta));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(AcoError::Schedule(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `f64::INFINITY` until the first feasible ant.
    pub best_so_far: f64,
    pub iteration_best: Option<f64>,
    pub feasible_ants: usize,
    /// Ants that starved during construction.
    pub failed_ants: usize,
    /// Ants whose finished solution failed the post-construction check.
    pub discarded_ants: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best_solution: Option<Solution>,
    /// `f64::INFINITY` when no feasible solution was found.
    pub best_cost: f64,
    pub trace: Vec<IterationRecord>,
    pub rng_seed: u64,
}

impl RunResult {
    /// Convergence trace as CSV: `iteration,best_so_far,iteration_best,feasible_ants`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,best_so_far,iteration_best,feasible_ants\n");
        for r in &self.trace {
            let ib = r.iteration_best.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.iteration, r.best_so_far, ib, r.feasible_ants));
        }
        out
    }
}

/// Generator for ant `ant` of iteration `iteration`: the run seed with a
/// dedicated ChaCha stream, so results do not depend on scheduling.
pub fn ant_rng(seed: u64, iteration: usize, ant: usize, n_ants: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration as u64) * (n_ants as u64) + ant as u64);
    rng
}

struct AntOutcome {
    cost: f64,
    solution: Solution,
}

enum AntResult {
    Feasible(AntOutcome),
    Failed,
    Discarded,
}

pub fn run_aco(inst: &ProblemInstance, params: &AcoParams) -> Result<RunResult, AcoError> {
    run_aco_observed(inst, params, |_, _| {})
}

/// [`run_aco`] that hands the pheromone tables to `observe` after each
/// iteration's update.
pub fn run_aco_observed(
    inst: &ProblemInstance,
    params: &AcoParams,
    mut observe: impl FnMut(usize, &PheromoneTables),
) -> Result<RunResult, AcoError> {
    let bad = validate_instance(inst);
    if !bad.is_empty() {
        return Err(AcoError::Instance(bad));
    }
    params.validate()?;
    let mut tables = PheromoneTables::new(inst, params.tau0, params.tau_min, params.tau_max)
        .map_err(|e| AcoError::Params(e.to_string()))?;

    let mut best: Option<AntOutcome> = None;
    let mut q = match params.deposit_scale {
        DepositScale::Fixed(q) => Some(q),
        DepositScale::Auto => None,
    };
    let mut trace = Vec::with_capacity(params.n_iterations);

    for n in 1..=params.n_iterations {
        let it = n as u64;
        let eval = |e: &ScheduleExpr| e.eval(it).map_err(|err| AcoError::Params(err.to_string()));
        let (alpha, beta, rho) = (eval(&params.alpha)?, eval(&params.beta)?, eval(&params.rho)?);

        let colony = Colony::new(inst, &tables, alpha, beta).map_err(|e| AcoError::Params(e.to_string()))?;
        let ants: Vec<AntResult> = (0..params.n_ants)
            .into_par_iter()
            .map(|k| {
                let mut rng = ant_rng(params.seed, n, k, params.n_ants);
                let Ok(built) = colony.construct(&mut rng) else {
                    return AntResult::Failed;
                };
                match check_feasibility(&built.solution, inst) {
                    Ok(r) if r.feasible => {}
                    _ => return AntResult::Discarded,
                }
                let solution = if params.local_search {
                    local_search::improve(&built.solution, inst, params.ls_budget).unwrap_or(built.solution)
                } else {
                    built.solution
                };
                let cost = total_cost(&solution, inst).expect("feasible solution has valid types");
                AntResult::Feasible(AntOutcome { cost, solution })
            })
            .collect();

        let mut feasible = 0;
        let mut failed = 0;
        let mut discarded = 0;
        let mut iter_best: Option<AntOutcome> = None;
        for a in ants {
            match a {
                AntResult::Feasible(o) => {
                    feasible += 1;
                    if iter_best.as_ref().is_none_or(|b| o.cost < b.cost) {
                        iter_best = Some(o);
                    }
                }
                AntResult::Failed => failed += 1,
                AntResult::Discarded => discarded += 1,
            }
        }

        tables.evaporate(rho).map_err(|e| AcoError::Params(e.to_string()))?;
        let iteration_best = iter_best.as_ref().map(|b| b.cost);
        if let Some(b) = iter_best {
            let scale = *q.get_or_insert(b.cost);
            tables
                .deposit(&tables.trace_of(&b.solution), scale / b.cost)
                .map_err(|e| AcoError::Params(e.to_string()))?;
            if best.as_ref().is_none_or(|cur| b.cost < cur.cost) {
                best = Some(b);
            }
        }
        trace.push(IterationRecord {
            iteration: n,
            best_so_far: best.as_ref().map_or(f64::INFINITY, |b| b.cost),
            iteration_best,
            feasible_ants: feasible,
            failed_ants: failed,
            discarded_ants: discarded,
        });
        observe(n, &tables);
    }

    Ok(RunResult {
        best_cost: best.as_ref().map_or(f64::INFINITY, |b| b.cost),
        best_solution: best.map(|b| b.solution),
        trace,
        rng_seed: params.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{plc_io_devices, plc_io_limits, ControlLoop, DeviceType, GlobalLimits};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_option_always_wins() {
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(select_option(&[(0.3, 2.0)], 2.0, 1.0, &mut r).unwrap(), 0);
        }
    }

    #[test]
    fn probabilities_follow_the_rule() {
        let p = selection_probabilities(&[(3.0, 1.0), (1.0, 1.0)], 1.0, 0.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = selection_probabilities(&[(2.0, 0.5), (1.0, 1.0)], 2.0, 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn selection_rejects_bad_input() {
        let mut r = rng(1);
        assert_eq!(select_option(&[], 1.0, 1.0, &mut r), Err(SelectError::Empty));
        assert_eq!(select_option(&[(0.0, 1.0)], 1.0, 1.0, &mut r), Err(SelectError::BadOption(0)));
        assert_eq!(select_option(&[(1.0, f64::NAN)], 1.0, 1.0, &mut r), Err(SelectError::BadOption(0)));
        assert_eq!(select_option(&[(1.0, 1.0)], -1.0, 1.0, &mut r), Err(SelectError::BadExponent));
    }

    #[test]
    fn huge_exponents_stay_finite() {
        let p = selection_probabilities(&[(10.0, 1e-3), (0.01, 1e-2)], 400.0, 300.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn one_cell_tables() -> (ProblemInstance, PheromoneTables) {
        let inst = t0();
        let tables = PheromoneTables::with_defaults(&inst);
        (inst, tables)
    }

    #[test]
    fn evaporation_and_deposit() {
        let (_, mut t) = one_cell_tables();
        let cell = t.type_cell(1, None, 1);
        t.evaporate(0.25).unwrap();
        assert_eq!(t.get(TableId::Type, cell), 0.75);

        let (_, mut t) = one_cell_tables();
        t.evaporate(0.25).unwrap();
        t.deposit(&DecisionTrace(vec![(TableId::Type, cell)]), 0.5).unwrap();
        assert_eq!(t.get(TableId::Type, cell), 1.25);

        let (_, mut t) = one_cell_tables();
        for _ in 0..5 {
            t.evaporate(0.25).unwrap();
        }
        assert!((t.get(TableId::Type, cell) - 0.75f64.powi(5)).abs() < 1e-12);
        for _ in 0..20 {
            t.evaporate(0.25).unwrap();
        }
        assert_eq!(t.get(TableId::Type, cell), DEFAULT_TAU_MIN);

        assert_eq!(t.evaporate(1.5), Err(PheromoneError::Rho(1.5)));
        assert_eq!(t.deposit(&DecisionTrace::default(), -1.0), Err(PheromoneError::Amount(-1.0)));
        for _ in 0..10 {
            t.deposit(&DecisionTrace(vec![(TableId::Type, cell)]), 5.0).unwrap();
        }
        assert_eq!(t.get(TableId::Type, cell), DEFAULT_TAU_MAX);
    }

    fn t0() -> ProblemInstance {
        ProblemInstance {
            devices: vec![DeviceType {
                id: 1,
                cost: 100.0,
                channels: 8,
                memory: 100.0,
                fail_prob: 0.001,
                instr_time: 1e-6,
                mode: Mode::Processor,
                max_children: 0,
                relay_delay: 0.0,
            }],
            loops: vec![ControlLoop {
                id: 1,
                signals: 4,
                mem_demand: 10.0,
                instr_count: 100,
            }],
            limits: GlobalLimits {
                levels: 1,
                max_cycle_time: 0.01,
                min_loop_reliability: 0.9,
                max_loop_delay: 0.01,
            },
        }
    }

    #[test]
    fn forced_single_node_solution() {
        let inst = t0();
        let tables = PheromoneTables::with_defaults(&inst);
        let c = construct_solution(&inst, &tables, 2.0, 1.0, &mut rng(3)).unwrap();
        assert_eq!(c.solution.nodes.len(), 1);
        assert_eq!(c.solution.placements[0].connect_leaf, 0);
        assert_eq!(c.solution.placements[0].process_node, 0);
        assert_eq!(c.trace.len(), 2);
    }

    #[test]
    fn trace_matches_rebuilt_trace() {
        let inst = ProblemInstance {
            devices: plc_io_devices(),
            loops: (1..=12)
                .map(|id| ControlLoop {
                    id,
                    signals: 1 + (id as u32 % 3),
                    mem_demand: 2.0,
                    instr_count: 100,
                })
                .collect(),
            limits: plc_io_limits(3),
        };
        let tables = PheromoneTables::with_defaults(&inst);
        let colony = Colony::new(&inst, &tables, 1.0, 1.0).unwrap();
        let mut built = 0;
        for s in 0..50 {
            if let Ok(c) = colony.construct(&mut rng(s)) {
                built += 1;
                let mut a = c.trace.0.clone();
                let mut b = tables.trace_of(&c.solution).0;
                a.sort_unstable();
                b.sort_unstable();
                assert_eq!(a, b);
                assert!(check_feasibility(&c.solution, &inst).unwrap().feasible);
            }
        }
        assert!(built > 0);
    }

    #[test]
    fn full_evaporation_pins_to_floor() {
        let mut inst = t0();
        inst.limits.min_loop_reliability = 1.0;
        let params = AcoParams {
            n_iterations: 3,
            n_ants: 4,
            rho: "1".parse().unwrap(),
            ..Default::default()
        };
        let mut seen = 0;
        let r = run_aco_observed(&inst, &params, |_, t| {
            seen += 1;
            assert!(t.values().all(|v| v == t.tau_min()));
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert!(r.best_solution.is_none());
        assert_eq!(r.best_cost, f64::INFINITY);
        assert!(r.trace.iter().all(|t| t.feasible_ants == 0));
    }

    #[test]
    fn tables_stay_within_bounds() {
        let inst = ProblemInstance {
            devices: plc_io_devices(),
            loops: (1..=4)
                .map(|id| ControlLoop { id, signals: 2, mem_demand: 4.0, instr_count: 100 })
                .collect(),
            limits: plc_io_limits(2),
        };
        let params = AcoParams { n_iterations: 40, n_ants: 5, rho: "0.1".parse().unwrap(), ..Default::default() };
        let r = run_aco_observed(&inst, &params, |_, t| {
            assert!(t.values().all(|v| v >= t.tau_min() && v <= t.tau_max()));
        })
        .unwrap();
        assert!(r.trace.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    }

    #[test]
    fn run_rejects_bad_schedules() {
        let params = AcoParams {
            rho: "2".parse().unwrap(),
            ..Default::default()
        };
        let err = run_aco(&t0(), &params).unwrap_err();
        assert_eq!(err.to_string(), "rho out of [0,1] at n=1");
    }
}
