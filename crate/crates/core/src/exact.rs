//! Exhaustive reference solver for small instances.
//!
//! Trees are generated level by level: every node above the leaf level picks a
//! child count and a non-decreasing sequence of child types. Isomorphic trees
//! are skipped through their canonical signature. For each new tree a
//! depth-first search looks for any feasible loop placement (cost depends on the
//! tree only, so one feasible placement settles the tree). With pruning on, a
//! partial tree whose cost plus a lower bound for its unavoidable descendants
//! reaches the incumbent is cut.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::instance::{validate_instance, Mode, ProblemInstance, Violation};
use crate::structure::{canonical_signature, fits_above, fits_below, LoopPlacement, Node, Solution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleLimits {
    pub max_nodes: usize,
    pub time_budget: Duration,
    /// Branch-and-bound cut on partial cost; off enumerates every canonical tree.
    pub prune: bool,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_nodes: 12,
            time_budget: Duration::from_secs(60),
            prune: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub solution: Option<Solution>,
    pub cost: Option<f64>,
    /// Distinct canonical trees reached.
    pub trees_enumerated: u64,
    /// Placement search nodes visited.
    pub placements_explored: u64,
    /// The optimum is below what any tree with more than `max_nodes` nodes can cost.
    pub globally_optimal: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("time budget of {budget:?} exceeded after {trees} trees")]
    BudgetExceeded { budget: Duration, trees: u64 },
    #[error("invalid instance: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Instance(Vec<Violation>),
}

struct Search<'a> {
    inst: &'a ProblemInstance,
    limits: OracleLimits,
    started: Instant,
    ticks: u64,
    min_cost: f64,
    /// Allowed child types per (child level, parent mode), in id order.
    allowed: Vec<[Vec<usize>; 2]>,
    types: Vec<usize>,
    parents: Vec<Option<usize>>,
    by_level: Vec<Vec<usize>>,
    cost: f64,
    seen: HashSet<String>,
    best: Option<(f64, Solution)>,
    trees: u64,
    explored: u64,
}

fn mode_slot(m: Mode) -> usize {
    match m {
        Mode::Processor => 0,
        Mode::Repeater => 1,
    }
}

impl<'a> Search<'a> {
    fn levels(&self) -> usize {
        self.inst.levels()
    }

    fn tick(&mut self) -> Result<(), OracleError> {
        self.ticks += 1;
        if self.ticks.is_multiple_of(1024) && self.started.elapsed() > self.limits.time_budget {
            return Err(OracleError::BudgetExceeded {
                budget: self.limits.time_budget,
                trees: self.trees,
            });
        }
        Ok(())
    }

    fn push(&mut self, parent: usize, level: usize, type_id: usize) {
        self.types.push(type_id);
        self.parents.push(Some(parent));
        self.by_level[level - 1].push(self.types.len() - 1);
        self.cost += self.inst.devices[type_id - 1].cost;
    }

    fn pop(&mut self, level: usize) {
        let t = self.types.pop().expect("pushed");
        self.parents.pop();
        self.by_level[level - 1].pop();
        self.cost -= self.inst.devices[t - 1].cost;
    }

    /// Whether the partial tree can still lead somewhere: `pending` is the number
    /// of nodes that must still be added below it.
    fn viable(&self, pending: usize) -> bool {
        if self.types.len() + pending > self.limits.max_nodes {
            return false;
        }
        match (&self.best, self.limits.prune) {
            (Some((best, _)), true) => self.cost + pending as f64 * self.min_cost < *best,
            _ => true,
        }
    }

    /// Nodes still owed below the partial tree while node `i` of `level` is
    /// receiving children and `left` of them are yet to come.
    fn pending(&self, level: usize, i: usize, left: usize) -> usize {
        let s = self.levels();
        let later = self.by_level[level - 1].len() - i - 1;
        let below_new = self.by_level[level].len() * (s - level - 1);
        later * (s - level) + left * (s - level) + below_new
    }

    fn expand(&mut self, level: usize, i: usize) -> Result<(), OracleError> {
        if level == self.levels() {
            return self.complete();
        }
        if i == self.by_level[level - 1].len() {
            return self.expand(level + 1, 0);
        }
        let v = self.by_level[level - 1][i];
        let dev = &self.inst.devices[self.types[v] - 1];
        for k in 1..=dev.max_children as usize {
            if !self.viable(self.pending(level, i, k)) {
                break;
            }
            self.children(level, i, k, 0)?;
        }
        Ok(())
    }

    fn children(&mut self, level: usize, i: usize, left: usize, from: usize) -> Result<(), OracleError> {
        self.tick()?;
        if left == 0 {
            return self.expand(level, i + 1);
        }
        let v = self.by_level[level - 1][i];
        let slot = mode_slot(self.inst.devices[self.types[v] - 1].mode);
        let options = self.allowed[level][slot].clone();
        for (idx, &t) in options.iter().enumerate().skip(from) {
            self.push(v, level + 1, t);
            if self.viable(self.pending(level, i, left - 1)) {
                self.children(level, i, left - 1, idx)?;
            }
            self.pop(level + 1);
        }
        Ok(())
    }

    fn build(&self, placements: Vec<LoopPlacement>) -> Solution {
        let mut nodes: Vec<Node> = self
            .types
            .iter()
            .enumerate()
            .map(|(id, &type_id)| Node {
                id,
                level: 0,
                type_id,
                parent: self.parents[id],
                children: Vec::new(),
            })
            .collect();
        for (level, ids) in self.by_level.iter().enumerate() {
            for &v in ids {
                nodes[v].level = level + 1;
            }
        }
        for v in 0..nodes.len() {
            if let Some(p) = nodes[v].parent {
                nodes[p].children.push(v);
            }
        }
        Solution { nodes, placements }
    }

    fn complete(&mut self) -> Result<(), OracleError> {
        let tree = self.build(Vec::new());
        if !self.seen.insert(canonical_signature(&tree)) {
            return Ok(());
        }
        self.trees += 1;
        if let Some((best, _)) = &self.best {
            if self.limits.prune && self.cost >= *best {
                return Ok(());
            }
        }
        let mut placer = Placer::new(self.inst, &tree);
        let found = placer.search(0, self)?;
        self.explored += placer.explored;
        if found && self.best.as_ref().is_none_or(|(b, _)| self.cost < *b) {
            let mut placements = placer.placements.into_iter().map(|p| p.expect("placed")).collect::<Vec<_>>();
            placements.sort_by_key(|p| p.loop_id);
            self.best = Some((self.cost, self.build(placements)));
        }
        Ok(())
    }
}

/// Feasibility search over loop placements for one fixed tree.
struct Placer<'a> {
    inst: &'a ProblemInstance,
    tree: &'a Solution,
    leaves: Vec<usize>,
    residual: Vec<u64>,
    mem_used: Vec<f64>,
    instr_used: Vec<u64>,
    placements: Vec<Option<LoopPlacement>>,
    explored: u64,
}

impl<'a> Placer<'a> {
    fn new(inst: &'a ProblemInstance, tree: &'a Solution) -> Self {
        let n = tree.nodes.len();
        let leaves: Vec<usize> = tree.leaves().map(|v| v.id).collect();
        let mut residual = vec![0u64; n];
        for &l in &leaves {
            residual[l] = inst.devices[tree.nodes[l].type_id - 1].channels as u64;
        }
        Placer {
            inst,
            tree,
            leaves,
            residual,
            mem_used: vec![0.0; n],
            instr_used: vec![0; n],
            placements: vec![None; inst.loops.len()],
            explored: 0,
        }
    }

    fn search(&mut self, j: usize, owner: &mut Search<'_>) -> Result<bool, OracleError> {
        if j == self.inst.loops.len() {
            return Ok(true);
        }
        owner.tick()?;
        self.explored += 1;
        let lp = &self.inst.loops[j];
        let lim = &self.inst.limits;
        // Leaves that share parent, type and load are interchangeable.
        let mut tried: Vec<(Option<usize>, usize, u64, u64, u64)> = Vec::new();
        for li in 0..self.leaves.len() {
            let leaf = self.leaves[li];
            if self.residual[leaf] < lp.signals as u64 {
                continue;
            }
            let node = &self.tree.nodes[leaf];
            let key = (
                node.parent,
                node.type_id,
                self.residual[leaf],
                self.mem_used[leaf].to_bits(),
                self.instr_used[leaf],
            );
            if tried.contains(&key) {
                continue;
            }
            tried.push(key);

            let (mut reliability, mut delay) = (1.0, 0.0);
            let mut cur = Some(leaf);
            while let Some(p) = cur {
                let d = &self.inst.devices[self.tree.nodes[p].type_id - 1];
                reliability *= 1.0 - d.fail_prob;
                if !fits_above(reliability, lim.min_loop_reliability) || !fits_below(delay, lim.max_loop_delay) {
                    break;
                }
                if d.mode == Mode::Processor
                    && fits_below(self.mem_used[p] + lp.mem_demand, d.memory)
                    && fits_below(d.instr_time * (self.instr_used[p] + lp.instr_count as u64) as f64, lim.max_cycle_time)
                {
                    self.residual[leaf] -= lp.signals as u64;
                    self.mem_used[p] += lp.mem_demand;
                    self.instr_used[p] += lp.instr_count as u64;
                    self.placements[j] = Some(LoopPlacement {
                        loop_id: lp.id,
                        connect_leaf: leaf,
                        process_node: p,
                    });
                    if self.search(j + 1, owner)? {
                        return Ok(true);
                    }
                    self.placements[j] = None;
                    self.residual[leaf] += lp.signals as u64;
                    self.mem_used[p] -= lp.mem_demand;
                    self.instr_used[p] -= lp.instr_count as u64;
                }
                delay += d.relay_delay;
                cur = self.tree.nodes[p].parent;
            }
        }
        Ok(false)
    }
}

/// Minimum-cost feasible solution among trees with at most `limits.max_nodes` nodes.
pub fn solve_exact(inst: &ProblemInstance, limits: OracleLimits) -> Result<OracleResult, OracleError> {
    let bad = validate_instance(inst);
    if !bad.is_empty() {
        return Err(OracleError::Instance(bad));
    }
    let s = inst.levels();
    let min_cost = inst.devices.iter().map(|d| d.cost).fold(f64::INFINITY, f64::min);
    // allowed[level][mode of parent] for children placed at `level + 1`
    let mut allowed = vec![[Vec::new(), Vec::new()]; s + 1];
    for (child_level, slots) in allowed.iter_mut().enumerate().skip(1) {
        let child_level = child_level + 1;
        for d in &inst.devices {
            let has_ports = child_level >= s || d.max_children >= 1;
            if !has_ports {
                continue;
            }
            slots[0].push(d.id);
            if d.mode == Mode::Repeater {
                slots[1].push(d.id);
            }
        }
    }

    let mut search = Search {
        inst,
        limits,
        started: Instant::now(),
        ticks: 0,
        min_cost,
        allowed,
        types: Vec::new(),
        parents: Vec::new(),
        by_level: vec![Vec::new(); s],
        cost: 0.0,
        seen: HashSet::new(),
        best: None,
        trees: 0,
        explored: 0,
    };
    if limits.max_nodes >= s {
        for root in inst.devices.iter().filter(|d| d.mode == Mode::Processor) {
            if s > 1 && root.max_children == 0 {
                continue;
            }
            search.types.push(root.id);
            search.parents.push(None);
            search.by_level[0].push(0);
            search.cost = root.cost;
            search.expand(1, 0)?;
            search.types.clear();
            search.parents.clear();
            search.by_level[0].clear();
        }
    }

    let globally_optimal = search
        .best
        .as_ref()
        .is_some_and(|(c, _)| *c < (limits.max_nodes as f64 + 1.0) * min_cost);
    let (cost, solution) = match search.best {
        Some((c, sol)) => (Some(c), Some(sol)),
        None => (None, None),
    };
    Ok(OracleResult {
        solution,
        cost,
        trees_enumerated: search.trees,
        placements_explored: search.explored,
        globally_optimal,
    })
}
