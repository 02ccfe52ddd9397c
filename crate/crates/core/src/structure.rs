//! Candidate structures: a rooted, level-layered device tree plus the placement
//! of every control loop, with cost evaluation and constraint checking.
//!
//! Constraints checked by [`check_feasibility`]:
//!
//! | id | scope | rule |
//! |----|-------|------|
//! | C1 | leaf | signals of loops connected to the leaf ≤ channels |
//! | C2 | node | children ≤ ports; nodes above the leaf level have ≥ 1 child |
//! | C3 | processor | memory demand of processed loops ≤ memory |
//! | C4 | processor | `instr_time · Σ instr_count` of processed loops ≤ `max_cycle_time` |
//! | C5 | loop | `Π (1 − fail_prob)` over leaf..processor ≥ `min_loop_reliability` |
//! | C6 | loop | `Σ relay_delay` over leaf..processor, processor excluded, ≤ `max_loop_delay` |
//! | C7 | loop | the processing node is a Processor |
//! | C8 | tree | root at level 1, edges join adjacent levels, leaves at level S |
//! | C9 | tree | root is a Processor, descendants of Repeaters are Repeaters |

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instance::{Mode, ProblemInstance};

/// Relative slack applied to `≤` / `≥` comparisons on accumulated floating sums.
const REL_EPS: f64 = 1e-9;

#[inline]
pub(crate) fn fits_below(measured: f64, limit: f64) -> bool {
    measured <= limit + REL_EPS * limit.abs().max(1.0)
}

#[inline]
pub(crate) fn fits_above(measured: f64, floor: f64) -> bool {
    measured + REL_EPS >= floor
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: usize,
    /// 1 is the root level.
    pub level: usize,
    pub type_id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Where one loop's signals are wired (`connect_leaf`) and processed (`process_node`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopPlacement {
    pub loop_id: usize,
    pub connect_leaf: usize,
    pub process_node: usize,
}

/// A device tree with loop placements. Node ids are dense and `nodes[i].id == i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Solution {
    pub nodes: Vec<Node>,
    pub placements: Vec<LoopPlacement>,
}

impl Solution {
    pub fn root(&self) -> Option<usize> {
        self.nodes.iter().find(|n| n.parent.is_none()).map(|n| n.id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.children.is_empty())
    }

    pub fn placement(&self, loop_id: usize) -> Option<&LoopPlacement> {
        self.placements.iter().find(|p| p.loop_id == loop_id)
    }

    /// Nodes from `from` up to and including `to`, or `None` if `to` is not an
    /// ancestor-or-self of `from`.
    pub fn path_up(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut path = vec![from];
        let mut cur = from;
        let mut steps = 0;
        while cur != to {
            cur = self.nodes.get(cur)?.parent?;
            path.push(cur);
            steps += 1;
            if steps > self.nodes.len() {
                return None;
            }
        }
        Some(path)
    }

    /// Relabels node ids with `perm[old] = new`, reordering the node vector.
    pub fn relabel(&self, perm: &[usize]) -> Solution {
        let mut nodes = vec![None; self.nodes.len()];
        for n in &self.nodes {
            nodes[perm[n.id]] = Some(Node {
                id: perm[n.id],
                level: n.level,
                type_id: n.type_id,
                parent: n.parent.map(|p| perm[p]),
                children: n.children.iter().map(|&c| perm[c]).collect(),
            });
        }
        Solution {
            nodes: nodes.into_iter().map(|n| n.expect("permutation")).collect(),
            placements: self
                .placements
                .iter()
                .map(|p| LoopPlacement {
                    loop_id: p.loop_id,
                    connect_leaf: perm[p.connect_leaf],
                    process_node: perm[p.process_node],
                })
                .collect(),
        }
    }
}

/// Malformations that make constraint evaluation meaningless.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StructureError {
    #[error("solution has no nodes")]
    Empty,
    #[error("node at index {index} carries id {id}; ids must be dense and ordered")]
    BadNodeId { index: usize, id: usize },
    #[error("node {node} references missing node {other}")]
    MissingNode { node: usize, other: usize },
    #[error("no root node")]
    NoRoot,
    #[error("multiple roots: {0:?}")]
    MultipleRoots(Vec<usize>),
    #[error("parent/child links of node {0} disagree")]
    LinkMismatch(usize),
    #[error("cycle through node {0}")]
    Cycle(usize),
    #[error("node {0} is not reachable from the root")]
    Disconnected(usize),
    #[error("node {node} has unknown device type {type_id}")]
    DanglingType { node: usize, type_id: usize },
    #[error("placement refers to unknown loop {0}")]
    UnknownLoop(usize),
    #[error("loop {0} is placed more than once")]
    DuplicatePlacement(usize),
    #[error("loop {0} is not placed")]
    UnplacedLoop(usize),
    #[error("loop {loop_id} refers to missing node {node}")]
    PlacementNode { loop_id: usize, node: usize },
    #[error("loop {loop_id} is connected to node {node}, which is not a leaf")]
    ConnectNotLeaf { loop_id: usize, node: usize },
    #[error("loop {loop_id} is processed at node {node}, which is not on its leaf's root path")]
    ProcessOffPath { loop_id: usize, node: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintId {
    C1,
    C2,
    C3,
    C4,
    C5,
    C6,
    C7,
    C8,
    C9,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    Node(usize),
    Loop(usize),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Node(id) => write!(f, "node {id}"),
            Subject::Loop(id) => write!(f, "loop {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintViolation {
    pub constraint: ConstraintId,
    pub subject: Subject,
    pub measured: f64,
    pub limit: f64,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at {}: measured {} vs limit {}",
            self.constraint, self.subject, self.measured, self.limit
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<ConstraintViolation>,
}

impl FeasibilityReport {
    pub fn count(&self, id: ConstraintId) -> usize {
        self.violations.iter().filter(|v| v.constraint == id).count()
    }
}

/// Validates tree shape and placement references without evaluating constraints.
pub fn check_structure(sol: &Solution, inst: &ProblemInstance) -> Result<usize, StructureError> {
    if sol.nodes.is_empty() {
        return Err(StructureError::Empty);
    }
    let n = sol.nodes.len();
    for (index, node) in sol.nodes.iter().enumerate() {
        if node.id != index {
            return Err(StructureError::BadNodeId { index, id: node.id });
        }
        if inst.device(node.type_id).is_none() {
            return Err(StructureError::DanglingType {
                node: node.id,
                type_id: node.type_id,
            });
        }
        for &other in node.children.iter().chain(node.parent.iter()) {
            if other >= n {
                return Err(StructureError::MissingNode { node: node.id, other });
            }
        }
    }
    let roots: Vec<usize> = sol.nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
    let root = match roots.as_slice() {
        [] => return Err(StructureError::NoRoot),
        [r] => *r,
        _ => return Err(StructureError::MultipleRoots(roots)),
    };
    for node in &sol.nodes {
        if let Some(p) = node.parent {
            let listed = sol.nodes[p].children.iter().filter(|&&c| c == node.id).count();
            if listed != 1 {
                return Err(StructureError::LinkMismatch(node.id));
            }
        }
        for &c in &node.children {
            if sol.nodes[c].parent != Some(node.id) {
                return Err(StructureError::LinkMismatch(c));
            }
        }
    }
    // Walk down from the root; every node must be seen exactly once.
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        if seen[v] {
            return Err(StructureError::Cycle(v));
        }
        seen[v] = true;
        stack.extend(sol.nodes[v].children.iter().copied());
    }
    if let Some(v) = seen.iter().position(|s| !s) {
        // Unreached nodes with parents form a detached cycle.
        return Err(if detached_cycle(sol, v) {
            StructureError::Cycle(v)
        } else {
            StructureError::Disconnected(v)
        });
    }

    let mut placed = vec![false; inst.loops.len()];
    for p in &sol.placements {
        let slot = p
            .loop_id
            .checked_sub(1)
            .filter(|&i| i < placed.len())
            .ok_or(StructureError::UnknownLoop(p.loop_id))?;
        if placed[slot] {
            return Err(StructureError::DuplicatePlacement(p.loop_id));
        }
        placed[slot] = true;
        for node in [p.connect_leaf, p.process_node] {
            if node >= n {
                return Err(StructureError::PlacementNode {
                    loop_id: p.loop_id,
                    node,
                });
            }
        }
        if !sol.nodes[p.connect_leaf].children.is_empty() {
            return Err(StructureError::ConnectNotLeaf {
                loop_id: p.loop_id,
                node: p.connect_leaf,
            });
        }
        if sol.path_up(p.connect_leaf, p.process_node).is_none() {
            return Err(StructureError::ProcessOffPath {
                loop_id: p.loop_id,
                node: p.process_node,
            });
        }
    }
    if let Some(i) = placed.iter().position(|p| !p) {
        return Err(StructureError::UnplacedLoop(i + 1));
    }
    Ok(root)
}

fn detached_cycle(sol: &Solution, start: usize) -> bool {
    let mut cur = start;
    for _ in 0..=sol.nodes.len() {
        match sol.nodes[cur].parent {
            Some(p) => cur = p,
            None => return false,
        }
    }
    true
}

/// Sum of device costs over all nodes.
pub fn total_cost(sol: &Solution, inst: &ProblemInstance) -> Result<f64, StructureError> {
    sol.nodes.iter().try_fold(0.0, |acc, node| {
        inst.device(node.type_id)
            .map(|d| acc + d.cost)
            .ok_or(StructureError::DanglingType {
                node: node.id,
                type_id: node.type_id,
            })
    })
}

fn loop_path(sol: &Solution, loop_id: usize) -> Result<Vec<usize>, StructureError> {
    let p = sol.placement(loop_id).ok_or(StructureError::UnplacedLoop(loop_id))?;
    sol.path_up(p.connect_leaf, p.process_node)
        .ok_or(StructureError::ProcessOffPath {
            loop_id,
            node: p.process_node,
        })
}

fn type_of<'a>(
    sol: &Solution,
    inst: &'a ProblemInstance,
    node: usize,
) -> Result<&'a crate::instance::DeviceType, StructureError> {
    let type_id = sol.nodes[node].type_id;
    inst.device(type_id)
        .ok_or(StructureError::DanglingType { node, type_id })
}

/// Reliability (all nodes) and delay (all but the last node) of a leaf-to-processor path.
fn path_measures(
    sol: &Solution,
    inst: &ProblemInstance,
    path: &[usize],
) -> Result<(f64, f64), StructureError> {
    let mut reliability = 1.0;
    let mut delay = 0.0;
    for (i, &v) in path.iter().enumerate() {
        let dev = type_of(sol, inst, v)?;
        reliability *= 1.0 - dev.fail_prob;
        if i + 1 < path.len() {
            delay += dev.relay_delay;
        }
    }
    Ok((reliability, delay))
}

/// Survival probability of the loop's signal path, leaf to processor inclusive.
pub fn path_reliability(
    sol: &Solution,
    inst: &ProblemInstance,
    loop_id: usize,
) -> Result<f64, StructureError> {
    Ok(path_measures(sol, inst, &loop_path(sol, loop_id)?)?.0)
}

/// Forwarding delay of the loop's signal path, excluding the processing node.
pub fn path_delay(
    sol: &Solution,
    inst: &ProblemInstance,
    loop_id: usize,
) -> Result<f64, StructureError> {
    Ok(path_measures(sol, inst, &loop_path(sol, loop_id)?)?.1)
}

/// Evaluates C1–C9. Structural malformations are errors, not violations.
pub fn check_feasibility(
    sol: &Solution,
    inst: &ProblemInstance,
) -> Result<FeasibilityReport, StructureError> {
    let root = check_structure(sol, inst)?;
    let levels = inst.levels();
    let lim = &inst.limits;
    let mut out = Vec::new();
    let mut push = |constraint, subject, measured: f64, limit: f64| {
        out.push(ConstraintViolation {
            constraint,
            subject,
            measured,
            limit,
        })
    };

    let n = sol.nodes.len();
    let mut signals = vec![0u64; n];
    let mut memory = vec![0.0f64; n];
    let mut instr = vec![0u64; n];
    for p in &sol.placements {
        let l = &inst.loops[p.loop_id - 1];
        signals[p.connect_leaf] += l.signals as u64;
        memory[p.process_node] += l.mem_demand;
        instr[p.process_node] += l.instr_count as u64;
    }

    for node in &sol.nodes {
        let dev = inst.device(node.type_id).expect("checked");
        let v = Subject::Node(node.id);
        if node.children.is_empty() && signals[node.id] > dev.channels as u64 {
            push(ConstraintId::C1, v, signals[node.id] as f64, dev.channels as f64);
        }
        let k = node.children.len();
        if k > dev.max_children as usize {
            push(ConstraintId::C2, v, k as f64, dev.max_children as f64);
        }
        if node.level < levels && k == 0 {
            push(ConstraintId::C2, v, 0.0, 1.0);
        }
        if dev.is_processor() {
            if !fits_below(memory[node.id], dev.memory) {
                push(ConstraintId::C3, v, memory[node.id], dev.memory);
            }
            let cycle = dev.instr_time * instr[node.id] as f64;
            if !fits_below(cycle, lim.max_cycle_time) {
                push(ConstraintId::C4, v, cycle, lim.max_cycle_time);
            }
        }
        // C8: layering
        match node.parent {
            None if node.level != 1 => push(ConstraintId::C8, v, node.level as f64, 1.0),
            Some(p) if node.level != sol.nodes[p].level + 1 => push(
                ConstraintId::C8,
                v,
                node.level as f64,
                (sol.nodes[p].level + 1) as f64,
            ),
            _ => {}
        }
        if node.children.is_empty() && node.level != levels {
            push(ConstraintId::C8, v, node.level as f64, levels as f64);
        }
        // C9: mode monotonicity
        if let Some(p) = node.parent {
            let parent_mode = inst.device(sol.nodes[p].type_id).expect("checked").mode;
            if parent_mode == Mode::Repeater && dev.mode == Mode::Processor {
                push(ConstraintId::C9, v, 1.0, 0.0);
            }
        }
    }
    if !inst.device(sol.nodes[root].type_id).expect("checked").is_processor() {
        push(ConstraintId::C9, Subject::Node(root), 0.0, 1.0);
    }

    let mut placements = sol.placements.clone();
    placements.sort_by_key(|p| p.loop_id);
    for p in &placements {
        let v = Subject::Loop(p.loop_id);
        let path = sol
            .path_up(p.connect_leaf, p.process_node)
            .expect("checked by check_structure");
        let (reliability, delay) = path_measures(sol, inst, &path)?;
        if !fits_above(reliability, lim.min_loop_reliability) {
            push(ConstraintId::C5, v, reliability, lim.min_loop_reliability);
        }
        if !fits_below(delay, lim.max_loop_delay) {
            push(ConstraintId::C6, v, delay, lim.max_loop_delay);
        }
        if !type_of(sol, inst, p.process_node)?.is_processor() {
            push(ConstraintId::C7, v, 0.0, 1.0);
        }
    }

    Ok(FeasibilityReport {
        feasible: out.is_empty(),
        violations: out,
    })
}

/// Order-invariant encoding of the tree: equal for trees that differ only in
/// child order and node numbering, with the same types and per-node placements.
pub fn canonical_signature(sol: &Solution) -> String {
    let Some(root) = sol.root() else {
        return String::new();
    };
    let mut connected: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut processed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in &sol.placements {
        connected.entry(p.connect_leaf).or_default().push(p.loop_id);
        processed.entry(p.process_node).or_default().push(p.loop_id);
    }
    for v in connected.values_mut().chain(processed.values_mut()) {
        v.sort_unstable();
    }
    signature_of(sol, root, &connected, &processed)
}

fn signature_of(
    sol: &Solution,
    v: usize,
    connected: &BTreeMap<usize, Vec<usize>>,
    processed: &BTreeMap<usize, Vec<usize>>,
) -> String {
    let node = &sol.nodes[v];
    let mut s = node.type_id.to_string();
    let list = |s: &mut String, tag: char, ids: &[usize]| {
        s.push(tag);
        s.push('[');
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{id}").unwrap();
        }
        s.push(']');
    };
    if let Some(ids) = connected.get(&v) {
        list(&mut s, 'c', ids);
    }
    if let Some(ids) = processed.get(&v) {
        list(&mut s, 'p', ids);
    }
    if !node.children.is_empty() {
        let mut kids: Vec<String> = node
            .children
            .iter()
            .map(|&c| signature_of(sol, c, connected, processed))
            .collect();
        kids.sort_unstable();
        s.push('(');
        s.push_str(&kids.join(","));
        s.push(')');
    }
    s
}

/// Graphviz rendering: one box per device labelled `type/level`; leaves also
/// show how many loops and signals they carry.
pub fn to_dot(sol: &Solution, inst: &ProblemInstance) -> String {
    let mut loops = vec![0usize; sol.nodes.len()];
    let mut signals = vec![0u64; sol.nodes.len()];
    for p in &sol.placements {
        if let (Some(l), true) = (inst.control_loop(p.loop_id), p.connect_leaf < loops.len()) {
            loops[p.connect_leaf] += 1;
            signals[p.connect_leaf] += l.signals as u64;
        }
    }
    let mut out = String::from("digraph dcs {\n    rankdir=TB;\n    node [shape=box];\n");
    for node in &sol.nodes {
        let mode = inst
            .device(node.type_id)
            .map(|d| if d.is_processor() { "P" } else { "R" })
            .unwrap_or("?");
        write!(out, "    n{} [label=\"{}/{}", node.id, node.type_id, node.level).unwrap();
        if node.children.is_empty() {
            write!(out, "\\n{} loops, {} signals", loops[node.id], signals[node.id]).unwrap();
        }
        writeln!(out, "\", tooltip=\"{mode}\"];").unwrap();
    }
    for node in &sol.nodes {
        for &c in &node.children {
            writeln!(out, "    n{} -> n{};", node.id, c).unwrap();
        }
    }
    out.push_str("}\n");
    out
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: usize,
    level: usize,
    #[serde(rename = "type")]
    type_id: usize,
    parent: Option<usize>,
    children: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementDoc {
    #[serde(rename = "loop")]
    loop_id: usize,
    connect_leaf: usize,
    process_node: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionDoc {
    nodes: Vec<NodeDoc>,
    placements: Vec<PlacementDoc>,
}

pub fn serialize_solution(sol: &Solution) -> String {
    let doc = SolutionDoc {
        nodes: sol
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                level: n.level,
                type_id: n.type_id,
                parent: n.parent,
                children: n.children.clone(),
            })
            .collect(),
        placements: sol
            .placements
            .iter()
            .map(|p| PlacementDoc {
                loop_id: p.loop_id,
                connect_leaf: p.connect_leaf,
                process_node: p.process_node,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("solution serializes")
}

pub fn parse_solution(text: &str) -> Result<Solution, serde_json::Error> {
    let doc: SolutionDoc = serde_json::from_str(text)?;
    Ok(Solution {
        nodes: doc
            .nodes
            .into_iter()
            .map(|n| Node {
                id: n.id,
                level: n.level,
                type_id: n.type_id,
                parent: n.parent,
                children: n.children,
            })
            .collect(),
        placements: doc
            .placements
            .into_iter()
            .map(|p| LoopPlacement {
                loop_id: p.loop_id,
                connect_leaf: p.connect_leaf,
                process_node: p.process_node,
            })
            .collect(),
    })
}

/// Incremental builder for well-formed trees; used by tests, the oracle and the colony.
#[derive(Debug, Default, Clone)]
pub struct TreeBuilder {
    nodes: Vec<Node>,
}

impl TreeBuilder {
    pub fn new(root_type: usize) -> Self {
        Self {
            nodes: vec![Node {
                id: 0,
                level: 1,
                type_id: root_type,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    pub fn add_child(&mut self, parent: usize, type_id: usize) -> usize {
        let id = self.nodes.len();
        let level = self.nodes[parent].level + 1;
        self.nodes.push(Node {
            id,
            level,
            type_id,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn finish(self, placements: Vec<LoopPlacement>) -> Solution {
        Solution {
            nodes: self.nodes,
            placements,
        }
    }
}
