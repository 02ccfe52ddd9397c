//! Type-exchange descent on a feasible solution.
//!
//! Two moves, both restricted to device types of the same mode:
//!
//! * replacement: give one node a strictly cheaper type;
//! * pairwise swap: exchange the types of two nodes. A swap alone leaves the
//!   cost unchanged, so it is only kept together with a cheaper replacement on
//!   one of the two swapped nodes, and only if the combined result is feasible.
//!
//! Nodes are scanned in id order and the first improving move is taken. Passes
//! repeat until nothing improves or the move budget runs out.

use thiserror::Error;

use crate::instance::{Mode, ProblemInstance};
use crate::structure::{
    check_feasibility, fits_above, fits_below, ConstraintViolation, Solution, StructureError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalSearchError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("input solution is infeasible ({} violations)", .0.len())]
    Infeasible(Vec<ConstraintViolation>),
}

/// Working state: node loads are fixed, only the per-node types change.
struct Evaluator<'a> {
    inst: &'a ProblemInstance,
    sol: &'a Solution,
    types: Vec<usize>,
    signals: Vec<u64>,
    memory: Vec<f64>,
    instr: Vec<u64>,
    processed: Vec<usize>,
    /// Placement paths, leaf..processor.
    paths: Vec<Vec<usize>>,
    /// Indices into `paths` of loops whose path contains the node.
    through: Vec<Vec<usize>>,
    moves: usize,
    budget: usize,
}

impl<'a> Evaluator<'a> {
    fn new(sol: &'a Solution, inst: &'a ProblemInstance, budget: usize) -> Self {
        let n = sol.nodes.len();
        let mut e = Evaluator {
            inst,
            sol,
            types: sol.nodes.iter().map(|v| v.type_id).collect(),
            signals: vec![0; n],
            memory: vec![0.0; n],
            instr: vec![0; n],
            processed: vec![0; n],
            paths: Vec::with_capacity(sol.placements.len()),
            through: vec![Vec::new(); n],
            moves: 0,
            budget,
        };
        // loop-id order keeps memory sums identical to the full checker's
        let mut placements = sol.placements.clone();
        placements.sort_by_key(|p| p.loop_id);
        for p in &placements {
            let l = &inst.loops[p.loop_id - 1];
            e.signals[p.connect_leaf] += l.signals as u64;
            e.memory[p.process_node] += l.mem_demand;
            e.instr[p.process_node] += l.instr_count as u64;
            e.processed[p.process_node] += 1;
            let path = sol.path_up(p.connect_leaf, p.process_node).expect("feasible input");
            for &v in &path {
                e.through[v].push(e.paths.len());
            }
            e.paths.push(path);
        }
        e
    }

    fn cost(&self, type_id: usize) -> f64 {
        self.inst.devices[type_id - 1].cost
    }

    fn mode(&self, type_id: usize) -> Mode {
        self.inst.devices[type_id - 1].mode
    }

    fn node_ok(&self, v: usize) -> bool {
        let node = &self.sol.nodes[v];
        let d = &self.inst.devices[self.types[v] - 1];
        let lim = &self.inst.limits;
        if node.children.is_empty() && self.signals[v] > d.channels as u64 {
            return false;
        }
        if node.children.len() > d.max_children as usize {
            return false;
        }
        match d.mode {
            Mode::Processor => {
                if !fits_below(self.memory[v], d.memory)
                    || !fits_below(d.instr_time * self.instr[v] as f64, lim.max_cycle_time)
                {
                    return false;
                }
            }
            Mode::Repeater => {
                if self.processed[v] > 0 || node.parent.is_none() {
                    return false;
                }
                if node.children.iter().any(|&c| self.mode(self.types[c]) == Mode::Processor) {
                    return false;
                }
            }
        }
        if let Some(p) = node.parent {
            if self.mode(self.types[p]) == Mode::Repeater && d.mode == Mode::Processor {
                return false;
            }
        }
        true
    }

    fn path_ok(&self, i: usize) -> bool {
        let path = &self.paths[i];
        let lim = &self.inst.limits;
        let mut reliability = 1.0;
        let mut delay = 0.0;
        for (k, &v) in path.iter().enumerate() {
            let d = &self.inst.devices[self.types[v] - 1];
            reliability *= 1.0 - d.fail_prob;
            if k + 1 < path.len() {
                delay += d.relay_delay;
            }
        }
        fits_above(reliability, lim.min_loop_reliability) && fits_below(delay, lim.max_loop_delay)
    }

    /// Applies `changes` and keeps them if every affected constraint still holds.
    fn try_apply(&mut self, changes: &[(usize, usize)]) -> bool {
        self.moves += 1;
        let old: Vec<(usize, usize)> = changes.iter().map(|&(v, _)| (v, self.types[v])).collect();
        for &(v, t) in changes {
            self.types[v] = t;
        }
        let ok = changes.iter().all(|&(v, _)| {
            self.node_ok(v)
                && self.through[v].iter().all(|&i| self.path_ok(i))
                && self.sol.nodes[v].children.iter().all(|&c| self.node_ok(c))
        });
        if !ok {
            for &(v, t) in old.iter().rev() {
                self.types[v] = t;
            }
        }
        ok
    }

    fn exhausted(&self) -> bool {
        self.moves >= self.budget
    }

    /// Same-mode types strictly cheaper than the node's current one, in id order.
    fn cheaper_types(&self, v: usize) -> Vec<usize> {
        let cur = self.types[v];
        let (mode, cost) = (self.mode(cur), self.cost(cur));
        self.inst
            .devices
            .iter()
            .filter(|d| d.mode == mode && d.cost < cost)
            .map(|d| d.id)
            .collect()
    }

    fn replacement_pass(&mut self) -> bool {
        let mut improved = false;
        for v in 0..self.types.len() {
            for t in self.cheaper_types(v) {
                if self.exhausted() {
                    return improved;
                }
                if self.try_apply(&[(v, t)]) {
                    improved = true;
                    break;
                }
            }
        }
        improved
    }

    /// Swap the types of two nodes, then replace one of them with a cheaper type;
    /// kept only if the combined result is feasible.
    fn swap_pass(&mut self) -> bool {
        let n = self.types.len();
        for v in 0..n {
            for w in v + 1..n {
                let (tv, tw) = (self.types[v], self.types[w]);
                if tv == tw || self.mode(tv) != self.mode(tw) {
                    continue;
                }
                for (x, swapped_in) in [(v, tw), (w, tv)] {
                    let (mode, cost) = (self.mode(swapped_in), self.cost(swapped_in));
                    for t in 1..=self.inst.devices.len() {
                        if self.mode(t) != mode || self.cost(t) >= cost {
                            continue;
                        }
                        if self.exhausted() {
                            return false;
                        }
                        if self.try_apply(&[(v, tw), (w, tv), (x, t)]) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Improves a feasible solution; never raises its cost or breaks feasibility.
/// `move_budget` caps the number of evaluated moves (`usize::MAX` for no cap).
pub fn improve(sol: &Solution, inst: &ProblemInstance, move_budget: usize) -> Result<Solution, LocalSearchError> {
    let report = check_feasibility(sol, inst)?;
    if !report.feasible {
        return Err(LocalSearchError::Infeasible(report.violations));
    }
    if move_budget == 0 {
        return Ok(sol.clone());
    }
    let mut eval = Evaluator::new(sol, inst, move_budget);
    while !eval.exhausted() {
        if eval.replacement_pass() {
            continue;
        }
        if eval.exhausted() || !eval.swap_pass() {
            break;
        }
    }
    let mut out = sol.clone();
    for (node, &t) in out.nodes.iter_mut().zip(&eval.types) {
        node.type_id = t;
    }
    debug_assert!(check_feasibility(&out, inst).map(|r| r.feasible).unwrap_or(false));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{ControlLoop, DeviceType, GlobalLimits};
    use crate::structure::{total_cost, LoopPlacement, TreeBuilder};

    fn processor(id: usize, cost: f64, memory: f64) -> DeviceType {
        DeviceType {
            id,
            cost,
            channels: 8,
            memory,
            fail_prob: 0.001,
            instr_time: 1e-6,
            mode: Mode::Processor,
            max_children: 2,
            relay_delay: 0.0,
        }
    }

    fn two_processor_instance() -> ProblemInstance {
        ProblemInstance {
            devices: vec![processor(1, 150.0, 100.0), processor(2, 90.0, 20.0)],
            loops: vec![ControlLoop {
                id: 1,
                signals: 2,
                mem_demand: 12.0,
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

    fn single(type_id: usize) -> Solution {
        TreeBuilder::new(type_id).finish(vec![LoopPlacement {
            loop_id: 1,
            connect_leaf: 0,
            process_node: 0,
        }])
    }

    #[test]
    fn downgrades_oversized_processor() {
        let inst = two_processor_instance();
        let sol = single(1);
        let better = improve(&sol, &inst, usize::MAX).unwrap();
        assert_eq!(better.nodes[0].type_id, 2);
        let delta = total_cost(&sol, &inst).unwrap() - total_cost(&better, &inst).unwrap();
        assert_eq!(delta, 60.0);
        assert!(check_feasibility(&better, &inst).unwrap().feasible);
    }

    #[test]
    fn respects_memory_when_downgrading() {
        let mut inst = two_processor_instance();
        inst.loops[0].mem_demand = 30.0;
        let sol = single(1);
        assert_eq!(improve(&sol, &inst, usize::MAX).unwrap(), sol);
    }

    #[test]
    fn fixed_point_and_zero_budget() {
        let inst = two_processor_instance();
        assert_eq!(improve(&single(2), &inst, usize::MAX).unwrap(), single(2));
        assert_eq!(improve(&single(1), &inst, 0).unwrap(), single(1));
    }

    #[test]
    fn swap_enables_a_cheaper_pair() {
        // reliable all-rounder, unreliable leaf module, unreliable cheap controller
        let all_round = processor(1, 100.0, 100.0);
        let mut module = processor(2, 60.0, 1.0);
        module.fail_prob = 0.05;
        let mut controller = processor(3, 40.0, 100.0);
        controller.fail_prob = 0.05;
        controller.channels = 0;
        let inst = ProblemInstance {
            devices: vec![all_round, module, controller],
            loops: vec![ControlLoop {
                id: 1,
                signals: 4,
                mem_demand: 50.0,
                instr_count: 10,
            }],
            limits: GlobalLimits {
                levels: 2,
                max_cycle_time: 0.01,
                min_loop_reliability: 0.94,
                max_loop_delay: 0.01,
            },
        };
        let mut b = TreeBuilder::new(1);
        let leaf = b.add_child(0, 2);
        let sol = b.finish(vec![LoopPlacement {
            loop_id: 1,
            connect_leaf: leaf,
            process_node: 0,
        }]);
        assert!(check_feasibility(&sol, &inst).unwrap().feasible);
        // no single replacement is feasible
        for (v, t) in [(0, 2), (0, 3), (1, 3)] {
            let mut s = sol.clone();
            s.nodes[v].type_id = t;
            assert!(!check_feasibility(&s, &inst).unwrap().feasible, "{v}->{t}");
        }
        let out = improve(&sol, &inst, usize::MAX).unwrap();
        assert!(check_feasibility(&out, &inst).unwrap().feasible);
        assert_eq!(total_cost(&sol, &inst).unwrap(), 160.0);
        assert_eq!(total_cost(&out, &inst).unwrap(), 140.0);
        assert_eq!((out.nodes[0].type_id, out.nodes[1].type_id), (3, 1));
    }

    #[test]
    fn rejects_infeasible_input() {
        let mut inst = two_processor_instance();
        inst.loops[0].mem_demand = 500.0;
        assert!(matches!(
            improve(&single(1), &inst, 10),
            Err(LocalSearchError::Infeasible(_))
        ));
    }
}
