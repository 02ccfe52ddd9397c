//! Synthesis of minimum-cost hierarchical control-system structures.
//!
//! A problem instance lists purchasable device types, control loops and global
//! limits. A solution is a level-layered device tree in which every loop is
//! wired to a leaf and processed at a processor on that leaf's root path. The
//! [`aco`] module searches for cheap feasible trees with an ant colony,
//! [`local_search`] refines them, and [`exact`] enumerates small instances
//! exhaustively to provide reference optima.

pub mod aco;
pub mod exact;
pub mod experiment;
pub mod instance;
pub mod local_search;
pub mod schedule;
pub mod structure;

pub use aco::{run_aco, run_aco_observed, AcoParams, RunResult};
pub use instance::{parse_instance, ProblemInstance};
pub use structure::{check_feasibility, total_cost, Solution};
