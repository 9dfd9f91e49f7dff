//! Optimal scheduling of sensor uplink and controller downlink transmissions
//! in a wireless control loop whose sensor runs on harvested energy.
//!
//! The scheduler picks, at every step, whether to stay idle, send a state
//! sample to the controller, or send a control packet to the actuator. The
//! crate discretizes the resulting Markov decision process ([`grid`],
//! [`kernel`]), solves it by value iteration ([`solver`]), extracts and checks
//! the threshold form of the optimal policy ([`policy`]), and evaluates
//! policies on the continuous system by Monte Carlo ([`sim`]). The `wncs`
//! binary drives all of this from a TOML file ([`config`], [`cli`]).
//!
//! ```
//! use wncs_sched::{grid::build_grid, kernel::build_kernel, model::ModelParams, solver::value_iteration};
//!
//! let params = ModelParams::default();
//! let grid = build_grid(&params, 5.0, 41, 6, true).unwrap();
//! let kernel = build_kernel(&params, &grid).unwrap();
//! let (table, report) = value_iteration(&kernel, 1e-6, 400).unwrap();
//! assert!(report.converged);
//! assert!(table.value_at(0.0, 0, 0, 3) > 0.0);
//! ```

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod grid;
pub mod kernel;
pub mod model;
pub mod policy;
pub mod sim;
pub mod solver;
