//! Risk-sensitive mean-field stochastic control in one dimension.
//!
//! The crate simulates the controlled mean-field SDE with a particle ensemble,
//! solves the Riccati equations of the linear-quadratic model (including the
//! finite-time blow-up of the feedback gain), builds the first and second order
//! adjoint processes along simulated optimal paths, estimates the exponential
//! cost by Monte Carlo and checks the maximum-principle inequality.

pub mod adjoint;
pub mod cost;
pub mod error;
pub mod grid;
pub mod model;
pub mod numerics;
pub mod riccati;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};
