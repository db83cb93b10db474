//! Economic model predictive control for aggregated water distribution
//! networks, with interpolated delta-input move blocking and a dense SQP
//! solver.

pub mod blocking;
pub mod error;
pub mod integrator;
pub mod model;
pub mod objective;
pub mod ocp;
pub mod qp;
pub mod scenario;
pub mod simulation;
pub mod sqp;

pub use error::{Error, Result};
