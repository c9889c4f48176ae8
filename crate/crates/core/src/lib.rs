//! Explicit Jacobi co-simulation of coupled linear ODE subsystems.
//!
//! Subsystems advance independently over each exchange interval on
//! reconstructed inputs (ZOH, FOH or Lagrange holds, optional smooth
//! switching and balance correction). Exact oracles and experiment drivers
//! measure convergence order and energy behaviour.

pub mod config;
pub mod error;
pub mod harness;
pub mod model;
pub mod ode;
pub mod oracles;
pub mod orchestrator;
pub mod output;
pub mod signals;

pub use error::{Error, Result};
