//! Highway tactical driving laboratory.
//!
//! A three-lane kinematic traffic simulator, an occupancy-grid observation,
//! a five-term reward, a double deep Q-network agent and an exact
//! finite-horizon dynamic-programming benchmark, plus the harness that runs
//! policies against each other over seeded scenario batches.

pub mod ddqn;
pub mod dp;
pub mod episode;
pub mod error;
pub mod eval;
pub mod nn;
pub mod perception;
pub mod reward;
pub mod seeding;
pub mod sim;
pub mod table;

pub use error::{Error, Result};
