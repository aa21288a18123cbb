//! Dual-aspect transformer policy and PPO trainer for learning 2-opt, insert and swap
//! improvement heuristics on TSP and CVRP.

pub mod bench;
pub mod cpe;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
