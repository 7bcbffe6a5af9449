pub mod embed;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod kg;
pub mod mcts;
pub mod planner;
pub mod remote;

pub use error::{Error, Result};
