pub mod error;
pub mod eval;
pub mod neuro;
pub mod parallel;
pub mod qbot;
pub mod training;
pub mod world;

pub use error::{Error, NeuroError, Result};
