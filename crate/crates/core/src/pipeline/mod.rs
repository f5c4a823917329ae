//! Training stages, checkpoints, experiment orchestration and benchmarking.

pub mod checkpoint;
mod config;
mod stages;
mod train;

pub use config::*;
pub use stages::*;
pub use train::*;
