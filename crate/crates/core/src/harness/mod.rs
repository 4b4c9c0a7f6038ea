//! Training, evaluation and ablation runs over corpus files.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod train;

pub use config::{EvalConfig, OptimConfig, RunConfig};
pub use data::{split, PreparedRecord};
pub use evaluate::*;
pub use train::{smoothed_total, train, LossRow, ModelBundle, RngState, RunDir, TrainState, Trainer};

/// Worker threads for parallel sampling; `AVFLOW_THREADS` overrides the core count.
pub fn worker_threads() -> usize {
    std::env::var("AVFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
