//! Edge optimization: int8 weight quantization, magnitude pruning and
//! latency benchmarking.

mod bench;
mod prune;
mod quantize;

use thiserror::Error;

pub use bench::{bench, percentile_summary, BenchReport, LatencyStats, WARMUP_FRAMES, MIN_MEASURED_FRAMES};
pub use prune::{prune, prune_slice, sparsity};
pub use quantize::{dequantize, quantize, QMatrix, QuantizedParams, QMAX};

#[derive(Debug, Error)]
pub enum EdgeOptError {
    #[error("model has non-finite weights")]
    NonFiniteWeights,
    #[error("pruning fraction {0} outside [0,1]")]
    InvalidFraction(f64),
    #[error("benchmark needs at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}
