//! Desk-scale laboratory for pointer-chain sequence modeling.
//!
//! Each position selects exactly one target position per layer; selections
//! chain across layers through an encoding of the previous layer's pointers.
//! The crate bundles everything needed to study the idea end to end:
//!
//! - [`tensor`] / [`tape`] / [`check`]: minimal reverse-mode autodiff over
//!   dense f32 tensors, with finite-difference oracles.
//! - [`nn`]: linear / layer-norm / embedding / FFN / cross-entropy /
//!   Gumbel-Softmax building blocks.
//! - [`pointer`]: the pointer architecture (dense and candidate-set scoring,
//!   soft training path, hard inference path).
//! - [`vanilla`]: a parameter-matched standard-attention baseline.
//! - [`tasks`]: seeded copy and associative-recall generators plus metrics.
//! - [`train`]: Adam, temperature annealing, the training loop, checkpoints.
//! - [`bench`]: wall-clock scaling harness, throughput and flop accounting.
//! - [`interpret`]: pointer-trace statistics and heatmap export.

pub mod bench;
pub mod check;
pub mod checkpoint;
pub mod error;
pub mod interpret;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod pointer;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod vanilla;

pub use error::{CheckpointError, Error, Result};
pub use tape::{CandidateTable, Tape, Var, MASKED_SCORE};
pub use tensor::Tensor;

/// Cap the data-parallel worker count. A size of 1 keeps every timed region
/// strictly single-threaded (the default for benchmarks). No-op without the
/// `parallel` feature; call at most once per process.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
