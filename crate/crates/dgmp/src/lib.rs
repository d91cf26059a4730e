//! Descriptor aggregation with generalized max pooling.
//!
//! The crate turns variable-size sets of local descriptors (columns of a D×N
//! matrix, or the depth fibers of an activation volume) into fixed-size global
//! descriptors. Besides average, max, mixed and log-sum-exp pooling it
//! implements generalized max pooling, a ridge-regression weighting that
//! equalizes the influence of frequent and rare descriptors, together with:
//!
//! * analytic backward passes for every pooling operator (including the
//!   regularizer of the GMP solve) verified against finite differences,
//! * an AMSGrad optimizer with per-parameter learning-rate multipliers,
//! * batch-hard triplet loss, class-balanced batch sampling, and
//!   mean-average-precision retrieval evaluation,
//! * a synthetic bursty-descriptor generator, a pooling comparison benchmark,
//!   and a small end-to-end trainer.

pub mod bench;
pub mod grad;
pub mod linalg;
pub mod pooling;
pub mod retrieval;

pub use linalg::{Matrix, Vector};
pub use pooling::{
    pool, DescriptorSet, GlobalDescriptor, GmpSolution, GmpStrategy, PoolingConfig, PoolingMethod,
};
