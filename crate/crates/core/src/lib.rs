//! Adapter caching for multi-tenant LoRA serving: workload synthesis,
//! calibrated latency models, a digital twin of the serving engine,
//! surrogate models trained on twin runs, and greedy GPU placement.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod perf_models;
pub mod placement;
pub mod rng;
pub mod surrogate;
pub mod twin;
pub mod workload;

pub use error::{Error, Result};
