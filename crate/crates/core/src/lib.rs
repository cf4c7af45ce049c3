//! Meta-training of a hierarchical GRU learned optimizer, with a sequential
//! baseline and a cluster-parallel pipeline.
//!
//! Module map:
//! - [`numcore`]: vectors, seeded streams, finite-difference oracle
//! - [`tasks`]: the synthetic task families
//! - [`learned_optimizer`]: the GRU optimizer, its tape and meta-backward
//! - [`meta_engine`]: task loop, RMSProp meta loop, training pipelines
//! - [`parallel_exec`]: worker pools and deterministic reductions
//! - [`scheduler`]: clustering and makespan-balanced grouping
//! - [`bench`]: run configuration, benchmark runs and report files

pub mod bench;
pub mod error;
pub mod learned_optimizer;
pub mod meta_engine;
pub mod numcore;
pub mod parallel_exec;
pub mod registry;
pub mod scheduler;
pub mod tasks;

pub use error::{Error, Result};
