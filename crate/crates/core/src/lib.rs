//! Similarity-based knowledge transfer between continuous-control tasks with
//! different state and action spaces.
//!
//! The pipeline has five stages:
//!
//! 1. Plain off-policy RL on the target task, keeping the observed
//!    transitions ([`rl`]).
//! 2. For every candidate source task, a reward-based alignment of the two
//!    state spaces and the two action spaces through encoder/decoder pairs
//!    ([`alignment`], fed by [`data`]).
//! 3. A similarity score per source from learned reward and transition
//!    models ([`dynamics`], [`similarity`]).
//! 4. Action transfer from the most similar source policy, followed by
//!    fixed-buffer optimization ([`simknot`]).
//! 5. Plain RL for the rest of the budget.
//!
//! [`envs`] provides analytic toy tasks and representation transforms that
//! manufacture task pairs with known correspondence; [`experiment`] holds
//! the reproducible harness behind the `simknot` binary.

pub mod alignment;
pub mod data;
pub mod dynamics;
pub mod envs;
mod error;
pub mod experiment;
pub mod nn;
pub mod rl;
mod rng;
pub mod similarity;
pub mod simknot;

pub use error::{Error, Result};

/// Sizes the global worker pool used by the parallel stages. Call once,
/// before any parallel work.
pub fn set_worker_threads(n: usize) -> std::result::Result<(), rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()
}
