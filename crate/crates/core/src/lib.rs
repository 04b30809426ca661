//! Unsupervised learning of mean-field game (MFG) solution operators.
//!
//! A single attention-based network maps sampled initial/terminal agent
//! distributions to optimal transport trajectories in one forward pass.
//! Training minimizes the amortized MFG cost (transport + interaction +
//! terminal) over a distribution of problem instances; no supervised
//! labels are involved. Closed-form Gaussian baselines provide the
//! accuracy oracle.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod problems;
pub mod rng;
pub mod sample;
pub mod trainer;

pub use error::{Error, Result};
pub use sample::SampleBatch;
