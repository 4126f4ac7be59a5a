//! Sharpness-aware multi-task optimization.
//!
//! The crate provides layered parameter containers, a [`MultiTaskProblem`]
//! abstraction with forward/backward pass accounting, gradient-manipulation
//! methods (linear scalarization, MGDA, PCGrad), perturbation engines for
//! global, local and joint global-local sharpness-aware updates with
//! forward-only local gradient estimates, the training loop, and
//! sharpness/conflict diagnostics.

pub mod diagnostics;
pub mod error;
pub mod params;
pub mod problem;
pub mod problems;
pub mod optimizer;
pub mod rng;
pub mod sam;
pub mod weighting;

pub use error::{Error, Result};
pub use params::{axpy, LayeredParams, NormScope};
pub use problem::{check_gradients, GradientSet, MultiTaskProblem, PassCount, PassCounters};
