//! Concrete multi-task problems.

pub mod mlp;
pub mod quadratic;
pub mod toy;

pub use mlp::{Dataset, MlpConfig, MlpMultiTaskProblem};
pub use quadratic::{QuadraticProblem, QuadraticTask};
pub use toy::{toy_grads, toy_grid, toy_losses, toy_pareto_grid, GridPoint, ToyProblem, TOY_START};
