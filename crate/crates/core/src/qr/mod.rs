//! Weighted quantile regression: check loss, problem container and solver.

mod check;
mod ipm;
mod problem;

pub use check::{check_loss, influence};
pub use ipm::{solve, SolverOptions, WqrSolution};
pub use problem::{RowView, WqrProblem};
