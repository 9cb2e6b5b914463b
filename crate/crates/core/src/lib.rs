//! Linear-quadratic stochastic control with operator coefficients on finite scenario trees.
//!
//! Every solver route (coupled FBSDE by continuation, direct quadratic-form
//! minimization, per-level Fredholm resolvent) works on the same exact discrete
//! problem, so the routes can be checked against each other to roundoff.

pub mod dynamics;
pub mod error;
pub mod fbsde;
pub mod fixtures;
pub mod lq;
pub mod mean_variance;
pub mod meanfield;
pub mod operators;
pub mod tree;

pub use dynamics::LQProblem;
pub use error::{Error, Result};
pub use fbsde::{ContinuationOptions, FbsdeData, FbsdeSolution};
pub use operators::{MeanFieldOperator, MeanFieldTerm, NodeMatrices, OperatorProcess};
pub use tree::{AdaptedProcess, RandomVector, ScenarioTree};
