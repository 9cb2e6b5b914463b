//! Batch front-end: problem specs in, versioned result documents out.

pub mod commands;
pub mod report;
pub mod spec;

pub use commands::{recompute, run, CliError, Command, Outcome, Recomputed};
pub use report::ResultDoc;
pub use spec::{ProblemSpec, SpecError};
