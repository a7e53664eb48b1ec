//! Independent correctness checks: KKT certification from primal structure,
//! an exhaustive grid oracle and a general-purpose reference solver.

pub mod kkt;
pub mod oracle;
pub mod reference;

pub use kkt::{kkt_residual, kkt_residual_tol, KktError, KktReport, DEFAULT_TOLERANCE};
pub use oracle::{grid_oracle, GridResult, OracleError};
pub use reference::{reference_solve, ReferenceError, ReferenceOptions, ReferenceSolution};
