//! Exact feasibility solving for pure-integer linear programs.
//!
//! Models are conjunctions of linear rows over bounded integer and binary
//! variables. [`solve_ilp`] runs depth-first branch-and-bound over a
//! bounded-variable simplex relaxation and only reports a witness after an
//! exact rational re-check. Models can be exported to and read back from the
//! CPLEX LP text format for cross-checking with external solvers.

pub mod bnb;
pub mod error;
pub mod exact;
pub mod lp_format;
pub mod model;
pub mod simplex;

pub use bnb::{solve_ilp, SolveResult, SolveStats, SolveStatus, SolverConfig};
pub use error::IlpError;
pub use lp_format::{parse_lp, write_lp};
pub use model::{Comparator, IlpModel, LinConstraint, Var, VarId, VarKind};
pub use simplex::{solve_lp, LpOutcome, LpRelaxation};
