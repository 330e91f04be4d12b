//! Weighted variational counterdiabatic driving for spin-1/2 systems.
//!
//! The crate is layered bottom-up:
//!
//! - [`pauli`]: sparse Pauli-string algebra with site-indexed commutators.
//! - [`model`]: factorized Hamiltonians, random Ising instances and driving ansätze.
//! - [`action`]: the weighted-action quadratic form, per λ or factorized over a λ sweep.
//! - [`protocol`]: ground-state polynomials, energy shifts and protocol tables.
//! - [`linalg`]: small dense solvers.
//! - [`oracle`]: dense-matrix ground truth and time evolution for small systems.

pub mod action;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pauli;
pub mod protocol;

pub use pauli::{Axis, PauliTerm, SparseOperator, C64};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("site index was built over a different operator")]
    StaleIndex,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("degenerate levels {n} and {m} are coupled by the derivative (coupling {coupling:.3e})")]
    Degeneracy { n: usize, m: usize, coupling: f64 },
    #[error("energy-shift optimization failed: {0}")]
    OptimizationFailed(String),
    #[error("linear solver failed: {0}")]
    Solver(String),
    #[error("integration did not converge: {0}")]
    Integration(String),
    #[error("resource guard: {0}")]
    ResourceGuard(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
