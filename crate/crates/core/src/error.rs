use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at step {step}: {detail}")]
    StepDimension { step: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("argument {value} outside the domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("mean trajectory violates constraint {constraint} at step {step} (slack {slack:e})")]
    InfeasibleMean { constraint: usize, step: usize, slack: f64 },

    #[error("{0}")]
    Infeasible(InfeasibilityReport),

    #[error("{0}")]
    Solver(SolverDiagnostic),

    #[error("invalid problem: {0}")]
    Invalid(String),

    #[error("internal logic error: {0}")]
    Logic(String),
}

/// Where the lower-stage program most likely breaks, measured at the
/// minimum-norm mean-steering input with zero feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct InfeasibilityReport {
    pub solver_status: String,
    /// Constraint row index (0-based) and step (1-based) of the tightest cell.
    pub constraint: usize,
    pub step: usize,
    pub required_offset: f64,
    pub available_slack: f64,
}

impl InfeasibilityReport {
    pub fn violation(&self) -> f64 {
        self.required_offset - self.available_slack
    }
}

impl fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lower stage infeasible ({}): tightest constraint {} at step {} needs offset {:.6e} but has slack {:.6e}",
            self.solver_status, self.constraint, self.step, self.required_offset, self.available_slack
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostic {
    pub status: String,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl fmt::Display for SolverDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conic solver failed with status {} after {} iterations (primal residual {:.3e}, dual residual {:.3e})",
            self.status, self.iterations, self.primal_residual, self.dual_residual
        )
    }
}
