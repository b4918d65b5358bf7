use thiserror::Error;

/// Errors produced by the solvers, oracles and file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("infeasible capacities: capacities sum to {sum}, need at least 1")]
    InfeasibleCapacities { sum: f64 },

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("search space too large: {size} exceeds the bound {bound}")]
    TooLarge { size: f64, bound: f64 },

    #[error("no feasible solution: {0}")]
    Infeasible(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
