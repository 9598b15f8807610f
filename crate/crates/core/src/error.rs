use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or malformed structure.
    #[error("structural error: {0}")]
    Structural(String),
    /// NaN, infinite or negative entries.
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The killed set covers the whole state space.
    #[error("empty operator: killed set covers every state")]
    EmptyOperator,
    /// Laplace argument at or beyond the convergence abscissa.
    #[error(
        "u = {u} outside the domain: need Re(u) < {abscissa} (principal Dirichlet eigenvalue {lambda})"
    )]
    Domain { u: f64, abscissa: f64, lambda: f64 },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("degenerate input: {0}")]
    Degeneracy(String),
    /// A chain failed validation.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
