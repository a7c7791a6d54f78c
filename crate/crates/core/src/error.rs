use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Cholesky factorization of a block's Q failed.
    #[error("block {block}: Q is not symmetric positive definite")]
    SingularQ { block: usize },

    /// The aggregate curvature sum of the Φ_i is numerically singular, so the
    /// fixed point is not unique.
    #[error("aggregate dual curvature is singular (rank-deficient coupling)")]
    SingularAggregate,

    #[error("invalid probability vector: {0}")]
    InvalidPmf(String),

    #[error("mode space q^N = {q}^{n} is too large to enumerate (limit {limit})")]
    ModeOverflow { q: usize, n: usize, limit: u64 },

    #[error("iterative eigenvalue method did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("synchronous iteration is unstable: spectral radius {rho} >= 1")]
    Unstable { rho: f64 },

    #[error("iteration diverged at k = {k}: |y|_inf = {norm:e}")]
    Diverged { k: usize, norm: f64 },

    /// The gate kept holding past its consecutive-hold limit.
    #[error("gate held {holds} consecutive steps at k = {k}")]
    Stalled { k: usize, holds: usize },

    #[error("nothing to export")]
    EmptyExport,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Format { context: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
