use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-numeric cell {value:?} at {location}")]
    NonNumeric { value: String, location: String },

    #[error("NaN or infinite value at subject {subject}, node {node}, scan {scan}")]
    NonFinite {
        subject: usize,
        node: usize,
        scan: usize,
    },

    #[error("constant (zero-variance) series at subject {subject}, node {node}")]
    ZeroVariance { subject: usize, node: usize },

    #[error("invalid edge ({j}, {l}) for {v} nodes: require j < l < V")]
    InvalidEdge { j: usize, l: usize, v: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("lasso did not converge after {sweeps} sweeps (KKT residual {kkt_residual:.3e})")]
    LassoNotConverged { sweeps: usize, kkt_residual: f64 },

    #[error("all fused-lasso weights are zero (empty component)")]
    EmptyComponent,

    #[error("non-finite log-posterior at EM iteration {iteration}")]
    NonFiniteLogPosterior { iteration: usize },

    #[error("log-posterior decreased beyond the Monte Carlo noise band for {0} consecutive iterations")]
    NonMonotone(usize),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
