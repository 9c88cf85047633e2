use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}: row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("network structure: {0}")]
    Structure(String),

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("load flow did not converge after {iterations} iterations (final mismatch {mismatch:.3e} V)")]
    Divergence { iterations: usize, mismatch: f64 },

    #[error("voltage collapse at bus {bus}: {voltage:.2} V is below the collapse floor")]
    Infeasible { bus: String, voltage: f64 },

    #[error("sensitivity build failed at injection slot {slot}: {source}")]
    SensitivityBuild {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid energy: {0}")]
    InvalidEnergy(String),

    #[error("order rejected: {0}")]
    OrderRejected(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
