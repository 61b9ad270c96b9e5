use std::path::PathBuf;

use crate::simlab::Trace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {field} must be finite and >= {min:e}, got {value}")]
    InvalidBox {
        field: &'static str,
        value: f64,
        min: f64,
    },

    #[error("invalid box: {field} must be finite, got {value}")]
    NonFiniteCoordinate { field: &'static str, value: f64 },

    #[error("invalid gaussian: {field} must be finite and positive, got {value}")]
    InvalidGaussian { field: &'static str, value: f64 },

    #[error("invalid transform: {field} must be finite and positive, got {value}")]
    InvalidTransform { field: &'static str, value: f64 },

    #[error("{side} box #{index}: {source}")]
    AtIndex {
        side: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("finite difference on {coord}: {source}")]
    Perturbation {
        coord: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("regression diverged at step {step}: non-finite loss or gradient")]
    Diverged { step: usize, trace: Box<Trace> },

    #[error("malformed dataset: {0}")]
    Structure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at(self, side: &'static str, index: usize) -> Self {
        Error::AtIndex {
            side,
            index,
            source: Box::new(self),
        }
    }
}
