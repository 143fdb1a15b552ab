use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {msg}")]
    Parse { path: PathBuf, row: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("insufficient data for intervention {j}: {msg}")]
    InsufficientData { j: usize, msg: String },

    #[error("model fit failed{}: {msg}", fmt_intervention(*.j))]
    Fit { j: Option<usize>, msg: String },

    #[error("rank-deficient design; collinear columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("bias model not identifiable: {available} randomized interventions, need at least p_v = {required}")]
    Identifiability { required: usize, available: usize },

    #[error("fitted bias is zero; optimal shrinkage undefined")]
    DegenerateBias,

    #[error("decomposition failed: {0}")]
    Decomposition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("intervention {j} has a nonzero hat-matrix column but no randomized records")]
    MaskedVariance { j: usize },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("round {round}: {source}")]
    Round { round: usize, source: Box<Error> },

    #[error("replication {replication} (seed {seed}): {source}")]
    Replication {
        replication: usize,
        seed: u64,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_intervention(j: Option<usize>) -> String {
    match j {
        Some(j) => format!(" for intervention {j}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
