//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Schema or configuration problem (bad variable declaration, unknown
    /// column, invalid stage chain, ...).
    #[error("schema: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    /// A cell failed to parse. `line` is the 1-based CSV line number.
    #[error("parse error at line {line}, column '{column}': {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("duplicate observation for unit {unit} at event time {time}")]
    DuplicateObservation { unit: u64, time: i32 },

    #[error("unit {unit} has no baseline row at event time -1")]
    MissingBaseline { unit: u64 },

    #[error("unit {0} missing from the event-wave map")]
    AlignmentMissingUnit(u64),

    #[error("layout: {0}")]
    Layout(String),

    #[error("encode: {0}")]
    Encode(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("perfect separation detected; reduce the covariate set (propensity scores would be degenerate)")]
    PerfectSeparation,

    #[error("collinear column '{0}' after demeaning")]
    Collinear(String),

    #[error("cluster-robust inference requires at least 2 clusters, found {0}")]
    TooFewClusters(usize),

    #[error("training diverged at epoch {0}: non-finite loss or parameter")]
    Divergence(usize),

    #[error("conditioning width mismatch: model expects {expected} skeleton columns, got {got}")]
    Conditioning { expected: usize, got: usize },

    #[error("coefficient stability undefined: controls add no explanatory power (identical R-squared)")]
    StabilityUndefined,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code class: 1 = config, 2 = data, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::Config(_) => 1,
            Error::Parse { .. }
            | Error::DuplicateObservation { .. }
            | Error::MissingBaseline { .. }
            | Error::AlignmentMissingUnit(_)
            | Error::Layout(_)
            | Error::Encode(_)
            | Error::Insufficient(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::Serialization(_) => 2,
            Error::Fit(_)
            | Error::PerfectSeparation
            | Error::Collinear(_)
            | Error::TooFewClusters(_)
            | Error::Divergence(_)
            | Error::Conditioning { .. }
            | Error::StabilityUndefined
            | Error::Singular(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
