use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} outside the domain [-1, 1]")]
    Domain { value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("experimental design is empty")]
    EmptyDesign,

    #[error("singular least-squares system (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("leave-one-out error is ill-posed: {0}")]
    IllPosedLoo(String),

    #[error("adaptive fit failed for channel {channel}: {detail}")]
    FitFailed { channel: usize, detail: String },

    #[error("sensitivity indices undefined for a zero-variance model")]
    UndefinedSensitivity,

    #[error("all samples are identical; density estimate is degenerate")]
    DegenerateDistribution,

    #[error("sample set is empty")]
    EmptySamples,

    #[error("unsupported schema version {found} (this build reads up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("table line {line}: {message}")]
    Table { line: u64, message: String },

    #[error("oracle failed at row {row}: {source}")]
    Oracle {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cost evaluation failed for particle {particle}: {message}")]
    Evaluator { particle: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
