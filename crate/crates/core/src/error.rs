use thiserror::Error;

use crate::semiparam::RankReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid truncation bounds: lower {lower} must be below upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("sampler state corrupted: {0}")]
    StateCorruption(String),

    #[error("rank-deficient system ({context}); condition number {}", .report.condition_number)]
    RankDeficiency {
        context: String,
        report: Box<RankReport>,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
