use std::path::PathBuf;

use chrono::NaiveDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{}: file contains no data rows", path.display())]
    Empty { path: PathBuf },

    #[error("duplicate image_id {id:?} on data rows {first_row} and {second_row}")]
    DuplicateId {
        id: String,
        first_row: usize,
        second_row: usize,
    },

    #[error("data row {row}: invalid image_id {id:?} (must be non-empty without whitespace or path separators)")]
    InvalidId { row: usize, id: String },

    #[error("data row {row}: cannot parse timestamp {value:?}")]
    BadTimestamp { row: usize, value: String },

    #[error("data row {row}: cannot parse date {value:?}")]
    BadDate { row: usize, value: String },

    #[error("row count mismatch: embeddings declare {found} rows but the manifest has {expected}")]
    RowCountMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("data row {row}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { row: usize, timestamp: String },

    #[error("data row {row}: {field} = {value} is out of range")]
    OutOfRange {
        row: usize,
        field: &'static str,
        value: f64,
    },

    #[error("unknown timezone {0:?}")]
    UnknownZone(String),

    #[error("no weather observations for {}", format_dates(.dates))]
    MissingDays { dates: Vec<NaiveDate> },

    #[error("photo date {photo} precedes decomposition start {start}")]
    PhotoBeforeStart { photo: NaiveDate, start: NaiveDate },

    #[error("no decomposition start date for donor {0:?}")]
    MissingDonorStart(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("perplexity search did not converge for row {row}")]
    Bisection { row: usize },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("unknown image_id {0:?}")]
    UnknownImage(String),

    #[error("unknown cluster {0}")]
    UnknownCluster(u32),

    #[error("merge map has no entry for cluster {0}")]
    MergeMissing(u32),

    #[error("{0}")]
    Session(String),
}

fn format_dates(dates: &[NaiveDate]) -> String {
    dates
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
