use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} outside range [{min}, {max}]")]
    OutOfRange { label: f64, min: f64, max: f64 },
    #[error("need at least {needed} distinct labels, found {found}")]
    InsufficientLabels { needed: usize, found: usize },
    #[error("requested {requested} samples but only {available} are available")]
    InsufficientSamples { requested: usize, available: usize },
    #[error("empty vicinity around y_c = {y_c}")]
    EmptyVicinity { y_c: f64 },
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("window around center {center} holds {found} real samples, need {needed}")]
    WindowTooSparse {
        center: f64,
        found: usize,
        needed: usize,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numbers themselves rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
