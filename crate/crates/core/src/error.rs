use thiserror::Error;

/// Every failure the library can report.
///
/// Variants fall in two families: validation problems with the inputs
/// (see [`FgccaError::is_validation`]) and numerical failures during
/// estimation or fitting.
#[derive(Debug, Error)]
pub enum FgccaError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("incompatible grids: {0}")]
    IncompatibleGrid(String),

    #[error("metric for process {process} is not positive definite")]
    IllPosedMetric { process: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("range error on line {line}: {message}")]
    Range { line: u64, message: String },

    #[error("duplicate observation on line {line}: {message}")]
    Duplicate { line: u64, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("process {process}: {message}")]
    InsufficientData { process: usize, message: String },

    #[error("bandwidth too small: no data in the smoothing window at {location}")]
    BandwidthTooSmall { location: String },

    #[error("no subject observes both process {first} and process {second}")]
    NoOverlap { first: usize, second: usize },

    #[error("process {process} has nonpositive integrated variance {value}")]
    DegenerateProcess { process: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero gradient for process {process}")]
    Stationary { process: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("function for process {process} is not unit norm (squared norm {norm_sq})")]
    Normalization { process: usize, norm_sq: f64 },

    #[error("degenerate component for process {process}: quadratic form {value}")]
    DegenerateComponent { process: usize, value: f64 },

    #[error("time {time} lies outside [{lower}, {upper}]")]
    Extrapolation { time: f64, lower: f64, upper: f64 },

    #[error("process {process}: observation gap {gap:.4} exceeds {limit:.4} of the interval; use BLUP scores")]
    SparseData { process: usize, gap: f64, limit: f64 },

    #[error("singular conditional covariance; add jitter or use a positive noise variance")]
    SingularBlup,

    #[error("reconstruction needs basis coefficients, got uncorrelated-mode components")]
    ReconstructionBasis,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("fit failed at order {order}: {source}")]
    OrderFailure {
        order: usize,
        #[source]
        source: Box<FgccaError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FgccaError {
    /// True when the error stems from bad inputs rather than a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            FgccaError::InvalidGrid(_)
            | FgccaError::IncompatibleGrid(_)
            | FgccaError::Schema(_)
            | FgccaError::Parse { .. }
            | FgccaError::Range { .. }
            | FgccaError::Duplicate { .. }
            | FgccaError::InvalidDataset(_)
            | FgccaError::InvalidConfig(_)
            | FgccaError::Extrapolation { .. }
            | FgccaError::SparseData { .. }
            | FgccaError::ReconstructionBasis
            | FgccaError::Dimension(_)
            | FgccaError::Io(_)
            | FgccaError::Json(_) => true,
            FgccaError::OrderFailure { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FgccaError>;
