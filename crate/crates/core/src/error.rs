use thiserror::Error;

/// Errors produced by the fitting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {actual}")]
    DimensionMismatch { field: &'static str, expected: usize, actual: usize },

    #[error("point {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("frame {frame} cannot be initialized: no keypoint with positive confidence")]
    Uninitializable { frame: i64 },

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: usize, term: String },

    #[error("no visible keypoints to evaluate")]
    NoVisibleKeypoints,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonPositiveDepth { .. } => "non_positive_depth",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Uninitializable { .. } => "uninitializable",
            Error::NonFinite { .. } => "non_finite",
            Error::NoVisibleKeypoints => "no_visible_keypoints",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn check_len(field: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { field, expected, actual })
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
