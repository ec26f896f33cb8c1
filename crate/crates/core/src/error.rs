use thiserror::Error;

pub type Result<T, E = DalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DalError {
    #[error("image must be square, got {width}x{height}")]
    NonSquare { width: usize, height: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("design {design} is outside the design space of size {size}")]
    InvalidDesign { design: usize, size: usize },

    #[error("design {0} is already measured")]
    DuplicateDesign(usize),

    #[error("design space exhausted: every design is already measured")]
    ExhaustedDesignSpace,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported operator for {op}: {reason}")]
    UnsupportedOperator { op: &'static str, reason: String },

    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image decoding error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(String),
}

impl DalError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DalError::InvalidParameter(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            DalError::NonSquare { .. } => "non_square",
            DalError::NonFinite(_) => "non_finite",
            DalError::DimensionMismatch { .. } => "dimension_mismatch",
            DalError::InvalidDesign { .. } => "invalid_design",
            DalError::DuplicateDesign(_) => "duplicate_design",
            DalError::ExhaustedDesignSpace => "exhausted_design_space",
            DalError::InvalidParameter(_) => "invalid_parameter",
            DalError::Empty(_) => "empty",
            DalError::UnsupportedOperator { .. } => "unsupported_operator",
            DalError::Diverged { .. } => "diverged",
            DalError::Format(_) => "format",
            DalError::Io(_) => "io",
            DalError::Image(_) => "image",
            DalError::Json(_) => "json",
            DalError::Toml(_) => "toml",
        }
    }
}

impl From<toml::de::Error> for DalError {
    fn from(e: toml::de::Error) -> Self {
        DalError::Toml(e.to_string())
    }
}

impl From<toml::ser::Error> for DalError {
    fn from(e: toml::ser::Error) -> Self {
        DalError::Toml(e.to_string())
    }
}
