use thiserror::Error;

#[derive(Debug, Error)]
pub enum NlError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("series does not contract (sup ratio {ratio:.3}); retry with horizon <= {suggested_horizon:.6}")]
    NonContraction { ratio: f64, suggested_horizon: f64 },
    #[error("non-finite value during {0}; grid is too coarse near t=0")]
    NonFinite(&'static str),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("required spatial extent {required:.2} exceeds cap {cap:.2}")]
    ExtentOverflow { required: f64, cap: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NlError {
    pub fn config(msg: impl Into<String>) -> Self {
        NlError::Config(msg.into())
    }

    /// CLI process exit code: 2 config, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            NlError::Config(_) | NlError::Io(_) | NlError::Json(_) => 2,
            _ => 3,
        }
    }
}
