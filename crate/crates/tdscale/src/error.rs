use thiserror::Error;

#[derive(Debug, Error)]
pub enum TdScaleError {
    #[error("non-finite observation: {0}")]
    NonFinite(f64),
    #[error("empty accumulator: {0}")]
    EmptyStats(&'static str),
    #[error("invalid episode trace: {0}")]
    InvalidTrace(String),
    #[error("discount out of range: {0}")]
    InvalidDiscount(f64),
    #[error("scaler state does not match kind {0}")]
    ScalerMismatch(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid action {action} for state {state}")]
    InvalidAction { state: usize, action: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("insufficient samples: need {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TdScaleError>;
