use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String, op: &'static str },

    #[error("empty attention row (row {row} has no valid entries)")]
    EmptyAttentionRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unknown parameter '{name}'")]
    UnknownParameter { name: String },

    #[error("embedding id {id} out of range for table '{table}' (vocab {vocab})")]
    IdOutOfRange { table: String, id: usize, vocab: usize },

    #[error("valid_len {valid_len} exceeds L_max {l_max}")]
    ValidLenOutOfRange { valid_len: usize, l_max: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("AUC undefined: need at least one positive and one negative label")]
    AucUndefined,

    #[error("infeasible density: n_samples/n_items = {realised:.3} is more than 15% from target {target:.3}")]
    InfeasibleDensity { realised: f64, target: f64 },

    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("malformed record at byte offset {offset}: {reason}")]
    MalformedRecord { offset: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
