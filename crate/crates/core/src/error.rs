use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error(
        "degenerate restriction{}: target puts all of its mass on unsupported actions",
        context.map(|c| format!(" at context {c}")).unwrap_or_default()
    )]
    DegenerateRestriction { context: Option<usize> },

    #[error("corrupt data at record {record}: {reason}")]
    CorruptData { record: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("empty policy list")]
    EmptyPolicyList,

    #[error("training failed at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("identity `{name}` violated by {gap:e}")]
    IdentityViolation { name: &'static str, gap: f64 },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
