use thiserror::Error;

pub type Result<T, E = FlagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlagError {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A statistic has no defined value for the given input (e.g. zero variance).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training failed at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("sampler diverged at step {step}: {detail}")]
    SamplerDivergence { step: usize, detail: String },

    #[error("construction failed: {0}")]
    Construction(String),

    /// Malformed input file; `field` names the offending header key or block.
    #[error("parse error in `{field}`: {detail}")]
    Parse { field: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FlagError {
    pub fn parse(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Parse { field: field.into(), detail: detail.into() }
    }

    /// True for failures caused by non-finite numbers or diverging dynamics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Training { .. } | Self::SamplerDivergence { .. } | Self::Undefined(_))
    }
}
