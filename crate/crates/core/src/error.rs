use std::fmt;

/// Errors produced by every layer of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: {detail}")]
    Shape { axis: &'static str, detail: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("{0}")]
    Bind(BindError),

    #[error("model state: {0}")]
    State(String),

    #[error("non-finite gradient in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mismatch between a weight store and the slots of a model graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindError {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub mismatched: Vec<String>,
}

impl BindError {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }
}

impl fmt::Display for BindError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "weight binding failed")?;
        if !self.missing.is_empty() {
            write!(f, "; missing: {}", self.missing.join(", "))?;
        }
        if !self.unexpected.is_empty() {
            write!(f, "; unexpected: {}", self.unexpected.join(", "))?;
        }
        if !self.mismatched.is_empty() {
            write!(f, "; wrong shape: {}", self.mismatched.join(", "))?;
        }
        Ok(())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(axis: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        axis,
        detail: detail.into(),
    }
}
