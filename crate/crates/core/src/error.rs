//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("backward pass already consumed this graph; rebuild the forward pass first")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("variable did not participate in the backward graph")]
    DetachedVariable,

    #[error("non-finite gradient for parameter `{param}`; optimizer step aborted")]
    NonFiniteGradient { param: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("duplicate manifest record for (subject={subject}, session={session}, angle={angle})")]
    DuplicateRecord {
        subject: String,
        session: String,
        angle: i32,
    },

    #[error("unknown expression name `{name}` at manifest line {line}")]
    UnknownExpression { name: String, line: usize },

    #[error("batch sampler shortfall: {0}")]
    SamplerShortfall(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("label fraction {fraction} leaves classes without samples: {classes:?}")]
    UncoveredClasses { fraction: f64, classes: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
