use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("empty prompt: at least one exemplar box or text token is required")]
    EmptyPrompt,

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("unknown token {0:?}")]
    UnknownWord(String),

    #[error("exemplar token {index} refers to class {class} which has no text tokens")]
    UnknownExemplarClass { index: usize, class: usize },

    #[error("query budget k={k} exceeds the {n} available image tokens")]
    QueryBudget { k: usize, n: usize },

    #[error("more targets than queries ({targets} > {queries})")]
    TooManyTargets { targets: usize, queries: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema violation in {image_id:?}: field `{field}`: {message}")]
    Schema {
        image_id: String,
        field: String,
        message: String,
    },

    #[error("training diverged at epoch {epoch} step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
