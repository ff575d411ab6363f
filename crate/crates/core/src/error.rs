use thiserror::Error;

/// Errors raised by the tensor, graph, rewrite, builder and assignment layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {dim} expected {expected}, found {found}")]
    Shape { context: String, dim: &'static str, expected: usize, found: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("graph error at node {node}: {reason}")]
    Graph { node: usize, reason: String },

    #[error("graph is not well formed: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, dim: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape { context: context.into(), dim, expected, found }
    }

    pub(crate) fn at_node(node: usize, err: Error) -> Self {
        match err {
            Error::Graph { .. } => err,
            other => Error::Graph { node, reason: other.to_string() },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
