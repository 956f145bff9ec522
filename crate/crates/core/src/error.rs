use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::autograd::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: String,
        got: usize,
    },
    #[error("node {0:?} is out of range for this graph")]
    UnknownNode(NodeId),
    #[error("non-finite value produced by node {node:?} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("log of non-positive value {value} at node {node:?}")]
    LogDomain { node: NodeId, value: f64 },
    #[error("node {0:?} has not been evaluated; run forward first")]
    NotEvaluated(NodeId),
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter or lookup table `{0}`")]
    UnknownParam(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("graph builder is not deterministic: losses {first} and {second} differ")]
    NonDeterministic { first: f64, second: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("tree syntax: {0}")]
    Tree(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
