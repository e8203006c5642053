use std::path::PathBuf;

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

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{}:{line}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },

    #[error("scene invariant violated: {0}")]
    Invariant(String),

    #[error("could not place {requested} boxes without overlap (placed {placed})")]
    Placement { requested: usize, placed: usize },

    #[error("assignment infeasible: ground truth column {column} has no finite cost")]
    Infeasible { column: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn with_path(self, p: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: Some(p.to_path_buf()),
                line,
                msg,
            },
            other => other,
        }
    }
}
