use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("{op}: expected at least {expected} points, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("degenerate singular values ({0:.3e} apart) and finite-difference fallback disabled")]
    DegenerateGradient(f64),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("finite-difference probe failed: {0}")]
    Probe(String),

    #[error("non-finite values after stage `{stage}`")]
    NumericBlowup { stage: String },

    #[error("all rows of the ground-truth matching matrix are outliers")]
    AllOutliers,

    #[error("unknown shape kind `{0}`")]
    UnknownShape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
