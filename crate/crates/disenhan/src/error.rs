use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: String, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("empty relation group: every entry is masked")]
    EmptyGroup,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("graph schema is not heterogeneous: |A| + |R| = {types} + {relations} <= 2")]
    NotHeterogeneous { types: usize, relations: usize },

    #[error("unknown meta relation {0}")]
    UnknownRelation(String),

    #[error(
        "edge ({src}, {dst}) invalid under relation {relation}: {reason}"
    )]
    BadEdge { relation: String, src: usize, dst: usize, reason: String },

    #[error("{file}:{line}: malformed line: {reason}")]
    MalformedLine { file: String, line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
