use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown grade `{0}`")]
    UnknownGrade(String),

    #[error("edge {g}->{h} is not admissible")]
    InadmissibleEdge { g: usize, h: usize },

    #[error("empty edge set")]
    EmptyEdgeSet,

    #[error("increment {0} leaves the grading at every grade")]
    BandOutOfRange(i64),

    #[error("singular operator for grade {grade}")]
    Singular { grade: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-probability {0}")]
    ZeroProbability(String),

    #[error("no unique margin key: {0}")]
    NoMargin(String),

    #[error("update images are not orthogonal: {0}")]
    NotOrthogonal(String),

    #[error("program type mismatch at step {step}: {detail}")]
    ProgramType { step: usize, detail: String },

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
