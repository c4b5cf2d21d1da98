use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate jitter: no valid box after {attempts} attempts")]
    DegenerateJitter { attempts: usize },

    #[error("category {0} is missing")]
    MissingCategory(u32),

    #[error("count error: need {needed}, have {available}")]
    Count { needed: usize, available: usize },

    #[error("encode error: {0}")]
    Encode(String),

    #[error("missing negatives: user_curated mode needs at least one negative prompt")]
    MissingNegatives,

    #[error("placement error: could not place instance of category {category} in scene {scene}")]
    Placement { scene: u64, category: u32 },

    #[error("batch construction error: {0}")]
    Construction(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
