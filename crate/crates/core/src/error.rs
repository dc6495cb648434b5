use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: parse error in field `{field}`: {msg}")]
    CorpusParse {
        path: String,
        line: usize,
        field: String,
        msg: String,
    },
    #[error("{path}:{line}: duplicate family id `{id}`")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("template `{template}`: missing required slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("template `{template}`: unknown slot `{slot}` supplied")]
    UnknownSlot { template: String, slot: String },
    #[error("label `{label}:` not found in response; raw response kept for audit")]
    LabelNotFound { label: String, raw: String },
    #[error("text is empty after rule filtering ({context})")]
    FilteredToEmpty { context: String },
    #[error("poisoned {field} equals its positive counterpart (family {family_id})")]
    NoOpPoison { family_id: String, field: String },
    #[error("chat request failed (family {family_id}, template {template}): {msg}")]
    ChatTransport {
        family_id: String,
        template: String,
        msg: String,
    },
    #[error("scripted response file has no entry for ({template}, {family_id})")]
    ScriptMiss { template: String, family_id: String },
    #[error("cannot embed text with no tokens: {text:?}")]
    EmptyText { text: String },
    #[error("precomputed store miss for text id {id} ({snippet:?})")]
    PrecomputedMiss { id: String, snippet: String },
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },
    #[error("degenerate pooling: vector norm below threshold")]
    DegeneratePooling,
    #[error("unknown init scheme `{0}`")]
    UnknownScheme(String),
    #[error("backward cache does not match forward call: {0}")]
    CacheMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown loss variant `{got}`; valid variants are: {valid}")]
    UnknownVariant { got: String, valid: String },
    #[error("brute-force oracle guard: batch size {got} exceeds limit {limit}")]
    BatchTooLarge { got: usize, limit: usize },
    #[error("{path}:{line}: {msg}")]
    DatasetSchema {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("evaluation dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("ranked run for query {query_id} contains duplicate passage id {passage_id}")]
    DuplicatePassage {
        query_id: String,
        passage_id: String,
    },
    #[error("checkpoint file {path} is malformed: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("kappa is undefined: chance agreement is 1 with imperfect observed agreement")]
    KappaUndefined,
    #[error("io error on {path}: {source}")]
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

pub type Result<T> = std::result::Result<T, Error>;
