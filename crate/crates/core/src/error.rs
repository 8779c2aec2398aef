use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample: {0}")]
    EmptySample(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown entity: {0}")]
    UnknownEntity(String),
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid label value {0}")]
    InvalidLabel(u8),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("candidate count must be at least 1")]
    InvalidK,
    #[error("reference set is empty")]
    EmptyReference,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("insufficient world: {0}")]
    InsufficientWorld(String),
    #[error("unresolved input: {0}")]
    UnresolvedInput(String),
    #[error("case {0} is not awaiting human adjudication")]
    CaseNotAwaiting(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("policy failure: {0}")]
    PolicyFailure(String),
    #[error("tool unavailable: {0}")]
    ToolUnavailable(String),
    #[error("annotator unavailable: {0}")]
    AnnotatorUnavailable(String),
    #[error("stage `{stage}` failed: {reason}")]
    StageFailed { stage: &'static str, reason: String },
    #[error("corrupt record file {path}: {reason}")]
    CorruptRecord { path: String, reason: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
