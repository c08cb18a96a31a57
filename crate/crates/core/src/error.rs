use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("variable is not a parameter registered on this tape")]
    NotOnTape,

    #[error("empty sequence")]
    EmptySequence,

    #[error("empty batch")]
    EmptyBatch,

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("speaker id {id} out of range for table of {count}")]
    UnknownSpeaker { id: usize, count: usize },

    #[error("invalid gate config: {0}")]
    GateConfig(String),

    #[error("uniform sample {0} outside the open interval (0, 1)")]
    SamplerContract(f64),

    #[error("gate polarization is undefined for an empty gate set")]
    EmptyGateSet,

    #[error("no gate sample for dimension `{0}`")]
    MissingSample(String),

    #[error("prune plan: {0}")]
    Plan(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("no stage records found in {0}")]
    NoRecords(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
