use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("input too short: {frames} frames, need at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("target of length {target} (with {repeats} adjacent repeats) cannot be aligned to {frames} frames")]
    UnalignableTarget {
        target: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adaptation error: {0}")]
    Adaptation(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("corpus error for utterance `{id}`: {reason}")]
    Utterance { id: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
