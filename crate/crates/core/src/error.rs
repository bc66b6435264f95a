use std::path::PathBuf;

/// Errors produced across the grid, model, training and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: &'static str, detail: String },

    #[error("value out of range at {coord}: {value}")]
    ValueRange { coord: String, value: f64 },

    #[error("index {index} out of range for axis {axis} of length {len}")]
    Index {
        axis: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("sampler state became non-finite at step {step}")]
    SamplerNonFinite { step: usize },

    #[error("nothing to score: every frame is marked as given")]
    NothingToScore,

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short stable tag used in the one-line CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::ValueRange { .. } => "value_range",
            Error::Index { .. } => "index",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Precondition(_) => "precondition",
            Error::Diverged { .. } => "diverged",
            Error::SamplerNonFinite { .. } => "sampler_non_finite",
            Error::NothingToScore => "nothing_to_score",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::MissingInput(_) => "missing_input",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

