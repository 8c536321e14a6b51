use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation parameter outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an operation precondition (empty input, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} out of vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("load error in {record}: {reason}")]
    Load { record: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFiniteLoss { step: usize, epoch: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::OutOfVocabulary { .. } => "out_of_vocabulary",
            Error::MissingParam(_) => "missing_param",
            Error::Generation(_) => "generation",
            Error::Load { .. } => "load",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Context { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
