use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt tensor file: {0}")]
    Corruption(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("unresolved reference: {0}")]
    Reference(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("colorizer fit diverged at iteration {iteration} (trace of {} losses)", trace.len())]
    FitDivergence { iteration: usize, trace: Vec<f64> },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("prototype store is empty")]
    EmptyStore,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
