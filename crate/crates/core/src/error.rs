use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite {term} at step {step}")]
    Diverged { step: usize, term: String },

    #[error("{}", config_message(.line, .key, .msg))]
    Config {
        line: Option<usize>,
        key: String,
        msg: String,
    },

    #[error("format error at {location}: {msg}")]
    Format { location: String, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn config_message(line: &Option<usize>, key: &str, msg: &str) -> String {
    match line {
        Some(l) => format!("line {l}: {key}: {msg}"),
        None => format!("{key}: {msg}"),
    }
}

impl Error {
    /// Stable, greppable code used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIM",
            Error::Index(_) => "E_INDEX",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Contract(_) => "E_CONTRACT",
            Error::Numeric(_) | Error::Diverged { .. } => "E_NUMERIC",
            Error::Config { .. } => "E_CONFIG",
            Error::Format { .. } => "E_FORMAT",
            Error::Usage(_) => "E_USAGE",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format_at(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            msg: msg.into(),
        }
    }
}
