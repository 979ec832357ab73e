use std::fmt;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Autodiff graph misuse (e.g. backward run twice).
    Graph(String),
    /// Dataset, hypothesis file or checkpoint content problem.
    Data(String),
    /// Training aborted (e.g. NaN loss).
    Train(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Graph(m) => write!(f, "graph error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn train(msg: impl Into<String>) -> Self {
        Error::Train(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
