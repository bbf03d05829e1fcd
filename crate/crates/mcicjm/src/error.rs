use thiserror::Error;

/// Errors surfaced by model construction, evaluation, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data { message: String, line: Option<usize> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("integrand not finite at t = {node}")]
    NonFiniteIntegrand { node: f64 },

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data { message: msg.into(), line: None }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Data { message: msg.into(), line: Some(line) }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
