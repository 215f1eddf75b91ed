use thiserror::Error;

/// Errors raised across the simulation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numerical failure in {module}: {detail}")]
    Numerical { module: &'static str, detail: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("net integration diverged at t = {time:.6} s (|s| = {norm:.3e})")]
    Diverged { time: f64, norm: f64 },

    #[error("non-monotone time: {previous} s followed by {current} s")]
    NonMonotoneTime { previous: f64, current: f64 },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("run aborted at tick {tick} in {module}: {source}")]
    Aborted {
        tick: u64,
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite3(v: &nalgebra::Vector3<f64>, what: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} is not finite: {v:?}")))
    }
}
