use thiserror::Error;

/// Errors raised by the numerical layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("step {step} at t = {t}: dt = {dt} exceeds the CFL bound; suggested dt = {suggested_dt}")]
    Cfl {
        step: usize,
        t: f64,
        dt: f64,
        suggested_dt: f64,
    },

    #[error("non-finite state at step {step}; last good time t = {last_good_t}")]
    NonFinite { step: usize, last_good_t: f64 },

    #[error("Picard iteration diverged: successive differences {prev:.3e} -> {next:.3e} at iteration {iteration}")]
    OracleDivergence {
        iteration: usize,
        prev: f64,
        next: f64,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Horizon(String),

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
