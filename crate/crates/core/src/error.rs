use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample {index} at {point:?} lies outside the grid box [-{half}, {half})^m")]
    OutsideGrid {
        index: usize,
        point: Vec<f64>,
        half: f64,
    },

    #[error("grid has {count} points, exceeding the cap of {cap} points")]
    GridTooLarge { count: u128, cap: u64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("iterate diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("constant {name} is unavailable: {reason}")]
    UnavailableConstant { name: &'static str, reason: String },

    #[error("cannot select {step}: missing external constant(s) {missing}")]
    MissingExternal { step: String, missing: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
