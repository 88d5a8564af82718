use std::io;

use thiserror::Error;

/// Errors produced by the kernquant library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("channel count {channels} is not divisible by {by}")]
    NonDivisibleChannels { channels: usize, by: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid layer shape: {0}")]
    InvalidShape(String),

    #[error("invalid representative count K={k} (must be in 1..={max})")]
    InvalidK { k: usize, max: usize },

    #[error("infeasible sparsity: alpha*c = {product} must be below N' = {nprime}")]
    InfeasibleSparsity { product: f64, nprime: usize },

    #[error("acceleration target too high: dictionary size would be {0:.3} (< 1)")]
    DictionaryTooSmall(f64),

    #[error("error curves do not overlap")]
    NonOverlappingCurves,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
