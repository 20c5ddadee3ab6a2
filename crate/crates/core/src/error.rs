use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("input {h}x{w} is not divisible by {factor}; pad the image to a multiple of {factor} first")]
    NotDivisible { h: usize, w: usize, factor: usize },

    #[error("parameter `{layer}` is missing")]
    MissingParam { layer: String },

    #[error("parameter `{layer}` has shape {found}, expected {expected}")]
    ParamShape { layer: String, expected: Shape, found: Shape },

    #[error("causality violation: requested slice {requested} but only {available} earlier slices are known")]
    Causality { requested: usize, available: usize },

    #[error("{0}")]
    NonDifferentiable(String),

    #[error("symbol {symbol} at position {position} is outside its cdf (alphabet size {alphabet})")]
    SymbolRange { position: usize, symbol: usize, alphabet: usize },

    #[error("invalid probability table: {0}")]
    Pmf(String),

    #[error("payload truncated at byte offset {offset}")]
    Truncated { offset: usize },

    #[error("corrupt payload at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("{layer}: {reason}")]
    Layer { layer: String, reason: String },

    #[error("non-finite loss at step {step}: total={total} mse={mse} bpp_y={bpp_y} bpp_z={bpp_z}")]
    NonFiniteLoss { step: usize, total: f64, mse: f64, bpp_y: f64, bpp_z: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn layer(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Layer { layer: layer.into(), reason: reason.into() }
    }

    /// Whether the error comes from user data rather than a programming or
    /// usage mistake. The CLI maps these to exit code 2.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Invalid(_))
    }
}
