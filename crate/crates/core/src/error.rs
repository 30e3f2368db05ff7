// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the pipeline.

use thiserror::Error;

/// Errors raised by model construction, analysis and intervention.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, scene or knob configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Sequence does not fit the model context.
    #[error("capacity error: sequence length {len} exceeds max_seq {max}")]
    Capacity { len: usize, max: usize },

    /// A non-finite activation or input was encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Argument outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Hand-built fixture data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Distribution admits no meaningful split (e.g. all values in one bin).
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// A ratio with a zero denominator.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    /// Profile lacks the fields required by the requested operation.
    #[error("profile incomplete: {0}")]
    ProfileIncomplete(String),

    /// Invalid intervention specification.
    #[error("intervention spec error: {0}")]
    Spec(String),

    /// Zero-ablation removed every key from an attention row.
    #[error("degenerate attention row: layer {layer}, head {head}, query {query}")]
    DegenerateRow {
        layer: usize,
        head: usize,
        query: usize,
    },

    /// Inputs that cannot be paired (e.g. mismatched scene ids).
    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
