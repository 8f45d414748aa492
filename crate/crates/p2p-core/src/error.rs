//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate ring: {0}")]
    DegenerateRing(String),

    #[error("insufficient primitives: need at least 3, got {0}")]
    InsufficientPrimitives(usize),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    GenerationFailure { attempts: usize, reason: String },

    #[error("target construction failed: {0}")]
    TargetConstruction(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("ingestion error: missing image for id(s) {0:?}")]
    MissingImage(Vec<u64>),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("order label {label} out of range (n_order = {n_order})")]
    Label { label: usize, n_order: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("resume error: {0}")]
    Resume(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
