//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid temperature: {0}")]
    InvalidTemperature(f64),

    #[error("degenerate zero vector in row {0}")]
    DegenerateZeroVector(usize),

    #[error("degenerate feature in row {0}")]
    DegenerateFeature(usize),

    #[error("noise value {0} outside (0,1)")]
    InvalidNoise(f64),

    #[error("empty class {0}")]
    EmptyClass(u16),

    #[error("degenerate centroid for class {0}")]
    DegenerateCentroid(u16),

    #[error("negative loss weight {0}")]
    NegativeLossWeight(f64),

    #[error("invalid label {label}: expected 1..={classes}")]
    InvalidLabel { label: u16, classes: usize },

    #[error("class {class} has {available} samples, need more than {shots}")]
    InsufficientSamples {
        class: u16,
        available: usize,
        shots: usize,
    },

    #[error("infeasible separation: could not place {placed}/{wanted} class means at pairwise angle >= {min_angle} within {attempts} attempts")]
    InfeasibleSeparation {
        placed: usize,
        wanted: usize,
        min_angle: f64,
        attempts: usize,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("version mismatch: file has {0}, expected {1}")]
    VersionMismatch(u16, u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("label out of range at row {row}")]
    LabelOutOfRange { row: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}: total loss {total} (initial {initial})")]
    Diverged {
        epoch: usize,
        step: usize,
        total: f64,
        initial: f64,
    },

    #[error("rank-deficient input: {0}")]
    RankDeficient(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
