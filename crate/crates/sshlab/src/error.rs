//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SshError {
    #[error("invalid Hamiltonian spec: {0}")]
    InvalidSpec(String),

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("eigensolver failed to converge")]
    EigenFailure,

    #[error("Hamiltonian lacks chiral symmetry (diagonal-block residual {0:.3e})")]
    NotChiral(f64),

    #[error("h(k) singular at k = {k}: gap closed (condition estimate {cond:.3e})")]
    GapClosed { k: f64, cond: f64 },

    #[error("dataset policy violation: {0}")]
    Policy(String),

    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("training diverged: non-finite loss at epoch {0}")]
    Diverged(usize),

    #[error("layer tag not present in architecture: {0}")]
    NoSuchLayer(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("paired diagrams disagree: {0}")]
    PairingMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SshError {
    /// Stable machine-parsable error class, used by the CLI's one-line
    /// failure output.
    pub fn class(&self) -> &'static str {
        match self {
            Self::InvalidSpec(_) => "invalid-spec",
            Self::NotSymmetric(_) => "not-symmetric",
            Self::EigenFailure => "eigen-failure",
            Self::NotChiral(_) => "not-chiral",
            Self::GapClosed { .. } => "gap-closed",
            Self::Policy(_) => "policy",
            Self::PixelRange(_) => "pixel-range",
            Self::Shape(_) => "shape",
            Self::Format(_) => "format",
            Self::Checksum { .. } => "checksum",
            Self::Diverged(_) => "diverged",
            Self::NoSuchLayer(_) => "no-such-layer",
            Self::Degenerate(_) => "degenerate",
            Self::PairingMismatch(_) => "pairing-mismatch",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, SshError>;
