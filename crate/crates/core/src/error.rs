//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point sits behind (or on) the camera plane and cannot be projected.
    #[error("non-positive camera-space depth {depth:.3e}")]
    NonPositiveDepth { depth: f64 },

    #[error("pixel ({x:.2}, {y:.2}) outside image bounds {width}x{height}")]
    PixelOutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("invalid ray bounds: t_n = {t_near}, t_f = {t_far}")]
    InvalidRayBounds { t_near: f64, t_far: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    /// Proxy coverage mask came out empty: the model projects fully off-screen.
    #[error("empty proxy coverage in frame {frame}")]
    EmptyCoverage { frame: usize },

    #[error("optimization diverged at iteration {iteration}: energy = {energy}")]
    Diverged { iteration: usize, energy: f64 },

    /// The deformation Jacobian collapsed the viewing direction.
    #[error("degenerate deformation Jacobian: |J v| = {norm:.3e}")]
    DegenerateJacobian { norm: f64 },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("empty point set in {what}")]
    EmptySet { what: &'static str },

    #[error("degenerate point configuration: {reason}")]
    DegenerateConfiguration { reason: &'static str },

    #[error("non-finite loss at epoch {epoch}: {diagnostic}")]
    NonFiniteLoss { epoch: usize, diagnostic: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid dataset manifest: {0}")]
    ManifestInvalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code classification for the CLI: 1 = input/validation, 2 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonPositiveDepth { .. }
            | Error::PixelOutOfBounds { .. }
            | Error::InvalidRayBounds { .. }
            | Error::DimensionMismatch { .. }
            | Error::ConfigMismatch { .. }
            | Error::ManifestInvalid(_)
            | Error::EmptyMask
            | Error::EmptySet { .. } => 1,
            _ => 2,
        }
    }
}
