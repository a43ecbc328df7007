//! Single-shot box detector with scale-adaptive anchors.
//!
//! The detector predicts one scale coefficient per feature-map cell and uses
//! it twice: anchor boxes at that cell grow or shrink with the coefficient,
//! and the detection head samples its inputs through an anchor convolution
//! whose receptive field dilates with the same coefficient. Both uses carry
//! hand-derived gradients, so the scale map is learned end to end without
//! any direct supervision.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); training
//! normally runs in `f32` while gradient checking runs in `f64`.

pub mod anchorconv;
pub mod config;
pub mod evalmetrics;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod synthdata;
pub mod tensor;

use std::fmt;

/// Floating-point element type for all tensors and geometry.
///
/// Implemented for `f32` and `f64`. The precision tag and the little-endian
/// codec back the binary tensor-dump format shared by checkpoints.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Bytes per element, used as the precision tag in dumps (4 or 8).
    const PRECISION_TAG: u8;

    /// Lossy conversion from an `f64` literal or intermediate.
    #[inline]
    fn of(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("literal converts to scalar")
    }

    /// Widening conversion for reporting and metrics.
    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION_TAG: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION_TAG: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("scale coefficient must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("degenerate box: width and height must be positive")]
    DegenerateBox,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("config error in {file} line {line}: {msg}")]
    Config {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: String,
        offset: usize,
        msg: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at iteration {iteration} on scene {scene}: {msg}")]
    NanAbort {
        iteration: u64,
        scene: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Concrete aliases for the two supported precisions.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
