//! Minimal dense N-dimensional array.
//!
//! Row-major, contiguous, no broadcasting beyond scalars, no autodiff.
//! Every reduction runs in ascending index order so repeated runs produce
//! bit-identical results.

use std::io::{Read, Write};

use crate::{Error, Result, Scalar};

/// Magic bytes of the binary tensor dump embedded in checkpoints.
pub const TENSOR_MAGIC: &[u8; 4] = b"SADT";
/// Current dump format version.
pub const TENSOR_DUMP_VERSION: u8 = 1;

/// Dense row-major tensor of `f32` or `f64` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    let mut len = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "every extent must be at least 1".into(),
            });
        }
        len = len.checked_mul(e).ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })?;
    }
    Ok(len)
}

impl<S: Scalar> Tensor<S> {
    /// Allocates a tensor of the given shape with every element set to `fill`.
    pub fn alloc(shape: &[usize], fill: S) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::alloc(shape, S::zero())
    }

    /// Wraps an existing buffer; the length must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::LengthMismatch {
                op: "from_vec",
                left: len,
                right: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        let mut acc = 1usize;
        for (stride, &extent) in strides.iter_mut().zip(self.shape.iter()).rev() {
            *stride = acc;
            acc *= extent;
        }
        strides
    }

    /// Flat offset of a full coordinate. Panics on out-of-bounds indices.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0usize;
        for (dim, (&i, &extent)) in index.iter().zip(self.shape.iter()).enumerate() {
            assert!(i < extent, "index {i} out of bounds for dim {dim} ({extent})");
            off = off * extent + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Element-wise difference; shapes must match exactly.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Element-wise product; shapes must match exactly.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, k: S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other * k`, the accumulation primitive the
    /// optimizer and gradient buffers are built on.
    pub fn axpy(&mut self, k: S, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b * k;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: S) {
        self.data.fill(value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the given label if any element is NaN or infinite.
    pub fn ensure_finite(&self, label: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(label.to_string()))
        }
    }

    /// Serializes into the binary dump format: magic, version, precision
    /// tag, rank, little-endian `u32` extents, then raw little-endian values.
    pub fn write_dump(&self, out: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(10 + 4 * self.shape.len() + self.len() * S::PRECISION_TAG as usize);
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(TENSOR_DUMP_VERSION);
        buf.push(S::PRECISION_TAG);
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a dump written by [`Tensor::write_dump`] with the same precision.
    pub fn read_dump(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 10];
        input.read_exact(&mut head)?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(Error::Checkpoint("bad tensor magic".into()));
        }
        if head[4] != TENSOR_DUMP_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported tensor dump version {}",
                head[4]
            )));
        }
        if head[5] != S::PRECISION_TAG {
            return Err(Error::Checkpoint(format!(
                "precision mismatch: dump has {}-byte values, run expects {}-byte",
                head[5],
                S::PRECISION_TAG
            )));
        }
        let rank = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut ext = [0u8; 4];
        for _ in 0..rank {
            input.read_exact(&mut ext)?;
            shape.push(u32::from_le_bytes(ext) as usize);
        }
        let len = validate_shape(&shape)?;
        let elem = S::PRECISION_TAG as usize;
        let mut raw = vec![0u8; len * elem];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(elem).map(S::read_le).collect();
        Ok(Self { shape, data })
    }
}

/// Returns `acc + dot(kernel_row, feature_vec)` summed in ascending index
/// order. The lengths must match.
pub fn matvec_accumulate<S: Scalar>(kernel_row: &Tensor<S>, feature_vec: &Tensor<S>, acc: S) -> Result<S> {
    if kernel_row.len() != feature_vec.len() {
        return Err(Error::LengthMismatch {
            op: "matvec_accumulate",
            left: kernel_row.len(),
            right: feature_vec.len(),
        });
    }
    Ok(dot_slices(kernel_row.data(), feature_vec.data(), acc))
}

/// Slice-level dot product used by the hot convolution loops.
#[inline]
pub fn dot_slices<S: Scalar>(a: &[S], b: &[S], acc: S) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = acc;
    for (&x, &y) in a.iter().zip(b.iter()) {
        sum = sum + x * y;
    }
    sum
}
