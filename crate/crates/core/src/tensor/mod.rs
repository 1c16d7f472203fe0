//! Rank-4 float tensors (batch, height, width, channels) and the small
//! reverse-mode engine built on top of them.

mod adam;
pub mod checkpoint;
mod gemm;
mod graph;
mod layer;
pub(crate) mod ops;
mod params;

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use graph::{Activation, Gradients, Graph, ResidualVars, Var};
pub use layer::{LayerKind, LayerSpec, Norm};
pub use params::{Param, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::memprof::{self, MemTracker};

/// Tensor extent in NHWC order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims4 {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::InvalidDims(format!("{self:?} has a zero extent")));
        }
        Ok(())
    }
}

impl fmt::Debug for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// Float storage whose lifetime is reported to the memory tracker.
pub struct Buffer {
    data: Vec<f32>,
    tracker: Option<Arc<MemTracker>>,
}

impl Buffer {
    pub fn from_vec(data: Vec<f32>) -> Self {
        let tracker = memprof::register_alloc(data.len() * std::mem::size_of::<f32>());
        Self { data, tracker }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Give up the storage; the bytes are released from tracking.
    pub fn into_vec(mut self) -> Vec<f32> {
        let data = std::mem::take(&mut self.data);
        memprof::register_free(data.len() * std::mem::size_of::<f32>(), self.tracker.as_ref());
        self.tracker = None;
        std::mem::forget(self);
        data
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        memprof::register_free(self.bytes(), self.tracker.as_ref());
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Self::from_vec(self.data.clone())
    }
}

impl Deref for Buffer {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.data
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer").field("len", &self.data.len()).finish()
    }
}

/// Dense NHWC tensor with an optional gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Tensor4 {
    dims: Dims4,
    data: Buffer,
    grad: Option<Buffer>,
}

impl Tensor4 {
    pub fn from_vec(dims: Dims4, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "{dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data: Buffer::from_vec(data),
            grad: None,
        })
    }

    pub(crate) fn from_buffer(dims: Dims4, data: Buffer) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "{dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data, grad: None })
    }

    /// Panics on a zero extent; use [`Tensor4::from_vec`] for fallible construction.
    pub fn zeros(dims: Dims4) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims4, value: f32) -> Self {
        dims.validate().expect("tensor dims must be positive");
        Self {
            dims,
            data: Buffer::from_vec(vec![value; dims.len()]),
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::filled(Dims4::scalar(), value)
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: Dims4, std: f32, rng: &mut R) -> Self {
        dims.validate().expect("tensor dims must be positive");
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let data = (0..dims.len()).map(|_| normal.sample(rng)).collect();
        Self {
            dims,
            data: Buffer::from_vec(data),
            grad: None,
        }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(dims: Dims4, lo: f32, hi: f32, rng: &mut R) -> Self {
        dims.validate().expect("tensor dims must be positive");
        let data = (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            dims,
            data: Buffer::from_vec(data),
            grad: None,
        }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data.into_vec()
    }

    /// Bytes held by data and gradient.
    pub fn bytes(&self) -> usize {
        self.data.bytes() + self.grad.as_ref().map_or(0, Buffer::bytes)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Tensor4) -> Result<()> {
        if grad.dims != self.dims {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                expected: self.dims,
                actual: grad.dims,
            });
        }
        self.grad = Some(grad.data);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        let d = self.dims;
        self.data[((n * d.h + y) * d.w + x) * d.c + c]
    }

    /// Same values, fresh tracked allocation, no gradient.
    pub fn detached(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.clone(),
            grad: None,
        }
    }

    /// Element `index` of the batch as a 1-sample tensor.
    pub fn sample(&self, index: usize) -> Result<Self> {
        if index >= self.dims.n {
            return Err(Error::InvalidArgument(format!(
                "sample {index} out of range for batch {}",
                self.dims.n
            )));
        }
        let per = self.dims.len() / self.dims.n;
        let dims = Dims4::new(1, self.dims.h, self.dims.w, self.dims.c);
        Self::from_vec(dims, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Concatenate along the batch axis.
    pub fn stack(parts: &[Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut n = 0;
        for p in parts {
            let d = p.dims;
            if (d.h, d.w, d.c) != (first.dims.h, first.dims.w, first.dims.c) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: first.dims,
                    actual: d,
                });
            }
            n += d.n;
            data.extend_from_slice(p.data());
        }
        Self::from_vec(Dims4::new(n, first.dims.h, first.dims.w, first.dims.c), data)
    }
}
