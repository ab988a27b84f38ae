//! Dense row-major tensor storage.
//!
//! Model state is `f32`; the finite-difference harness instantiates the same
//! generic kernels at `f64` so that central differences stay sharp. Tensors
//! are immutable once an op has produced them and are cheap to clone only by
//! cloning the data (no refcounting; desk-scale sizes make copies cheap
//! enough and keep the aliasing story trivial).

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type for tensor kernels. `f32` everywhere except inside the
/// gradient checker, which runs the same code at `f64`.
pub trait Element:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor = TensorBase<f32>;

impl<T: Element> TensorBase<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("data length {} for shape {:?}", numel, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(TensorBase { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        TensorBase {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        TensorBase { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape.to_vec(), data).expect("from_vec: shape/data length mismatch")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("shape {:?} = {} elements", shape, numel),
            ));
        }
        Ok(TensorBase {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> TensorBase<U> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_lossy())).collect(),
        }
    }

    /// Dims as (N, C, H, W); errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape("dims4", "rank-4 tensor", format!("{:?}", other))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            other => Err(Error::shape("dims3", "rank-3 tensor", format!("{:?}", other))),
        }
    }
}

/// Integer mask tensor (class ids per pixel). Kept separate from the float
/// tensor type so class ids never round-trip through floats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "IntTensor::new",
                format!("data length {}", numel),
                format!("{}", data.len()),
            ));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        IntTensor {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

/// Deterministic pairwise (recursive halving) summation. Fixed reduction
/// order regardless of caller, error O(log n) instead of O(n).
pub fn pairwise_sum<T: Element>(xs: &[T]) -> T {
    if xs.len() <= 8 {
        let mut acc = T::zero();
        for &x in xs {
            acc = acc + x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// splitmix64: cheap stable mixer for deriving per-purpose RNG seeds from a
/// single user seed. Stable across platforms and releases.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix_seed(base ^ mix_seed(tag))
}
