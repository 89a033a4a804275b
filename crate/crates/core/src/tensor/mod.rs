//! Dense row-major arrays.
//!
//! [`Tensor`] is the arithmetic type every layer computes on (`f32` for
//! training and inference, `f64` for gradient-check oracles).
//! [`StoredTensor`] is the dtype-tagged storage form used by serialized
//! models, where weights may be held as `f16` or affine `i8`.

mod gemm;

pub(crate) use gemm::{gemm_acc, MatRef};

use std::fmt;

use half::f16;
use num_traits::Float;

use crate::quantize::QuantParams;
use crate::{Error, Result};

/// Floating-point element type usable in [`Tensor`] arithmetic.
pub trait Scalar: Float + Default + fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Ordered list of strictly positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one dimension"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!(
                "extent {pos} of {dims:?} is zero"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Flat row-major offset of `coords`, or `None` if out of range.
    pub fn offset(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.0.len() {
            return None;
        }
        let mut off = 0;
        for ((&c, &d), s) in coords.iter().zip(&self.0).zip(self.strides()) {
            if c >= d {
                return None;
            }
            off += c * s;
        }
        Some(off)
    }

    /// Inverse of [`Shape::offset`].
    pub fn coords(&self, mut offset: usize) -> Option<Vec<usize>> {
        if offset >= self.numel() {
            return None;
        }
        let mut out = vec![0; self.0.len()];
        for (i, s) in self.strides().into_iter().enumerate() {
            out[i] = offset / s;
            offset %= s;
        }
        Some(out)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Dense row-major array of floating-point values.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, fill: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![fill; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, coords: &[usize]) -> Option<T> {
        self.shape.offset(coords).map(|o| self.data[o])
    }

    /// Same data, new extents with equal element count.
    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Element-type conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (&[m, k], &[k2, n]) = (self.dims(), rhs.dims()) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {} and {}",
                self.shape, rhs.shape
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {} x {}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            MatRef::row_major(&self.data, k),
            MatRef::row_major(&rhs.data, n),
            &mut out,
        );
        Tensor::from_vec([m, n], out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Element type of a [`StoredTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    F16,
    I8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I8 => "i8",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F64(Vec<f64>),
    F32(Vec<f32>),
    /// Storage only; widened to f32 before any arithmetic.
    F16(Vec<f16>),
    /// Affine-quantized codes; the tensor's [`QuantParams`] map them back.
    I8(Vec<i8>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F64(v) => v.len(),
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
            Storage::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F64(_) => DType::F64,
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
            Storage::I8(_) => DType::I8,
        }
    }
}

/// A tensor as it is kept in a model file: shape, element type, and for
/// `i8` the affine parameters (present iff the dtype is `i8`).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    shape: Shape,
    storage: Storage,
    quant: Option<QuantParams>,
}

impl StoredTensor {
    pub fn new(shape: Shape, storage: Storage, quant: Option<QuantParams>) -> Result<Self> {
        if shape.numel() != storage.len() {
            return Err(Error::shape(format!(
                "shape {shape} needs {} elements, storage holds {}",
                shape.numel(),
                storage.len()
            )));
        }
        match (&storage, &quant) {
            (Storage::I8(_), None) => {
                return Err(Error::format(0, "i8 tensor without quantization parameters"))
            }
            (Storage::I8(_), Some(_)) | (_, None) => {}
            (_, Some(_)) => {
                return Err(Error::format(
                    0,
                    "quantization parameters on a non-i8 tensor",
                ))
            }
        }
        Ok(StoredTensor {
            shape,
            storage,
            quant,
        })
    }

    /// Tensor of `dims` with every element equal to `fill`. An `i8` tensor
    /// gets the identity mapping (scale 1, zero point 0) and a rounded,
    /// saturated fill code.
    pub fn create(dims: impl Into<Vec<usize>>, dtype: DType, fill: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let (storage, quant) = match dtype {
            DType::F64 => (Storage::F64(vec![fill; n]), None),
            DType::F32 => (Storage::F32(vec![fill as f32; n]), None),
            DType::F16 => (Storage::F16(vec![f16::from_f64(fill); n]), None),
            DType::I8 => {
                let q = QuantParams::identity();
                (Storage::I8(vec![q.quantize(fill as f32); n]), Some(q))
            }
        };
        Ok(StoredTensor {
            shape,
            storage,
            quant,
        })
    }

    /// Stores `t` losslessly as f32.
    pub fn from_f32(t: &Tensor<f32>) -> Self {
        StoredTensor {
            shape: t.shape().clone(),
            storage: Storage::F32(t.data().to_vec()),
            quant: None,
        }
    }

    /// Narrows `t` to IEEE binary16 (round to nearest even).
    pub fn to_f16(t: &Tensor<f32>) -> Self {
        StoredTensor {
            shape: t.shape().clone(),
            storage: Storage::F16(t.data().iter().map(|&v| f16::from_f32(v)).collect()),
            quant: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn payload_bytes(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    /// Widens or dequantizes to an f32 tensor for arithmetic.
    pub fn to_f32(&self) -> Tensor<f32> {
        let data = match &self.storage {
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Storage::I8(v) => {
                let q = self.quant.expect("i8 storage always carries qparams");
                v.iter().map(|&c| q.dequantize(c)).collect()
            }
        };
        Tensor::from_parts(self.shape.clone(), data)
    }
}
