//! Dense row-major tensors.
//!
//! Every value in the pipeline is a [`Tensor`]: an explicit shape plus a flat
//! row-major buffer. Operations are pure and never broadcast implicitly; the
//! only broadcasting helpers are [`masked_product`] and [`add_spatial`].

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar types a tensor can hold. `f32` is the working precision, `f64` is
/// used for oracle runs.
pub trait Element: Float + Default + fmt::Debug + Send + Sync + 'static {
    /// Element-type tag used by the JCAT file format.
    const DTYPE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Validation("tensor rank must be at least 1".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Validation(format!(
            "dimension {axis} of shape {shape:?} is zero"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Validation(format!("shape {shape:?} overflows")))
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Dimension `axis`, or an index error.
    pub fn dim(&self, axis: usize) -> Result<usize> {
        self.shape.get(axis).copied().ok_or(Error::Index {
            axis,
            rank: self.rank(),
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&x| x == T::zero() || x == T::one())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Element at a multi-index. Panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Validation(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.as_matrix("transpose")?;
        let mut data = vec![T::zero(); self.numel()];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new([cols, rows], data)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = rhs.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let len = self.dim(axis)?;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(data[idx(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    data[idx(j)] = data[idx(j)] / total;
                }
            }
        }
        Self::new(self.shape.clone(), data)
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Self> {
        let lead = self.shape[0];
        if start >= end || end > lead {
            return Err(Error::Argument(format!(
                "slice {start}..{end} out of range for leading dimension {lead}"
            )));
        }
        let stride = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat_leading(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let mut lead = 0;
        let mut data = Vec::new();
        for part in parts {
            if part.shape[1..] != first.shape[1..] {
                return Err(Error::shape("concat", &first.shape, &part.shape));
            }
            lead += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(shape, data)
    }
}

/// `out += a (m×k) · b (k×n)`, row-major, i-k-j order so the inner loop is a
/// contiguous axpy.
pub(crate) fn matmul_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// Hadamard product of every channel of `features` (C×H×W) with a binary
/// mask (H×W).
pub fn masked_product<T: Element>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(features, "masked_product")?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("masked_product", features.shape(), mask.shape()));
    }
    if !mask.is_binary() {
        return Err(Error::Validation("mask must be binary {0,1}".into()));
    }
    let plane = h * w;
    let data = (0..c * plane)
        .map(|i| features.data[i] * mask.data[i % plane])
        .collect();
    Tensor::new([c, h, w], data)
}

/// Adds an H×W map to every channel of a C×H×W tensor.
pub fn add_spatial<T: Element>(features: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(features, "add_spatial")?;
    if map.shape() != [h, w] {
        return Err(Error::shape("add_spatial", features.shape(), map.shape()));
    }
    let plane = h * w;
    let data = (0..c * plane)
        .map(|i| features.data[i] + map.data[i % plane])
        .collect();
    Tensor::new([c, h, w], data)
}

/// Unpacks a rank-3 shape as (channels, height, width).
pub fn chw<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Validation(format!(
            "{op} expects a C×H×W tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Unpacks a rank-2 shape as (height, width).
pub fn hw<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [h, w] => Ok((h, w)),
        _ => Err(Error::Validation(format!(
            "{op} expects an H×W map, got {:?}",
            t.shape()
        ))),
    }
}

/// C×H×W → (H·W)×C token matrix, tokens in row-major spatial order.
pub fn to_tokens<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(t, "to_tokens")?;
    t.reshape([c, h * w])?.transpose()
}

/// (H·W)×C token matrix → C×H×W.
pub fn from_tokens<T: Element>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = tokens.as_matrix("from_tokens")?;
    if n != h * w {
        return Err(Error::shape("from_tokens", tokens.shape(), &[h, w]));
    }
    tokens.transpose()?.into_reshape([c, h, w])
}

/// Largest absolute difference divided by the largest reference magnitude.
/// Elementwise ratios blow up near zero, so comparisons across the crate use
/// this max-norm relative error. An all-zero reference yields the absolute
/// difference.
pub fn max_rel_diff<T: Element>(actual: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    if actual.shape() != reference.shape() {
        return Err(Error::shape("max_rel_diff", actual.shape(), reference.shape()));
    }
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (&a, &r) in actual.data().iter().zip(reference.data()) {
        diff = diff.max((a.to_f64() - r.to_f64()).abs());
        scale = scale.max(r.to_f64().abs());
    }
    Ok(if scale > 0.0 { diff / scale } else { diff })
}
