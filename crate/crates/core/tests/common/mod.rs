//! Plain 64-bit reference arithmetic shared by the oracle tests.
#![allow(dead_code)]

use protoalign::rng::rng;
use protoalign::Tensor;
use rand::Rng as _;

pub type Mat = Vec<Vec<f64>>;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn bernoulli_mask(h: usize, w: usize, p: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new([h, w], (0..h * w).map(|_| r.random_bool(p) as u8 as f32).collect()).unwrap()
}

/// C×H×W → rows of tokens (H·W rows of C values).
pub fn tokens(f: &Tensor) -> Mat {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    (0..h * w)
        .map(|t| (0..c).map(|ch| f.data()[ch * h * w + t] as f64).collect())
        .collect()
}

pub fn matrix(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j] as f64).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| x.max(0.0)).collect()).collect()
}

/// Softmax down each column.
pub fn column_softmax(a: &Mat) -> Mat {
    let cols = a[0].len();
    let mut out = a.clone();
    for j in 0..cols {
        let max = a.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = a.iter().map(|r| (r[j] - max).exp()).sum();
        for (o, r) in out.iter_mut().zip(a) {
            o[j] = (r[j] - max).exp() / total;
        }
    }
    out
}

/// Masked support: every channel multiplied by the mask.
pub fn masked(f: &Tensor, mask: &Tensor) -> Tensor {
    let plane = mask.numel();
    Tensor::from_fn(f.shape().to_vec(), |i| f.data()[i] * mask.data()[i % plane]).unwrap()
}

/// Token rows back to channel-major order.
pub fn channel_major(rows: &Mat) -> Vec<f64> {
    let c = rows[0].len();
    (0..c).flat_map(|ch| rows.iter().map(move |r| r[ch])).collect()
}

/// max |out - reference| / max |reference|.
pub fn rel_err(out: &Tensor, reference: &[f64]) -> f64 {
    assert_eq!(out.numel(), reference.len());
    let diff = out
        .data()
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
