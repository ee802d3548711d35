//! Point-to-point alignment.
//!
//! The query attends to every masked support token through decomposed linear
//! attention:
//!
//! ```text
//! Q = f_q W_Q,  K = (f_s ⊙ M) W_K,  V = (f_s ⊙ M) W_V
//! P = ReLU(Q) · (softmax_tokens(K)ᵀ · V)
//! ```
//!
//! The bracketed C×C product is formed first, so the cost is O(HW·C²) and the
//! HW×HW attention map never exists. The quadratic reference paths used for
//! verification and benchmarking ([`explicit_attention_oracle`],
//! [`cosine_align`]) stream one query row at a time.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{chw, from_tokens, hw, masked_product, matmul_into, to_tokens, Tensor};

/// Stabilizer for per-channel standardization in [`nla_align`].
pub const NLA_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProjectionMode {
    #[default]
    Identity,
    SeededRandom { seed: u64 },
}

/// Fixed query/key/value projection weights (C×C each).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub mode: ProjectionMode,
}

impl Projection {
    pub fn identity(channels: usize) -> Result<Self> {
        let eye = Tensor::identity(channels)?;
        Ok(Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
            mode: ProjectionMode::Identity,
        })
    }

    /// Three independent random orthonormal matrices drawn from `seed`
    /// (Gram-Schmidt over Gaussian columns, in the order Q, K, V).
    pub fn seeded(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::rng(seed);
        let mut next = || random_orthonormal(channels, &mut rng);
        Ok(Self {
            w_q: next()?,
            w_k: next()?,
            w_v: next()?,
            mode: ProjectionMode::SeededRandom { seed },
        })
    }

    pub fn from_mode(channels: usize, mode: ProjectionMode) -> Result<Self> {
        match mode {
            ProjectionMode::Identity => Self::identity(channels),
            ProjectionMode::SeededRandom { seed } => Self::seeded(channels, seed),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }
}

fn random_orthonormal(n: usize, rng: &mut rng::Rng) -> Result<Tensor> {
    // columns, each of length n, accumulated in f64
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    Tensor::from_fn([n, n], |i| cols[i % n][i / n] as f32)
}

/// Output of an alignment: a C×H×W class-aware field.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPrototype {
    pub values: Tensor,
}

impl AlignedPrototype {
    pub fn new(values: Tensor) -> Result<Self> {
        chw(&values, "aligned prototype")?;
        if !values.all_finite() {
            return Err(Error::Invariant("aligned prototype has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            values: Tensor::zeros([c, h, w])?,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionOptions {
    /// Give masked-out support tokens zero weight in the key softmax instead
    /// of letting their (zero) keys take part.
    #[serde(default)]
    pub exclude_masked_tokens: bool,
}

/// Projected token matrices, each (H·W)×C.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

fn check_weights(f: &Tensor, proj: &Projection) -> Result<()> {
    let (c, _, _) = chw(f, "project")?;
    for w in [&proj.w_q, &proj.w_k, &proj.w_v] {
        if w.shape() != [c, c] {
            return Err(Error::shape("project", f.shape(), w.shape()));
        }
    }
    Ok(())
}

/// Flattens `f` to tokens and multiplies by each projection matrix.
pub fn project(f: &Tensor, proj: &Projection) -> Result<Projected> {
    check_weights(f, proj)?;
    let tokens = to_tokens(f)?;
    Ok(Projected {
        q: tokens.matmul(&proj.w_q)?,
        k: tokens.matmul(&proj.w_k)?,
        v: tokens.matmul(&proj.w_v)?,
    })
}

pub(crate) struct Inputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub keep: Option<Vec<bool>>,
    pub h: usize,
    pub w: usize,
}

fn check_pair(q_feat: &Tensor, s_feat: &Tensor, s_mask: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = chw(q_feat, "alignment query")?;
    if s_feat.shape() != q_feat.shape() {
        return Err(Error::shape("alignment", q_feat.shape(), s_feat.shape()));
    }
    let (mh, mw) = hw(s_mask, "alignment mask")?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape("alignment", q_feat.shape(), s_mask.shape()));
    }
    Ok((c, h, w))
}

pub(crate) fn prepare(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
    opts: AttentionOptions,
) -> Result<Inputs> {
    let (_, h, w) = check_pair(q_feat, s_feat, s_mask)?;
    check_weights(q_feat, proj)?;
    let masked = masked_product(s_feat, s_mask)?;
    let q = to_tokens(q_feat)?.matmul(&proj.w_q)?;
    let support = to_tokens(&masked)?;
    let keep = opts
        .exclude_masked_tokens
        .then(|| s_mask.data().iter().map(|&m| m == 1.0).collect());
    Ok(Inputs {
        q,
        k: support.matmul(&proj.w_k)?,
        v: support.matmul(&proj.w_v)?,
        keep,
        h,
        w,
    })
}

/// Softmax of an n×C key matrix over its token axis, separately for each
/// channel. Tokens with `keep[t] == false` get weight 0; a channel with no
/// kept tokens is all zero.
pub(crate) fn token_softmax(k: &[f32], n: usize, c: usize, keep: Option<&[bool]>) -> Vec<f32> {
    let kept = |t: usize| keep.is_none_or(|m| m[t]);
    let mut max = vec![f32::NEG_INFINITY; c];
    for t in (0..n).filter(|&t| kept(t)) {
        for (m, &x) in max.iter_mut().zip(&k[t * c..(t + 1) * c]) {
            *m = m.max(x);
        }
    }
    let mut out = vec![0f32; n * c];
    let mut total = vec![0f32; c];
    for t in (0..n).filter(|&t| kept(t)) {
        let row = &mut out[t * c..(t + 1) * c];
        for ch in 0..c {
            let e = (k[t * c + ch] - max[ch]).exp();
            row[ch] = e;
            total[ch] += e;
        }
    }
    for row in out.chunks_exact_mut(c) {
        for (x, &s) in row.iter_mut().zip(&total) {
            if s > 0.0 {
                *x /= s;
            }
        }
    }
    out
}

/// `accumulate += weightsᵀ · v`, where both are n×C: the C×C key/value
/// summary of linear attention.
pub(crate) fn key_value_summary(weights: &[f32], v: &[f32], n: usize, c: usize, acc: &mut [f32]) {
    for t in 0..n {
        let vrow = &v[t * c..(t + 1) * c];
        for (ch, &wt) in weights[t * c..(t + 1) * c].iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for (o, &x) in acc[ch * c..(ch + 1) * c].iter_mut().zip(vrow) {
                *o += wt * x;
            }
        }
    }
}

/// `activated (n×C) · summary (C×C)` reshaped back to C×H×W.
pub(crate) fn apply_summary(activated: &Tensor, summary: &[f32], h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = (activated.shape()[0], activated.shape()[1]);
    let mut out = vec![0f32; n * c];
    matmul_into(activated.data(), summary, &mut out, n, c, c);
    from_tokens(&Tensor::new([n, c], out)?, h, w)
}

fn factored(inputs: &Inputs, activated: &Tensor) -> Result<AlignedPrototype> {
    let (n, c) = (inputs.k.shape()[0], inputs.k.shape()[1]);
    let weights = token_softmax(inputs.k.data(), n, c, inputs.keep.as_deref());
    let mut summary = vec![0f32; c * c];
    key_value_summary(&weights, inputs.v.data(), n, c, &mut summary);
    AlignedPrototype::new(apply_summary(activated, &summary, inputs.h, inputs.w)?)
}

/// Decomposed linear attention of the query over the masked support.
pub fn p2p_align(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
    opts: AttentionOptions,
) -> Result<AlignedPrototype> {
    let inputs = prepare(q_feat, s_feat, s_mask, proj, opts)?;
    let activated = inputs.q.relu();
    factored(&inputs, &activated)
}

/// Same factored product, but with the query activation replaced by
/// per-channel standardization over tokens (the normalization-based
/// decoupling). Constant channels map to zero.
pub fn nla_align(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
    opts: AttentionOptions,
) -> Result<AlignedPrototype> {
    let inputs = prepare(q_feat, s_feat, s_mask, proj, opts)?;
    let activated = standardize_channels(&inputs.q)?;
    factored(&inputs, &activated)
}

fn standardize_channels(q: &Tensor) -> Result<Tensor> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let data = q.data();
    let mut out = vec![0f32; n * c];
    for ch in 0..c {
        let col = || (0..n).map(|t| data[t * c + ch] as f64);
        let first = data[ch];
        if col().all(|x| x == first as f64) {
            continue;
        }
        let mean = col().sum::<f64>() / n as f64;
        let var = col().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NLA_EPS).sqrt();
        for t in 0..n {
            out[t * c + ch] = ((data[t * c + ch] as f64 - mean) * inv) as f32;
        }
    }
    Tensor::new([n, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplicitVariant {
    /// Standard attention: row-wise softmax of `Q Kᵀ / sqrt(C)`, times V.
    Na,
    /// `(ReLU(Q) · softmax_tokens(K)ᵀ) · V` with the attention rows formed
    /// explicitly.
    Unfactored,
}

/// Quadratic-cost attention evaluated one query row at a time.
pub fn explicit_attention_oracle(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
    opts: AttentionOptions,
    variant: ExplicitVariant,
) -> Result<AlignedPrototype> {
    let inputs = prepare(q_feat, s_feat, s_mask, proj, opts)?;
    let (n, c) = (inputs.k.shape()[0], inputs.k.shape()[1]);
    let keep = inputs.keep.as_deref();
    let (queries, keys_t) = match variant {
        ExplicitVariant::Na => (inputs.q.scale(1.0 / (c as f32).sqrt()), inputs.k.transpose()?),
        ExplicitVariant::Unfactored => {
            let weights = Tensor::new([n, c], token_softmax(inputs.k.data(), n, c, keep))?;
            (inputs.q.relu(), weights.transpose()?)
        }
    };
    let nq = queries.shape()[0];
    let mut out = vec![0f32; nq * c];
    let mut row = vec![0f32; n];
    for i in 0..nq {
        row.iter_mut().for_each(|x| *x = 0.0);
        matmul_into(&queries.data()[i * c..(i + 1) * c], keys_t.data(), &mut row, 1, c, n);
        if variant == ExplicitVariant::Na {
            masked_row_softmax(&mut row, keep);
        }
        matmul_into(&row, inputs.v.data(), &mut out[i * c..(i + 1) * c], 1, n, c);
    }
    AlignedPrototype::new(from_tokens(&Tensor::new([nq, c], out)?, inputs.h, inputs.w)?)
}

fn masked_row_softmax(row: &mut [f32], keep: Option<&[bool]>) {
    let kept = |t: usize| keep.is_none_or(|m| m[t]);
    let max = (0..row.len())
        .filter(|&t| kept(t))
        .fold(f32::NEG_INFINITY, |m, t| m.max(row[t]));
    let mut total = 0f32;
    for (t, x) in row.iter_mut().enumerate() {
        *x = if kept(t) { (*x - max).exp() } else { 0.0 };
        total += *x;
    }
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    }
}

/// Cosine interaction: each query token takes the mean over foreground
/// support tokens of `cos(q_i, k_j) · v_j`.
pub fn cosine_align(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
) -> Result<AlignedPrototype> {
    let inputs = prepare(q_feat, s_feat, s_mask, proj, AttentionOptions::default())?;
    let (n, c) = (inputs.k.shape()[0], inputs.k.shape()[1]);
    let fg: Vec<usize> = (0..n).filter(|&t| s_mask.data()[t] == 1.0).collect();
    let nq = inputs.q.shape()[0];
    if fg.is_empty() {
        return AlignedPrototype::zeros(c, inputs.h, inputs.w);
    }
    let unit = |m: &[f32], t: usize| -> Vec<f32> {
        let row = &m[t * c..(t + 1) * c];
        let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter().map(|x| x / norm).collect()
        } else {
            vec![0.0; c]
        }
    };
    let nk = fg.len();
    let mut keys_t = vec![0f32; c * nk];
    let mut values = vec![0f32; nk * c];
    for (j, &t) in fg.iter().enumerate() {
        for (ch, x) in unit(inputs.k.data(), t).into_iter().enumerate() {
            keys_t[ch * nk + j] = x;
        }
        values[j * c..(j + 1) * c].copy_from_slice(&inputs.v.data()[t * c..(t + 1) * c]);
    }
    let scale = 1.0 / nk as f32;
    let mut out = vec![0f32; nq * c];
    let mut row = vec![0f32; nk];
    for i in 0..nq {
        let q = unit(inputs.q.data(), i);
        row.iter_mut().for_each(|x| *x = 0.0);
        matmul_into(&q, &keys_t, &mut row, 1, c, nk);
        row.iter_mut().for_each(|x| *x *= scale);
        matmul_into(&row, &values, &mut out[i * c..(i + 1) * c], 1, nk, c);
    }
    AlignedPrototype::new(from_tokens(&Tensor::new([nq, c], out)?, inputs.h, inputs.w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_diff;

    fn random(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = rng::rng(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn random_mask(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng::rng(seed ^ 0xABCD);
        Tensor::from_fn([h, w], |_| rng.random_bool(0.5) as u8 as f32).unwrap()
    }

    #[test]
    fn identity_projection_flattens() {
        let f = random([3, 2, 2], 1);
        let p = project(&f, &Projection::identity(3).unwrap()).unwrap();
        assert_eq!(p.q, to_tokens(&f).unwrap());
        assert_eq!(p.k, p.q);
        let zero = project(&Tensor::zeros([3, 2, 2]).unwrap(), &Projection::seeded(3, 7).unwrap()).unwrap();
        assert_eq!(zero.q.max_abs() + zero.k.max_abs() + zero.v.max_abs(), 0.0);
    }

    #[test]
    fn project_channel_mismatch() {
        let f = random([3, 2, 2], 1);
        assert!(matches!(project(&f, &Projection::identity(4).unwrap()), Err(Error::Shape { .. })));
    }

    #[test]
    fn seeded_projection_is_orthonormal_and_deterministic() {
        let p = Projection::seeded(6, 7).unwrap();
        assert_eq!(p, Projection::seeded(6, 7).unwrap());
        assert_ne!(p.w_q, p.w_k);
        for w in [&p.w_q, &p.w_k, &p.w_v] {
            let gram = w.transpose().unwrap().matmul(w).unwrap();
            let eye = Tensor::identity(6).unwrap();
            assert!(gram.sub(&eye).unwrap().max_abs() < 1e-5);
        }
    }

    #[test]
    fn zero_mask_gives_zero_output() {
        let q = random([4, 4, 4], 2);
        let s = random([4, 4, 4], 3);
        let m = Tensor::zeros([4, 4]).unwrap();
        let proj = Projection::seeded(4, 1).unwrap();
        let opts = AttentionOptions::default();
        assert_eq!(p2p_align(&q, &s, &m, &proj, opts).unwrap().values.max_abs(), 0.0);
        for variant in [ExplicitVariant::Na, ExplicitVariant::Unfactored] {
            let out = explicit_attention_oracle(&q, &s, &m, &proj, opts, variant).unwrap();
            assert_eq!(out.values.max_abs(), 0.0);
        }
        assert_eq!(cosine_align(&q, &s, &m, &proj).unwrap().values.max_abs(), 0.0);
    }

    #[test]
    fn negative_query_gives_zero_output() {
        let q = random([4, 4, 4], 2).map(|x| -x.abs() - 0.1);
        let s = random([4, 4, 4], 3);
        let m = Tensor::ones([4, 4]).unwrap();
        let out = p2p_align(&q, &s, &m, &Projection::identity(4).unwrap(), Default::default()).unwrap();
        assert_eq!(out.values.max_abs(), 0.0);
    }

    #[test]
    fn na_single_key_returns_value_row() {
        // 1×1 spatial grid: one support token, softmax over a singleton is 1
        let q = random([3, 1, 1], 4);
        let s = random([3, 1, 1], 5);
        let m = Tensor::ones([1, 1]).unwrap();
        let proj = Projection::identity(3).unwrap();
        let out = explicit_attention_oracle(&q, &s, &m, &proj, Default::default(), ExplicitVariant::Na).unwrap();
        assert_eq!(out.values, s);
    }

    #[test]
    fn na_broadcasts_single_foreground_token_when_excluding() {
        let q = random([3, 2, 2], 4);
        let s = random([3, 2, 2], 5);
        let m = Tensor::new([2, 2], vec![0., 0., 1., 0.]).unwrap();
        let proj = Projection::identity(3).unwrap();
        let opts = AttentionOptions {
            exclude_masked_tokens: true,
        };
        let out = explicit_attention_oracle(&q, &s, &m, &proj, opts, ExplicitVariant::Na).unwrap();
        for ch in 0..3 {
            for t in 0..4 {
                assert_eq!(out.values.at(&[ch, t / 2, t % 2]), s.at(&[ch, 1, 0]));
            }
        }
    }

    #[test]
    fn unfactored_matches_factored() {
        for seed in 0..20 {
            let q = random([5, 3, 4], seed);
            let s = random([5, 3, 4], seed + 100);
            let m = random_mask(3, 4, seed);
            let proj = Projection::seeded(5, seed).unwrap();
            for exclude in [false, true] {
                let opts = AttentionOptions {
                    exclude_masked_tokens: exclude,
                };
                let fast = p2p_align(&q, &s, &m, &proj, opts).unwrap();
                let slow = explicit_attention_oracle(&q, &s, &m, &proj, opts, ExplicitVariant::Unfactored).unwrap();
                assert!(max_rel_diff(&fast.values, &slow.values).unwrap() <= 1e-5);
            }
        }
    }

    #[test]
    fn cosine_identical_single_token_returns_value() {
        let s = random([4, 2, 2], 8);
        let m = Tensor::new([2, 2], vec![0., 1., 0., 0.]).unwrap();
        // every query token equals the single foreground support token
        let token: Vec<f32> = (0..4).map(|ch| s.at(&[ch, 0, 1])).collect();
        let q = Tensor::from_fn([4, 2, 2], |i| token[i / 4]).unwrap();
        let out = cosine_align(&q, &s, &m, &Projection::identity(4).unwrap()).unwrap();
        for (ch, &expected) in token.iter().enumerate() {
            for t in 0..4 {
                assert!((out.values.at(&[ch, t / 2, t % 2]) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nla_constant_query_is_zero() {
        let q = Tensor::full([4, 3, 3], 0.7).unwrap();
        let s = random([4, 3, 3], 9);
        let m = Tensor::ones([3, 3]).unwrap();
        let out = nla_align(&q, &s, &m, &Projection::identity(4).unwrap(), Default::default()).unwrap();
        assert_eq!(out.values.max_abs(), 0.0);
    }

    #[test]
    fn nla_standardizes_each_channel() {
        let q = Tensor::<f32>::from_fn([4, 2], |i| (i * i) as f32).unwrap();
        let z = standardize_channels(&q).unwrap();
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|t| z.at(&[t, ch]) as f64).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_errors_propagate() {
        let q = random([4, 4, 4], 2);
        let s = random([4, 4, 2], 3);
        let m = Tensor::ones([4, 4]).unwrap();
        let proj = Projection::identity(4).unwrap();
        assert!(p2p_align(&q, &s, &m, &proj, Default::default()).is_err());
        let bad_mask = Tensor::full([4, 4], 0.5).unwrap();
        assert!(matches!(
            p2p_align(&q, &q, &bad_mask, &proj, Default::default()),
            Err(Error::Validation(_))
        ));
    }
}
