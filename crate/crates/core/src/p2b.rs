//! Point-to-block alignment.
//!
//! The masked support (plus its position embedding) is cut into
//! non-overlapping m×m tiles. Tiles are ranked by how much of them the
//! support mask covers, the top k are kept, and the query attends to each
//! kept tile with the same decomposed linear attention as the point-to-point
//! path, the softmax running over the m² positions of that tile. The result
//! is the mean over the kept tiles.
//!
//! Tile `i` sits at tile-row `i / (W/m)` and tile-column `i % (W/m)`; pixels
//! inside a tile are row-major.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::p2p::{apply_summary, key_value_summary, token_softmax, AlignedPrototype, AttentionOptions, Projection};
use crate::rng;
use crate::tensor::{add_spatial, chw, hw, masked_product, matmul_into, to_tokens, Tensor};

/// Scale of seeded-random position embeddings.
pub const POSITION_INIT_STD: f32 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PositionMode {
    #[default]
    Zeros,
    SeededRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding {
    pub p_q: Tensor,
    pub p_s: Tensor,
    pub mode: PositionMode,
}

impl PositionEmbedding {
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            p_q: Tensor::zeros([h, w])?,
            p_s: Tensor::zeros([h, w])?,
            mode: PositionMode::Zeros,
        })
    }

    /// Gaussian embeddings with standard deviation [`POSITION_INIT_STD`],
    /// query map first.
    pub fn seeded(h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::rng(seed);
        let mut draw = || {
            Tensor::from_fn([h, w], |_| POSITION_INIT_STD * rng.sample::<f32, _>(StandardNormal))
        };
        Ok(Self {
            p_q: draw()?,
            p_s: draw()?,
            mode: PositionMode::SeededRandom { seed },
        })
    }

    pub fn from_mode(h: usize, w: usize, mode: PositionMode) -> Result<Self> {
        match mode {
            PositionMode::Zeros => Self::zeros(h, w),
            PositionMode::SeededRandom { seed } => Self::seeded(h, w, seed),
        }
    }
}

/// Adds a position map to every channel.
pub fn add_position(f: &Tensor, p: &Tensor) -> Result<Tensor> {
    add_spatial(f, p)
}

fn tiles(h: usize, w: usize, m: usize) -> Result<(usize, usize)> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "block size {m} does not divide the {h}×{w} feature map"
        )));
    }
    Ok((h / m, w / m))
}

/// Flat pixel index of position `p` inside tile `i`.
fn pixel_of(i: usize, p: usize, m: usize, tiles_x: usize, w: usize) -> usize {
    let (r, c) = (i / tiles_x, i % tiles_x);
    let (dy, dx) = (p / m, p % m);
    (r * m + dy) * w + c * m + dx
}

/// C×H×W → C×N×m² with N = (H/m)·(W/m).
pub fn extract_blocks(f: &Tensor, m: usize) -> Result<Tensor> {
    let (c, h, w) = chw(f, "extract_blocks")?;
    let (ty, tx) = tiles(h, w, m)?;
    let n = ty * tx;
    let mm = m * m;
    let plane = h * w;
    let src = f.data();
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for i in 0..n {
            for p in 0..mm {
                out.push(src[ch * plane + pixel_of(i, p, m, tx, w)]);
            }
        }
    }
    Tensor::new([c, n, mm], out)
}

/// Inverse of [`extract_blocks`].
pub fn reassemble_blocks(blocks: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, n, mm) = chw(blocks, "reassemble_blocks")?;
    let m = (mm as f64).sqrt().round() as usize;
    if m * m != mm {
        return Err(Error::Validation(format!("block length {mm} is not a square")));
    }
    let (ty, tx) = tiles(h, w, m)?;
    if ty * tx != n {
        return Err(Error::shape("reassemble_blocks", blocks.shape(), &[h, w]));
    }
    let plane = h * w;
    let mut out = vec![0f32; c * plane];
    let src = blocks.data();
    for ch in 0..c {
        for i in 0..n {
            for p in 0..mm {
                out[ch * plane + pixel_of(i, p, m, tx, w)] = src[(ch * n + i) * mm + p];
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Fraction of each tile covered by the mask.
pub fn block_importance(mask: &Tensor, m: usize) -> Result<Tensor> {
    let (h, w) = hw(mask, "block_importance")?;
    if !mask.is_binary() {
        return Err(Error::Validation("mask must be binary {0,1}".into()));
    }
    let (ty, tx) = tiles(h, w, m)?;
    let mm = m * m;
    let data = mask.data();
    Tensor::from_fn([ty * tx], |i| {
        let covered: f32 = (0..mm).map(|p| data[pixel_of(i, p, m, tx, w)]).sum();
        covered / mm as f32
    })
}

#[derive(PartialEq)]
struct Ranked {
    importance: f32,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    // "better" = larger importance, then smaller index
    fn cmp(&self, other: &Self) -> Ordering {
        self.importance
            .total_cmp(&other.importance)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Indices of the `k` most important blocks, most important first, ties
/// broken by ascending index. `k` is clamped to the number of blocks.
pub fn select_topk(importances: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(importances.len());
    if k == 0 {
        return Vec::new();
    }
    // min-heap of the best k seen so far
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (index, &importance) in importances.iter().enumerate() {
        let item = Ranked { importance, index };
        if heap.len() < k {
            heap.push(Reverse(item));
        } else if heap.peek().is_some_and(|worst| item > worst.0) {
            heap.pop();
            heap.push(Reverse(item));
        }
    }
    let mut best: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
    best.sort_unstable_by(|a, b| b.cmp(a));
    best.into_iter().map(|r| r.index).collect()
}

/// Handling of feature maps whose sides are not multiples of the block size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    Reject,
    /// Pad bottom/right with zero features and zero mask.
    ZeroPad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    pub block_size: usize,
    pub blocks: Tensor,
    pub importances: Tensor,
    pub selected: Vec<usize>,
}

impl BlockSet {
    pub fn build(features: &Tensor, mask: &Tensor, m: usize, k: usize) -> Result<Self> {
        let blocks = extract_blocks(features, m)?;
        let importances = block_importance(mask, m)?;
        let selected = select_topk(importances.data(), k);
        Ok(Self {
            block_size: m,
            blocks,
            importances,
            selected,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.importances.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub block_size: usize,
    pub top_k: usize,
    pub pad: PadMode,
}

impl BlockParams {
    pub fn new(block_size: usize, top_k: usize) -> Self {
        Self {
            block_size,
            top_k,
            pad: PadMode::Reject,
        }
    }
}

fn pad_to(t: &Tensor, m: usize) -> Result<Tensor> {
    let (c, h, w) = chw(t, "pad")?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    Tensor::from_fn([c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        if y < h && x < w {
            src[(ch * h + y) * w + x]
        } else {
            0.0
        }
    })
}

/// Sparse alignment of every query position against the top-k support
/// blocks.
pub fn p2b_align(
    q_feat: &Tensor,
    s_feat: &Tensor,
    s_mask: &Tensor,
    proj: &Projection,
    pe: &PositionEmbedding,
    params: BlockParams,
    opts: AttentionOptions,
) -> Result<AlignedPrototype> {
    let (c, h, w) = chw(q_feat, "p2b query")?;
    if s_feat.shape() != q_feat.shape() {
        return Err(Error::shape("p2b_align", q_feat.shape(), s_feat.shape()));
    }
    if hw(s_mask, "p2b mask")? != (h, w) {
        return Err(Error::shape("p2b_align", q_feat.shape(), s_mask.shape()));
    }
    if proj.channels() != c {
        return Err(Error::shape("p2b_align", q_feat.shape(), proj.w_q.shape()));
    }
    let m = params.block_size;
    if m == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    if params.pad == PadMode::Reject {
        tiles(h, w, m)?;
    }

    let query = add_position(q_feat, &pe.p_q)?;
    let support = add_position(&masked_product(s_feat, s_mask)?, &pe.p_s)?;
    if params.top_k == 0 {
        return AlignedPrototype::zeros(c, h, w);
    }

    let (support, mask) = match params.pad {
        PadMode::Reject => (support, s_mask.clone()),
        PadMode::ZeroPad => {
            let padded_mask = pad_to(&s_mask.reshape([1, h, w])?, m)?;
            let dims = padded_mask.shape().to_vec();
            (pad_to(&support, m)?, padded_mask.into_reshape([dims[1], dims[2]])?)
        }
    };

    let set = BlockSet::build(&support, &mask, m, params.top_k)?;
    let n = set.num_blocks();
    let mm = m * m;

    // keys/values of every selected block, summed in ascending block order
    let mut order = set.selected.clone();
    order.sort_unstable();
    let mut summary = vec![0f32; c * c];
    let mask_blocks = extract_blocks(&mask.reshape([1, mask.shape()[0], mask.shape()[1]])?, m)?;
    let mut tokens = vec![0f32; mm * c];
    for &j in &order {
        // block j as an m²×C token matrix
        for ch in 0..c {
            let src = &set.blocks.data()[(ch * n + j) * mm..(ch * n + j + 1) * mm];
            for (p, &x) in src.iter().enumerate() {
                tokens[p * c + ch] = x;
            }
        }
        let mut keys = vec![0f32; mm * c];
        let mut values = vec![0f32; mm * c];
        matmul_into(&tokens, proj.w_k.data(), &mut keys, mm, c, c);
        matmul_into(&tokens, proj.w_v.data(), &mut values, mm, c, c);
        let keep: Option<Vec<bool>> = opts
            .exclude_masked_tokens
            .then(|| mask_blocks.data()[j * mm..(j + 1) * mm].iter().map(|&b| b == 1.0).collect());
        let weights = token_softmax(&keys, mm, c, keep.as_deref());
        key_value_summary(&weights, &values, mm, c, &mut summary);
    }
    let inv_k = 1.0 / set.selected.len() as f32;
    summary.iter_mut().for_each(|x| *x *= inv_k);

    let activated = to_tokens(&query)?.matmul(&proj.w_q)?.relu();
    AlignedPrototype::new(apply_summary(&activated, &summary, h, w)?)
}
