//! Hybrid prototypes and the multi-level feature pyramid.

use serde::{Deserialize, Serialize};

use crate::episode::SupportPair;
use crate::error::{Error, Result};
use crate::p2b::{p2b_align, BlockParams, PadMode, PositionEmbedding};
use crate::p2p::{p2p_align, AlignedPrototype, AttentionOptions, Projection};
use crate::tensor::{chw, Tensor};

/// Top-k schedule used at full scale: 60, 20, 5 and 3 blocks for levels 1-4.
pub const FULL_SCALE_TOPK: [usize; 4] = [60, 20, 5, 3];

/// Fraction of blocks kept per level at desk scale (`ceil(0.2 · N_l)`).
pub const DESK_SCALE_TOPK_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    #[default]
    Add,
    Multiply,
    /// Channel concatenation, giving 2C channels.
    Concat,
}

pub fn hybrid_combine(
    p2p: &AlignedPrototype,
    p2b: &AlignedPrototype,
    mode: CombineMode,
) -> Result<AlignedPrototype> {
    if p2p.shape() != p2b.shape() {
        return Err(Error::shape("hybrid_combine", p2p.shape(), p2b.shape()));
    }
    let values = match mode {
        CombineMode::Add => p2p.values.add(&p2b.values)?,
        CombineMode::Multiply => p2p.values.mul(&p2b.values)?,
        CombineMode::Concat => Tensor::concat_leading(&[&p2p.values, &p2b.values])?,
    };
    AlignedPrototype::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopkSchedule {
    /// Explicit k per level.
    Absolute(Vec<usize>),
    /// `k_l = ceil(fraction · N_l)`.
    Fraction(f64),
}

impl Default for TopkSchedule {
    fn default() -> Self {
        TopkSchedule::Fraction(DESK_SCALE_TOPK_FRACTION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub height: usize,
    pub width: usize,
    pub block_size: usize,
}

impl LevelSpec {
    pub fn num_blocks(&self) -> usize {
        self.height.div_ceil(self.block_size) * self.width.div_ceil(self.block_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub levels: Vec<LevelSpec>,
    pub topk: TopkSchedule,
    pub combine_mode: CombineMode,
}

impl PyramidConfig {
    /// `levels` levels starting at `height`×`width`, halving each step, all
    /// with the same block size.
    pub fn halving(
        height: usize,
        width: usize,
        levels: usize,
        block_size: usize,
        topk: TopkSchedule,
        combine_mode: CombineMode,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        let mut specs = Vec::with_capacity(levels);
        let (mut h, mut w) = (height, width);
        for l in 0..levels {
            if l > 0 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "level {l}: cannot halve a {h}×{w} map"
                    )));
                }
                h /= 2;
                w /= 2;
            }
            specs.push(LevelSpec {
                height: h,
                width: w,
                block_size,
            });
        }
        let cfg = Self {
            levels: specs,
            topk,
            combine_mode,
        };
        cfg.topk_per_level()?;
        Ok(cfg)
    }

    /// Resolves the schedule into one k per level, enforcing that it has one
    /// entry per level, never grows with depth and never exceeds the block
    /// count of its level.
    pub fn topk_per_level(&self) -> Result<Vec<usize>> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        for (l, spec) in self.levels.iter().enumerate() {
            if spec.block_size == 0 || spec.height == 0 || spec.width == 0 {
                return Err(Error::Config(format!("level {l} has a zero dimension")));
            }
        }
        let ks: Vec<usize> = match &self.topk {
            TopkSchedule::Absolute(ks) => {
                if ks.len() != self.levels.len() {
                    return Err(Error::Config(format!(
                        "top-k schedule has {} entries for {} levels",
                        ks.len(),
                        self.levels.len()
                    )));
                }
                ks.clone()
            }
            TopkSchedule::Fraction(f) => {
                if !(*f > 0.0 && *f <= 1.0) {
                    return Err(Error::Config(format!("top-k fraction {f} outside (0, 1]")));
                }
                self.levels
                    .iter()
                    .map(|s| (f * s.num_blocks() as f64).ceil() as usize)
                    .collect()
            }
        };
        for (l, (k, spec)) in ks.iter().zip(&self.levels).enumerate() {
            if *k > spec.num_blocks() {
                return Err(Error::Config(format!(
                    "level {l}: k = {k} exceeds its {} blocks",
                    spec.num_blocks()
                )));
            }
        }
        if let Some(l) = ks.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "top-k schedule {ks:?} grows from level {l} to level {}",
                l + 1
            )));
        }
        Ok(ks)
    }
}

/// 2×2 average pooling of a C×H×W tensor (even H, W).
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    pool2(t, |v| v.iter().sum::<f32>() * 0.25)
}

/// 2×2 max pooling of a C×H×W tensor (even H, W).
pub fn max_pool2(t: &Tensor) -> Result<Tensor> {
    pool2(t, |v| v.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

fn pool2(t: &Tensor, reduce: impl Fn([f32; 4]) -> f32) -> Result<Tensor> {
    let (c, h, w) = chw(t, "pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("cannot 2×2-pool a {h}×{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = t.data();
    Tensor::from_fn([c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), i / ow % oh, i % ow);
        let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * x + dx];
        reduce([at(0, 0), at(0, 1), at(1, 0), at(1, 1)])
    })
}

fn pool_to(t: &Tensor, height: usize, width: usize, pool: fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut cur = t.clone();
    loop {
        let (_, h, w) = chw(&cur, "downsample")?;
        if (h, w) == (height, width) {
            return Ok(cur);
        }
        if h < height || w < width || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "{:?} cannot be halved down to {height}×{width}",
                t.shape()
            )));
        }
        cur = pool(&cur)?;
    }
}

/// Repeated 2×2 average pooling down to `height`×`width`.
pub fn downsample_features(f: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    pool_to(f, height, width, avg_pool2)
}

/// Repeated 2×2 max pooling of an H×W mask; the result stays binary.
pub fn downsample_mask(mask: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = crate::tensor::hw(mask, "downsample_mask")?;
    let pooled = pool_to(&mask.reshape([1, h, w])?, height, width, max_pool2)?;
    pooled.into_reshape([height, width])
}

/// Which alignment paths feed the hybrid prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridOptions {
    pub use_p2p: bool,
    pub use_p2b: bool,
    pub attention: AttentionOptions,
    pub pad: PadMode,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            use_p2p: true,
            use_p2b: true,
            attention: AttentionOptions::default(),
            pad: PadMode::Reject,
        }
    }
}

/// Per-level hybrid prototypes for one query/support pair. Level `l` uses
/// `projections[l]` and `embeddings[l]`.
pub fn pyramid_align(
    query: &Tensor,
    support: &SupportPair,
    cfg: &PyramidConfig,
    projections: &[Projection],
    embeddings: &[PositionEmbedding],
    opts: HybridOptions,
) -> Result<Vec<AlignedPrototype>> {
    let ks = cfg.topk_per_level()?;
    let levels = cfg.levels.len();
    if projections.len() != levels || embeddings.len() != levels {
        return Err(Error::Config(format!(
            "{levels} levels but {} projections and {} position embeddings",
            projections.len(),
            embeddings.len()
        )));
    }
    let (c, _, _) = chw(query, "pyramid query")?;
    cfg.levels
        .iter()
        .zip(ks)
        .zip(projections.iter().zip(embeddings))
        .map(|((spec, k), (proj, pe))| {
            let (h, w) = (spec.height, spec.width);
            let q = downsample_features(query, h, w)?;
            let s = downsample_features(&support.features, h, w)?;
            let m = downsample_mask(&support.mask, h, w)?;
            let p2p = if opts.use_p2p {
                p2p_align(&q, &s, &m, proj, opts.attention)?
            } else {
                AlignedPrototype::zeros(c, h, w)?
            };
            let p2b = if opts.use_p2b {
                let params = BlockParams {
                    block_size: spec.block_size,
                    top_k: k,
                    pad: opts.pad,
                };
                p2b_align(&q, &s, &m, proj, pe, params, opts.attention)?
            } else {
                AlignedPrototype::zeros(c, h, w)?
            };
            hybrid_combine(&p2p, &p2b, cfg.combine_mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn proto(shape: [usize; 3], seed: u64) -> AlignedPrototype {
        AlignedPrototype::new(random(shape, seed)).unwrap()
    }

    #[test]
    fn combine_identities() {
        let a = proto([3, 4, 4], 1);
        let zeros = AlignedPrototype::zeros(3, 4, 4).unwrap();
        assert_eq!(hybrid_combine(&a, &zeros, CombineMode::Add).unwrap(), a);
        let ones = AlignedPrototype::new(Tensor::ones([3, 4, 4]).unwrap()).unwrap();
        assert_eq!(hybrid_combine(&a, &ones, CombineMode::Multiply).unwrap(), a);
        let cat = hybrid_combine(&a, &ones, CombineMode::Concat).unwrap();
        assert_eq!(cat.shape(), &[6, 4, 4]);
        assert_eq!(cat.values.slice_leading(0, 3).unwrap(), a.values);
    }

    #[test]
    fn combine_add_matches_scalar_loop() {
        let a = proto([3, 5, 2], 2);
        let b = proto([3, 5, 2], 3);
        let sum = hybrid_combine(&a, &b, CombineMode::Add).unwrap();
        for i in 0..30 {
            assert_eq!(sum.values.data()[i].to_bits(), (a.values.data()[i] + b.values.data()[i]).to_bits());
        }
        assert!(hybrid_combine(&a, &proto([3, 2, 5], 4), CombineMode::Add).is_err());
    }

    #[test]
    fn full_scale_schedule() {
        // 4 levels of 60×60 .. 8×8 blocks with m = 1
        let levels = [(60, 60), (30, 30), (15, 15), (8, 8)]
            .map(|(h, w)| LevelSpec { height: h, width: w, block_size: 1 })
            .to_vec();
        let cfg = PyramidConfig {
            levels: levels.clone(),
            topk: TopkSchedule::Absolute(FULL_SCALE_TOPK.to_vec()),
            combine_mode: CombineMode::Add,
        };
        assert_eq!(cfg.topk_per_level().unwrap(), vec![60, 20, 5, 3]);

        let mut tiny = levels;
        tiny[3] = LevelSpec { height: 1, width: 2, block_size: 1 };
        let bad = PyramidConfig { levels: tiny, ..cfg.clone() };
        assert!(matches!(bad.topk_per_level(), Err(Error::Config(_))));

        let growing = PyramidConfig {
            topk: TopkSchedule::Absolute(vec![3, 5, 20, 60]),
            ..cfg.clone()
        };
        assert!(matches!(growing.topk_per_level(), Err(Error::Config(_))));
        let short = PyramidConfig {
            topk: TopkSchedule::Absolute(vec![60, 20]),
            ..cfg
        };
        assert!(matches!(short.topk_per_level(), Err(Error::Config(_))));
    }

    #[test]
    fn fraction_schedule() {
        let cfg = PyramidConfig::halving(32, 32, 3, 2, TopkSchedule::Fraction(0.2), CombineMode::Add).unwrap();
        // N = 256, 64, 16
        assert_eq!(cfg.topk_per_level().unwrap(), vec![52, 13, 4]);
        assert!(PyramidConfig::halving(6, 6, 3, 1, TopkSchedule::default(), CombineMode::Add).is_err());
    }

    #[test]
    fn mask_downsampling_stays_binary() {
        let mask = Tensor::from_fn([8, 8], |i| (i % 5 == 0) as u8 as f32).unwrap();
        let d = downsample_mask(&mask, 2, 2).unwrap();
        assert!(d.is_binary());
        assert_eq!(d.shape(), &[2, 2]);
        let single = Tensor::from_fn([4, 4], |i| (i == 5) as u8 as f32).unwrap();
        assert_eq!(downsample_mask(&single, 2, 2).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn avg_pool_values() {
        let t = Tensor::from_fn([1, 2, 4], |i| i as f32).unwrap();
        assert_eq!(avg_pool2(&t).unwrap().data(), &[2.5, 4.5]);
        assert!(downsample_features(&t, 1, 3).is_err());
    }

    #[test]
    fn single_level_equals_direct_calls() {
        let q = random([4, 8, 8], 1);
        let s = random([4, 8, 8], 2);
        let mask = Tensor::from_fn([8, 8], |i| ((i / 8) < 5 && (i % 8) > 2) as u8 as f32).unwrap();
        let support = SupportPair::new(s.clone(), mask.clone()).unwrap();
        let cfg = PyramidConfig::halving(8, 8, 1, 2, TopkSchedule::Absolute(vec![3]), CombineMode::Add).unwrap();
        let proj = Projection::seeded(4, 9).unwrap();
        let pe = PositionEmbedding::seeded(8, 8, 3).unwrap();
        let out = pyramid_align(&q, &support, &cfg, std::slice::from_ref(&proj), std::slice::from_ref(&pe), HybridOptions::default()).unwrap();
        let p2p = p2p_align(&q, &s, &mask, &proj, Default::default()).unwrap();
        let p2b = p2b_align(&q, &s, &mask, &proj, &pe, BlockParams::new(2, 3), Default::default()).unwrap();
        let direct = hybrid_combine(&p2p, &p2b, CombineMode::Add).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], direct);
    }

    #[test]
    fn level_count_mismatch() {
        let q = random([2, 4, 4], 1);
        let support = SupportPair::new(q.clone(), Tensor::ones([4, 4]).unwrap()).unwrap();
        let cfg = PyramidConfig::halving(4, 4, 2, 1, TopkSchedule::default(), CombineMode::Add).unwrap();
        let proj = Projection::identity(2).unwrap();
        let pe = PositionEmbedding::zeros(4, 4).unwrap();
        let err = pyramid_align(&q, &support, &cfg, &[proj], &[pe], HybridOptions::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
