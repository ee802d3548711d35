//! End-to-end episode inference: pyramid alignment, the class-agnostic map,
//! aggregation, per-level decoding and multi-shot fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, decode_logits, multishot_fuse, AggregateMode, DecodeParams, FusedPrediction, Prediction};
use crate::ckmm::{build_bank_for_classes, probability_map, BankInstance, BasePrototypeBank, ProbabilityMap};
use crate::episode::{generate_episode, EpisodeTask, SupportPair, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{fold_report, EpisodeOutcome, EvalReport};
use crate::p2b::{PadMode, PositionEmbedding, PositionMode};
use crate::p2p::{AttentionOptions, Projection, ProjectionMode};
use crate::pyramid::{downsample_features, pyramid_align, CombineMode, HybridOptions, PyramidConfig, TopkSchedule};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Components that can be switched off, mirroring the usual ablation rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub p2p: bool,
    pub p2b: bool,
    pub ckmm: bool,
}

impl Ablation {
    /// Parses a comma-separated list such as `p2b,ckmm`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut out = Self::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "p2p" => out.p2p = true,
                "p2b" => out.p2b = true,
                "ckmm" => out.ckmm = true,
                other => return Err(Error::Config(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub projection: ProjectionMode,
    pub position: PositionMode,
    pub block_size: usize,
    /// Pyramid depth; each level halves the previous one.
    pub levels: usize,
    pub topk: TopkSchedule,
    pub combine_mode: CombineMode,
    pub aggregate_mode: AggregateMode,
    pub decode: DecodeParams,
    /// Cosine instead of raw dot product in the class-agnostic map.
    pub normalize_map: bool,
    pub exclude_masked_tokens: bool,
    pub pad: PadMode,
    pub ablate: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionMode::Identity,
            position: PositionMode::Zeros,
            block_size: 2,
            levels: 1,
            topk: TopkSchedule::default(),
            combine_mode: CombineMode::default(),
            aggregate_mode: AggregateMode::default(),
            decode: DecodeParams::default(),
            normalize_map: false,
            exclude_masked_tokens: false,
            pad: PadMode::default(),
            ablate: Ablation::default(),
        }
    }
}

/// Pyramid geometry plus the per-level projections and position embeddings
/// for one image size. Seeded modes use `derive_seed(seed, level)` per level.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub pyramid: PyramidConfig,
    projections: Vec<Projection>,
    embeddings: Vec<PositionEmbedding>,
    channels: usize,
}

fn per_level_projection(mode: ProjectionMode, level: usize) -> ProjectionMode {
    match mode {
        ProjectionMode::Identity => ProjectionMode::Identity,
        ProjectionMode::SeededRandom { seed } => ProjectionMode::SeededRandom {
            seed: derive_seed(seed, level as u64),
        },
    }
}

fn per_level_position(mode: PositionMode, level: usize) -> PositionMode {
    match mode {
        PositionMode::Zeros => PositionMode::Zeros,
        PositionMode::SeededRandom { seed } => PositionMode::SeededRandom {
            seed: derive_seed(seed, level as u64),
        },
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, channels: usize, height: usize, width: usize) -> Result<Self> {
        let pyramid = PyramidConfig::halving(
            height,
            width,
            config.levels,
            config.block_size,
            config.topk.clone(),
            config.combine_mode,
        )?;
        let mut projections = Vec::with_capacity(config.levels);
        let mut embeddings = Vec::with_capacity(config.levels);
        for (l, spec) in pyramid.levels.iter().enumerate() {
            projections.push(Projection::from_mode(channels, per_level_projection(config.projection, l))?);
            embeddings.push(PositionEmbedding::from_mode(
                spec.height,
                spec.width,
                per_level_position(config.position, l),
            )?);
        }
        Ok(Self {
            config,
            pyramid,
            projections,
            embeddings,
            channels,
        })
    }

    fn hybrid_options(&self) -> HybridOptions {
        HybridOptions {
            use_p2p: !self.config.ablate.p2p,
            use_p2b: !self.config.ablate.p2b,
            attention: AttentionOptions {
                exclude_masked_tokens: self.config.exclude_masked_tokens,
            },
            pad: self.config.pad,
        }
    }

    /// Class-agnostic map at full resolution; zero when ablated or when no
    /// bank is available.
    pub fn agnostic_map(&self, bank: Option<&BasePrototypeBank>, query: &Tensor) -> Result<ProbabilityMap> {
        let (h, w) = (self.pyramid.levels[0].height, self.pyramid.levels[0].width);
        match bank {
            Some(bank) if !self.config.ablate.ckmm => probability_map(bank, query, self.config.normalize_map),
            _ => ProbabilityMap::zeros(h, w),
        }
    }

    /// Full-resolution logits for one support: each level is decoded on its
    /// own grid, upsampled by nearest neighbour, and the levels averaged.
    pub fn shot_logits(&self, query: &Tensor, support: &SupportPair, map: &ProbabilityMap) -> Result<Tensor> {
        let protos = pyramid_align(
            query,
            support,
            &self.pyramid,
            &self.projections,
            &self.embeddings,
            self.hybrid_options(),
        )?;
        let (h, w) = (self.pyramid.levels[0].height, self.pyramid.levels[0].width);
        let mut sum = vec![0f64; h * w];
        for (spec, proto) in self.pyramid.levels.iter().zip(&protos) {
            let (lh, lw) = (spec.height, spec.width);
            let q = downsample_features(query, lh, lw)?;
            let m = if (lh, lw) == (h, w) { map.clone() } else { map.downsample(lh, lw)? };
            let guidance = aggregate(proto, &m, self.config.aggregate_mode)?;
            let logits = decode_logits(&guidance, &q, self.config.decode.ag_weight)?;
            let up = upsample_nearest(&logits, h, w)?;
            sum.iter_mut().zip(up.data()).for_each(|(s, &x)| *s += x as f64);
        }
        let levels = protos.len() as f64;
        Tensor::new([1, h, w], sum.into_iter().map(|s| (s / levels) as f32).collect())
    }

    pub fn run_episode(&self, task: &EpisodeTask, bank: Option<&BasePrototypeBank>) -> Result<FusedPrediction> {
        task.validate()?;
        let (c, h, w) = task.dims();
        let top = &self.pyramid.levels[0];
        if (c, h, w) != (self.channels, top.height, top.width) {
            return Err(Error::shape(
                "run_episode",
                &[self.channels, top.height, top.width],
                &[c, h, w],
            ));
        }
        let map = self.agnostic_map(bank, &task.query_features)?;
        let shots = task
            .supports
            .iter()
            .map(|s| {
                let logits = self.shot_logits(&task.query_features, s, &map)?;
                Prediction::from_logits(logits, self.config.decode.threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        multishot_fuse(&shots)
    }

    /// Runs every episode in parallel; results keep the input order.
    pub fn run_episodes(&self, tasks: &[EpisodeTask], bank: Option<&BasePrototypeBank>) -> Result<Vec<FusedPrediction>> {
        tasks.par_iter().map(|t| self.run_episode(t, bank)).collect()
    }
}

/// Nearest-neighbour upsampling of a 1×h×w map to 1×height×width.
pub fn upsample_nearest(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::Validation(format!("expected 1×H×W, got {other:?}"))),
    };
    if !height.is_multiple_of(h) || !width.is_multiple_of(w) {
        return Err(Error::Config(format!("cannot upsample {h}×{w} to {height}×{width}")));
    }
    let (fy, fx) = (height / h, width / w);
    let d = t.data();
    Tensor::from_fn([1, height, width], |i| {
        let (y, x) = (i / width, i % width);
        d[(y / fy) * w + x / fx]
    })
}

/// Fold report over predictions aligned with their episodes.
pub fn evaluate(tasks: &[EpisodeTask], predictions: &[FusedPrediction]) -> Result<EvalReport> {
    if tasks.len() != predictions.len() {
        return Err(Error::Argument(format!(
            "{} episodes but {} predictions",
            tasks.len(),
            predictions.len()
        )));
    }
    let outcomes: Vec<EpisodeOutcome<'_>> = tasks
        .iter()
        .zip(predictions)
        .map(|(t, p)| EpisodeOutcome {
            pred: &p.prediction.mask,
            gt: &t.query_gt,
            class_id: t.class_id,
        })
        .collect();
    fold_report(&outcomes)
}

/// Episode `index` of a synthetic set: seed `derive_seed(cfg.seed, index)`,
/// class `index mod num_classes`.
pub fn synthetic_episode(cfg: &SyntheticConfig, index: usize) -> Result<EpisodeTask> {
    let episode_cfg = SyntheticConfig {
        seed: derive_seed(cfg.seed, index as u64),
        ..cfg.clone()
    };
    generate_episode(&episode_cfg, index % cfg.num_classes())
}

pub fn synthetic_episodes(cfg: &SyntheticConfig, count: usize) -> Result<Vec<EpisodeTask>> {
    cfg.validate()?;
    (0..count).into_par_iter().map(|i| synthetic_episode(cfg, i)).collect()
}

/// Salt separating the bank's random stream from the episode streams.
pub const BANK_STREAM: u64 = 0xB4_4E_4B;

/// Bank over every base class of `cfg`, built from the supports of
/// `instances_per_class` generated episodes per class, drawn without latent
/// objects from the seed `derive_seed(cfg.seed ^ BANK_STREAM, ·)`.
pub fn synthetic_bank(cfg: &SyntheticConfig, instances_per_class: usize) -> Result<BasePrototypeBank> {
    cfg.validate()?;
    if instances_per_class == 0 {
        return Err(Error::Config("bank needs at least one instance per class".into()));
    }
    let bank_cfg = SyntheticConfig {
        latent_object_rate: 0.0,
        ..cfg.clone()
    };
    let mut tasks = Vec::with_capacity(cfg.num_base_classes * instances_per_class);
    for class in 0..cfg.num_base_classes {
        for i in 0..instances_per_class {
            let seed = derive_seed(cfg.seed ^ BANK_STREAM, (class * instances_per_class + i) as u64);
            tasks.push(generate_episode(&SyntheticConfig { seed, ..bank_cfg.clone() }, class)?);
        }
    }
    let instances: Vec<BankInstance<'_>> = tasks
        .iter()
        .flat_map(|t| {
            t.supports.iter().map(|s| BankInstance {
                features: &s.features,
                mask: &s.mask,
                class_id: t.class_id,
            })
        })
        .collect();
    let classes: Vec<usize> = (0..cfg.num_base_classes).collect();
    build_bank_for_classes(&classes, &instances)
}
