//! K-shot episodes, the synthetic episode generator and episode directories.
//!
//! # Synthetic feature fields
//!
//! Classes `0..num_base_classes` are base classes, the next
//! `num_novel_classes` ids are held out. Class `c` is embedded as the one-hot
//! vector `e_c` in the first `num_base_classes + num_novel_classes` channels;
//! remaining channels only ever carry noise. Object pixels hold
//! `e_c + sigma * n`, background pixels `sigma * n`, with `n` standard normal.
//!
//! Every image draws from one ChaCha8 stream seeded with `cfg.seed`, in this
//! order:
//!
//! 1. each support `0..K`: its rectangle, then its C×H×W noise (row-major);
//! 2. the query rectangle;
//! 3. one `f64` in `[0, 1)`; below `latent_object_rate` a latent object is
//!    added: its class index, then up to [`LATENT_PLACEMENT_TRIES`]
//!    rectangles until one is disjoint from the query object (the last try
//!    is kept otherwise, minus the query object's pixels);
//! 4. the query C×H×W noise.
//!
//! A rectangle draws its height, width, top row and left column, in that
//! order, each uniform over its inclusive range. Noise is drawn even when
//! `sigma == 0` so geometry never depends on the noise level.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jcat;
use crate::rng::{self, Rng};
use crate::tensor::{chw, Tensor};

pub const LATENT_PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportPair {
    pub features: Tensor,
    pub mask: Tensor,
}

impl SupportPair {
    pub fn new(features: Tensor, mask: Tensor) -> Result<Self> {
        let (_, h, w) = chw(&features, "support features")?;
        if mask.shape() != [h, w] {
            return Err(Error::shape("support pair", features.shape(), mask.shape()));
        }
        if !mask.is_binary() {
            return Err(Error::Validation("support mask must be binary".into()));
        }
        Ok(Self { features, mask })
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.height && x >= self.x && x < self.x + self.width
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.y < other.y + other.height
            && other.y < self.y + self.height
            && self.x < other.x + other.width
            && other.x < self.x + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// An off-class object present in the query but labelled background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentObject {
    pub class_id: usize,
    pub region: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTask {
    pub supports: Vec<SupportPair>,
    pub query_features: Tensor,
    pub query_gt: Tensor,
    pub class_id: usize,
    pub latent: Option<LatentObject>,
}

impl EpisodeTask {
    pub fn new(
        supports: Vec<SupportPair>,
        query_features: Tensor,
        query_gt: Tensor,
        class_id: usize,
        latent: Option<LatentObject>,
    ) -> Result<Self> {
        let task = Self {
            supports,
            query_features,
            query_gt,
            class_id,
            latent,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::Validation("episode needs at least one support".into()));
        }
        let shape = self.query_features.shape();
        chw(&self.query_features, "query features")?;
        if self.query_gt.shape() != &shape[1..] {
            return Err(Error::shape("episode query", shape, self.query_gt.shape()));
        }
        if !self.query_gt.is_binary() {
            return Err(Error::Validation("query ground truth must be binary".into()));
        }
        for s in &self.supports {
            if s.features.shape() != shape {
                return Err(Error::shape("episode support", shape, s.features.shape()));
            }
            if s.mask.shape() != &shape[1..] || !s.mask.is_binary() {
                return Err(Error::Validation("support mask must be a binary H×W map".into()));
            }
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.query_features.shape();
        (s[0], s[1], s[2])
    }

    /// Pixels of the latent object that are not query foreground.
    pub fn latent_mask(&self) -> Option<Tensor> {
        let latent = self.latent?;
        let (_, h, w) = self.dims();
        let gt = self.query_gt.data();
        Some(
            Tensor::from_fn([h, w], |i| {
                let on = latent.region.contains(i / w, i % w) && gt[i] == 0.0;
                on as u8 as f32
            })
            .expect("nonzero dims"),
        )
    }
}

fn default_novel() -> usize {
    1
}
fn default_min_frac() -> f64 {
    0.25
}
fn default_max_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shots: usize,
    pub num_base_classes: usize,
    #[serde(default = "default_novel")]
    pub num_novel_classes: usize,
    pub noise_sigma: f64,
    pub latent_object_rate: f64,
    pub seed: u64,
    /// Object side lengths are uniform in `[min_frac, max_frac]` of the
    /// image side.
    #[serde(default = "default_min_frac")]
    pub object_min_frac: f64,
    #[serde(default = "default_max_frac")]
    pub object_max_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 32,
            width: 32,
            shots: 1,
            num_base_classes: 4,
            num_novel_classes: 1,
            noise_sigma: 0.05,
            latent_object_rate: 0.0,
            seed: 0,
            object_min_frac: 0.25,
            object_max_frac: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn num_classes(&self) -> usize {
        self.num_base_classes + self.num_novel_classes
    }

    pub fn is_base_class(&self, class: usize) -> bool {
        class < self.num_base_classes
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_base_classes == 0 {
            return cfg_err("num_base_classes must be at least 1".into());
        }
        if self.channels < self.num_classes() {
            return cfg_err(format!(
                "{} channels cannot hold {} orthogonal class embeddings \
                 ({} base + {} novel)",
                self.channels,
                self.num_classes(),
                self.num_base_classes,
                self.num_novel_classes
            ));
        }
        if self.height == 0 || self.width == 0 || self.shots == 0 {
            return cfg_err("height, width and shots must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return cfg_err(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.latent_object_rate) {
            return cfg_err(format!(
                "latent_object_rate {} outside [0, 1]",
                self.latent_object_rate
            ));
        }
        if !(self.object_min_frac > 0.0 && self.object_min_frac <= self.object_max_frac) {
            return cfg_err(format!(
                "object size fractions [{}, {}] are not an increasing positive range",
                self.object_min_frac, self.object_max_frac
            ));
        }
        for (name, dim) in [("height", self.height), ("width", self.width)] {
            let (lo, hi) = self.side_range(dim);
            if hi > dim || lo > hi {
                return cfg_err(format!(
                    "objects of {lo}..={hi} pixels do not fit an image {name} of {dim}"
                ));
            }
        }
        Ok(())
    }

    fn side_range(&self, dim: usize) -> (usize, usize) {
        let lo = ((dim as f64 * self.object_min_frac).floor() as usize).max(1);
        let hi = ((dim as f64 * self.object_max_frac).floor() as usize).max(lo);
        (lo, hi)
    }

    fn sample_rect(&self, rng: &mut Rng) -> Rect {
        let (lo_h, hi_h) = self.side_range(self.height);
        let (lo_w, hi_w) = self.side_range(self.width);
        let height = rng.random_range(lo_h..=hi_h);
        let width = rng.random_range(lo_w..=hi_w);
        let y = rng.random_range(0..=self.height - height);
        let x = rng.random_range(0..=self.width - width);
        Rect {
            y,
            x,
            height,
            width,
        }
    }

    fn noise(&self, rng: &mut Rng) -> Vec<f32> {
        let sigma = self.noise_sigma as f32;
        (0..self.channels * self.height * self.width)
            .map(|_| sigma * rng.sample::<f32, _>(StandardNormal))
            .collect()
    }

    fn paint(&self, data: &mut [f32], class: usize, on: impl Fn(usize, usize) -> bool) {
        let plane = self.height * self.width;
        let channel = &mut data[class * plane..(class + 1) * plane];
        for (i, v) in channel.iter_mut().enumerate() {
            if on(i / self.width, i % self.width) {
                *v += 1.0;
            }
        }
    }

    fn rect_mask(&self, rect: &Rect) -> Tensor {
        let w = self.width;
        Tensor::from_fn([self.height, w], |i| rect.contains(i / w, i % w) as u8 as f32)
            .expect("nonzero dims")
    }

    fn latent_candidates(&self, class: usize) -> Vec<usize> {
        let base: Vec<usize> = (0..self.num_base_classes).filter(|&c| c != class).collect();
        if !base.is_empty() {
            return base;
        }
        (0..self.num_classes()).filter(|&c| c != class).collect()
    }
}

/// Generates one synthetic episode for `class`.
pub fn generate_episode(cfg: &SyntheticConfig, class: usize) -> Result<EpisodeTask> {
    cfg.validate()?;
    if class >= cfg.num_classes() {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            cfg.num_classes()
        )));
    }
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = rng::rng(cfg.seed);

    let mut supports = Vec::with_capacity(cfg.shots);
    for _ in 0..cfg.shots {
        let rect = cfg.sample_rect(&mut rng);
        let mut data = cfg.noise(&mut rng);
        cfg.paint(&mut data, class, |y, x| rect.contains(y, x));
        supports.push(SupportPair {
            features: Tensor::new([c, h, w], data)?,
            mask: cfg.rect_mask(&rect),
        });
    }

    let target = cfg.sample_rect(&mut rng);
    let mut latent = None;
    if rng.random::<f64>() < cfg.latent_object_rate {
        let candidates = cfg.latent_candidates(class);
        if candidates.is_empty() {
            return Err(Error::Config(
                "a latent object needs at least two classes".into(),
            ));
        }
        let latent_class = candidates[rng.random_range(0..candidates.len())];
        let mut region = cfg.sample_rect(&mut rng);
        for _ in 1..LATENT_PLACEMENT_TRIES {
            if !region.overlaps(&target) {
                break;
            }
            region = cfg.sample_rect(&mut rng);
        }
        latent = Some(LatentObject {
            class_id: latent_class,
            region,
        });
    }

    let mut data = cfg.noise(&mut rng);
    cfg.paint(&mut data, class, |y, x| target.contains(y, x));
    if let Some(obj) = latent {
        cfg.paint(&mut data, obj.class_id, |y, x| {
            obj.region.contains(y, x) && !target.contains(y, x)
        });
    }

    EpisodeTask::new(
        supports,
        Tensor::new([c, h, w], data)?,
        cfg.rect_mask(&target),
        class,
        latent,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportEntry {
    features: String,
    mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    class_id: usize,
    shots: usize,
    supports: Vec<SupportEntry>,
    query_features: String,
    query_gt: String,
    latent_object: bool,
    latent: Option<LatentObject>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `task` into `dir` (created if missing).
pub fn save_episode(task: &EpisodeTask, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut supports = Vec::with_capacity(task.shots());
    for (i, s) in task.supports.iter().enumerate() {
        let entry = SupportEntry {
            features: format!("support_{i}_feat.jcat"),
            mask: format!("support_{i}_mask.jcat"),
        };
        jcat::save(&s.features, dir.join(&entry.features))?;
        jcat::save(&s.mask, dir.join(&entry.mask))?;
        supports.push(entry);
    }
    let manifest = Manifest {
        class_id: task.class_id,
        shots: task.shots(),
        supports,
        query_features: "query_feat.jcat".into(),
        query_gt: "query_gt.jcat".into(),
        latent_object: task.latent.is_some(),
        latent: task.latent,
    };
    jcat::save(&task.query_features, dir.join(&manifest.query_features))?;
    jcat::save(&task.query_gt, dir.join(&manifest.query_gt))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

pub fn load_episode(dir: impl AsRef<Path>) -> Result<EpisodeTask> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.shots != manifest.supports.len() {
        return Err(Error::Format(format!(
            "manifest lists {} supports but declares {} shots",
            manifest.supports.len(),
            manifest.shots
        )));
    }
    if manifest.latent_object != manifest.latent.is_some() {
        return Err(Error::Format("latent_object flag disagrees with latent entry".into()));
    }
    let supports = manifest
        .supports
        .iter()
        .map(|e| {
            SupportPair::new(
                jcat::load_f32(dir.join(&e.features))?,
                jcat::load_f32(dir.join(&e.mask))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    EpisodeTask::new(
        supports,
        jcat::load_f32(dir.join(&manifest.query_features))?,
        jcat::load_f32(dir.join(&manifest.query_gt))?,
        manifest.class_id,
        manifest.latent,
    )
}

/// Summary flags from an episode manifest without loading tensors.
pub fn manifest_has_latent(dir: impl AsRef<Path>) -> Result<bool> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.as_ref().join(MANIFEST))?)?;
    Ok(manifest.latent_object)
}
