//! Joint guidance, the parameter-free decoder and multi-shot fusion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ckmm::ProbabilityMap;
use crate::error::{Error, Result};
use crate::jcat;
use crate::p2p::AlignedPrototype;
use crate::tensor::{chw, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMode {
    #[default]
    Concat,
    Add,
    Multiply,
}

/// Class-aware field joined with the class-agnostic map.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGuidance {
    pub values: Tensor,
    pub mode: AggregateMode,
}

impl JointGuidance {
    /// Channels carrying class-aware information.
    pub fn class_aware_channels(&self) -> usize {
        match self.mode {
            AggregateMode::Concat => self.values.shape()[0] - 1,
            AggregateMode::Add | AggregateMode::Multiply => self.values.shape()[0],
        }
    }

    /// Splits a concatenated guidance back into its two inputs.
    pub fn split(&self) -> Result<(AlignedPrototype, ProbabilityMap)> {
        if self.mode != AggregateMode::Concat {
            return Err(Error::Argument("only concatenated guidance can be split".into()));
        }
        let c = self.class_aware_channels();
        Ok((
            AlignedPrototype::new(self.values.slice_leading(0, c)?)?,
            ProbabilityMap::new(self.values.slice_leading(c, c + 1)?)?,
        ))
    }
}

pub fn aggregate(p_aw: &AlignedPrototype, p_ag: &ProbabilityMap, mode: AggregateMode) -> Result<JointGuidance> {
    let (c, h, w) = chw(&p_aw.values, "aggregate")?;
    if p_ag.dims() != (h, w) {
        return Err(Error::shape("aggregate", p_aw.shape(), p_ag.values.shape()));
    }
    let map = p_ag.values.data();
    let plane = h * w;
    let values = match mode {
        AggregateMode::Concat => Tensor::concat_leading(&[&p_aw.values, &p_ag.values])?,
        AggregateMode::Add => Tensor::from_fn([c, h, w], |i| p_aw.values.data()[i] + map[i % plane])?,
        AggregateMode::Multiply => Tensor::from_fn([c, h, w], |i| p_aw.values.data()[i] * map[i % plane])?,
    };
    Ok(JointGuidance { values, mode })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    /// Foreground iff logit >= threshold.
    pub threshold: f32,
    /// Weight of the standardized class-agnostic map.
    pub ag_weight: f32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            ag_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 1×H×W.
    pub logits: Tensor,
    /// H×W binary.
    pub mask: Tensor,
    pub threshold: f32,
}

impl Prediction {
    pub fn from_logits(logits: Tensor, threshold: f32) -> Result<Self> {
        let (h, w) = match logits.shape() {
            [1, h, w] => (*h, *w),
            other => return Err(Error::Validation(format!("logits must be 1×H×W, got {other:?}"))),
        };
        let mask = Tensor::new(
            [h, w],
            logits.data().iter().map(|&x| (x >= threshold) as u8 as f32).collect(),
        )?;
        Ok(Self { logits, mask, threshold })
    }
}

/// Zero mean, unit variance over the image; constant maps become zero.
pub fn standardize(map: &Tensor) -> Tensor {
    let n = map.numel() as f64;
    let mean = map.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = map.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Tensor::zeros(map.shape().to_vec()).expect("same shape");
    }
    let inv = 1.0 / var.sqrt();
    map.map(|x| ((x as f64 - mean) * inv) as f32)
}

/// Per-pixel logits: cosine between the query feature and the class-aware
/// guidance, plus `ag_weight` times the standardized class-agnostic map when
/// the guidance is concatenated. A class-aware field with a multiple of C
/// channels is compared against the query tiled to match.
pub fn decode_logits(guidance: &JointGuidance, q_feat: &Tensor, ag_weight: f32) -> Result<Tensor> {
    let (c, h, w) = chw(q_feat, "decode")?;
    let (gc, gh, gw) = chw(&guidance.values, "decode")?;
    let aware = guidance.class_aware_channels();
    if (gh, gw) != (h, w) || aware == 0 || !aware.is_multiple_of(c) {
        return Err(Error::shape("decode", guidance.values.shape(), q_feat.shape()));
    }
    let plane = h * w;
    let g = guidance.values.data();
    let q = q_feat.data();
    let prior = match guidance.mode {
        AggregateMode::Concat => Some(standardize(&Tensor::new([plane], g[(gc - 1) * plane..].to_vec())?)),
        _ => None,
    };
    let logits = (0..plane)
        .map(|p| {
            let (mut dot, mut gg, mut qq) = (0f64, 0f64, 0f64);
            for ch in 0..aware {
                let a = g[ch * plane + p] as f64;
                let b = q[(ch % c) * plane + p] as f64;
                dot += a * b;
                gg += a * a;
                qq += b * b;
            }
            let cosine = if gg > 0.0 && qq > 0.0 {
                (dot / (gg.sqrt() * qq.sqrt())) as f32
            } else {
                0.0
            };
            cosine + prior.as_ref().map_or(0.0, |z| ag_weight * z.data()[p])
        })
        .collect();
    Tensor::new([1, h, w], logits)
}

pub fn decode(guidance: &JointGuidance, q_feat: &Tensor, params: DecodeParams) -> Result<Prediction> {
    Prediction::from_logits(decode_logits(guidance, q_feat, params.ag_weight)?, params.threshold)
}

/// Result of decision-level fusion over K shots.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    /// Logits hold each pixel's foreground vote share; threshold 0.5.
    pub prediction: Prediction,
    /// Mean of the per-shot decoder logits, for reporting.
    pub mean_logits: Tensor,
}

/// Majority vote over per-shot masks (a pixel is foreground when at least
/// half the shots say so).
pub fn multishot_fuse(predictions: &[Prediction]) -> Result<FusedPrediction> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Argument("cannot fuse an empty set of predictions".into()))?;
    for p in predictions {
        if p.mask.shape() != first.mask.shape() || p.logits.shape() != first.logits.shape() {
            return Err(Error::shape("multishot_fuse", first.mask.shape(), p.mask.shape()));
        }
    }
    let k = predictions.len();
    let n = first.mask.numel();
    let mut votes = vec![0usize; n];
    let mut logits = vec![0f64; n];
    for p in predictions {
        for i in 0..n {
            votes[i] += (p.mask.data()[i] == 1.0) as usize;
            logits[i] += p.logits.data()[i] as f64;
        }
    }
    let shape = first.logits.shape().to_vec();
    // 2·votes >= k is the exact form of votes / k >= 0.5
    let share = Tensor::new(shape.clone(), votes.iter().map(|&v| v as f32 / k as f32).collect())?;
    let mask = Tensor::new(first.mask.shape().to_vec(), votes.iter().map(|&v| (2 * v >= k) as u8 as f32).collect())?;
    Ok(FusedPrediction {
        prediction: Prediction {
            logits: share,
            mask,
            threshold: 0.5,
        },
        mean_logits: Tensor::new(shape, logits.iter().map(|&x| (x / k as f64) as f32).collect())?,
    })
}

#[derive(Debug, Serialize)]
struct PredictionMeta {
    threshold: f32,
    ag_weight: f32,
    mode: AggregateMode,
}

/// Writes the mask as JCAT at `path` and metadata to `<path>.json`.
pub fn save_prediction(pred: &Prediction, params: DecodeParams, mode: AggregateMode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    jcat::save(&pred.mask, path)?;
    let meta = PredictionMeta {
        threshold: pred.threshold,
        ag_weight: params.ag_weight,
        mode,
    };
    fs::write(crate::ckmm::sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
