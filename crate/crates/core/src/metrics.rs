//! IoU, FB-IoU and fold-level aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intersection and union pixel counts for one mask pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn accumulate(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("iou", pred.shape(), gt.shape()));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Validation("iou inputs must be binary masks".into()));
    }
    Ok(())
}

/// Foreground and background overlaps in one pass.
pub fn overlaps(pred: &Tensor, gt: &Tensor) -> Result<(Overlap, Overlap)> {
    check_pair(pred, gt)?;
    let (mut fg, mut bg) = (Overlap::default(), Overlap::default());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        fg.intersection += (p && g) as u64;
        fg.union += (p || g) as u64;
        bg.intersection += (!p && !g) as u64;
        bg.union += (!p || !g) as u64;
    }
    Ok((fg, bg))
}

/// Empty union counts as perfect agreement.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(overlaps(pred, gt)?.0.iou())
}

pub fn fb_iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (fg, bg) = overlaps(pred, gt)?;
    Ok((fg.iou() + bg.iou()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub fb_iou: f64,
    #[serde(rename = "per_class")]
    pub per_class_iou: BTreeMap<usize, f64>,
    #[serde(rename = "episodes")]
    pub episode_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome<'a> {
    pub pred: &'a Tensor,
    pub gt: &'a Tensor,
    pub class_id: usize,
}

/// Per-class IoU from intersections and unions summed over that class's
/// episodes; FB-IoU from sums over the whole fold.
pub fn fold_report(episodes: &[EpisodeOutcome<'_>]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Argument("fold_report needs at least one episode".into()));
    }
    let mut per_class: BTreeMap<usize, Overlap> = BTreeMap::new();
    let (mut fg_total, mut bg_total) = (Overlap::default(), Overlap::default());
    for e in episodes {
        let (fg, bg) = overlaps(e.pred, e.gt)?;
        per_class.entry(e.class_id).or_default().accumulate(fg);
        fg_total.accumulate(fg);
        bg_total.accumulate(bg);
    }
    let per_class_iou: BTreeMap<usize, f64> = per_class.into_iter().map(|(c, o)| (c, o.iou())).collect();
    let miou = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
    Ok(EvalReport {
        miou,
        fb_iou: (fg_total.iou() + bg_total.iou()) / 2.0,
        per_class_iou,
        episode_count: episodes.len(),
    })
}
