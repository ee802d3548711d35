//! Class-agnostic prior from base-class prototypes.
//!
//! Each base class is summarized by the mean of its instances' masked average
//! pooled features. The prior for a query pixel is the average dot product of
//! its feature vector with every base prototype, so it lights up wherever
//! anything resembling a known class appears, target or not.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jcat;
use crate::tensor::{chw, hw, Tensor};

/// Per-channel mean of `f` (C×H×W) over the foreground of `mask` (H×W),
/// returned as a 1×C row.
pub fn wgap(f: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let pooled = wgap_f64(f, mask)?;
    Tensor::new([1, pooled.len()], pooled.into_iter().map(|x| x as f32).collect())
}

fn wgap_f64(f: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = chw(f, "wgap")?;
    if hw(mask, "wgap")? != (h, w) {
        return Err(Error::shape("wgap", f.shape(), mask.shape()));
    }
    if !mask.is_binary() {
        return Err(Error::Validation("mask must be binary {0,1}".into()));
    }
    let m = mask.data();
    let area: f64 = m.iter().map(|&b| b as f64).sum();
    if area == 0.0 {
        return Err(Error::EmptyMask);
    }
    let plane = h * w;
    Ok((0..c)
        .map(|ch| {
            let row = &f.data()[ch * plane..(ch + 1) * plane];
            row.iter().zip(m).map(|(&x, &b)| x as f64 * b as f64).sum::<f64>() / area
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct BankInstance<'a> {
    pub features: &'a Tensor,
    pub mask: &'a Tensor,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasePrototypeBank {
    /// |C_base|×C, rows in ascending class order.
    pub prototypes: Tensor,
    pub class_ids: Vec<usize>,
    pub instance_counts: Vec<usize>,
}

impl BasePrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn channels(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.prototypes.data()[i * c..(i + 1) * c]
    }

    fn validate(&self) -> Result<()> {
        let s = self.prototypes.shape();
        if s.len() != 2 || s[0] != self.class_ids.len() || s[0] != self.instance_counts.len() {
            return Err(Error::Format(format!(
                "bank of shape {s:?} with {} class ids and {} counts",
                self.class_ids.len(),
                self.instance_counts.len()
            )));
        }
        if !self.prototypes.all_finite() {
            return Err(Error::Invariant("bank has non-finite prototypes".into()));
        }
        if self.class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("bank class ids must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Bank over exactly the classes present in `instances`.
pub fn build_bank(instances: &[BankInstance<'_>]) -> Result<BasePrototypeBank> {
    let mut classes: Vec<usize> = instances.iter().map(|i| i.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    build_bank_for_classes(&classes, instances)
}

/// Bank over `classes`; every listed class needs at least one instance and
/// instances of unlisted classes are ignored.
pub fn build_bank_for_classes(classes: &[usize], instances: &[BankInstance<'_>]) -> Result<BasePrototypeBank> {
    if classes.is_empty() {
        return Err(Error::Config("a prototype bank needs at least one class".into()));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for &class in classes {
        sums.insert(class, (Vec::new(), 0));
    }
    let mut channels = None;
    for inst in instances {
        let Some((sum, count)) = sums.get_mut(&inst.class_id) else {
            continue;
        };
        let pooled = wgap_f64(inst.features, inst.mask)?;
        let c = pooled.len();
        if *channels.get_or_insert(c) != c {
            return Err(Error::shape("build_bank", &[channels.unwrap_or(c)], inst.features.shape()));
        }
        if sum.is_empty() {
            sum.resize(c, 0.0);
        }
        sum.iter_mut().zip(pooled).for_each(|(s, p)| *s += p);
        *count += 1;
    }
    if let Some((&class, _)) = sums.iter().find(|(_, (_, n))| *n == 0) {
        return Err(Error::Config(format!("class {class} has no instances")));
    }
    let c = channels.expect("at least one instance");
    let mut data = Vec::with_capacity(sums.len() * c);
    let mut counts = Vec::with_capacity(sums.len());
    for (sum, count) in sums.values() {
        data.extend(sum.iter().map(|s| (s / *count as f64) as f32));
        counts.push(*count);
    }
    let bank = BasePrototypeBank {
        prototypes: Tensor::new([sums.len(), c], data)?,
        class_ids: sums.keys().copied().collect(),
        instance_counts: counts,
    };
    bank.validate()?;
    Ok(bank)
}

/// 1×H×W class-agnostic prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub values: Tensor,
}

impl ProbabilityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [1, _, _] => {}
            other => {
                return Err(Error::Validation(format!(
                    "probability map must be 1×H×W, got {other:?}"
                )))
            }
        }
        if !values.all_finite() {
            return Err(Error::Invariant("probability map has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Tensor::zeros([1, h, w])?)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// Average-pooled down to `height`×`width`.
    pub fn downsample(&self, height: usize, width: usize) -> Result<Self> {
        Self::new(crate::pyramid::downsample_features(&self.values, height, width)?)
    }
}

/// Mean over bank rows of `⟨prototype, f_q(x)⟩` at every pixel. With
/// `normalize`, both vectors are L2-normalized first (zero vectors give 0).
pub fn probability_map(bank: &BasePrototypeBank, q_feat: &Tensor, normalize: bool) -> Result<ProbabilityMap> {
    let (c, h, w) = chw(q_feat, "probability_map")?;
    if bank.channels() != c {
        return Err(Error::shape("probability_map", bank.prototypes.shape(), q_feat.shape()));
    }
    // The map is linear in the prototypes, so average them first.
    let mut direction = vec![0f64; c];
    for i in 0..bank.num_classes() {
        let row = bank.row(i);
        let scale = if normalize {
            let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                1.0 / norm
            } else {
                0.0
            }
        } else {
            1.0
        };
        direction.iter_mut().zip(row).for_each(|(d, &x)| *d += x as f64 * scale);
    }
    let classes = bank.num_classes() as f64;
    direction.iter_mut().for_each(|d| *d /= classes);

    let plane = h * w;
    let f = q_feat.data();
    let values = (0..plane)
        .map(|p| {
            let dot: f64 = (0..c).map(|ch| direction[ch] * f[ch * plane + p] as f64).sum();
            if normalize {
                let norm = (0..c).map(|ch| (f[ch * plane + p] as f64).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    (dot / norm) as f32
                } else {
                    0.0
                }
            } else {
                dot as f32
            }
        })
        .collect();
    ProbabilityMap::new(Tensor::new([1, h, w], values)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankSidecar {
    class_ids: Vec<usize>,
    instance_counts: Vec<usize>,
}

/// Sidecar path for a bank tensor file: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_bank(bank: &BasePrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    jcat::save(&bank.prototypes, path)?;
    let sidecar = BankSidecar {
        class_ids: bank.class_ids.clone(),
        instance_counts: bank.instance_counts.clone(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<BasePrototypeBank> {
    let path = path.as_ref();
    let prototypes = jcat::load_f32(path)?;
    let sidecar: BankSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)
        .map_err(|e| Error::Format(format!("bank sidecar: {e}")))?;
    let bank = BasePrototypeBank {
        prototypes,
        class_ids: sidecar.class_ids,
        instance_counts: sidecar.instance_counts,
    };
    bank.validate()?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn wgap_examples() {
        let f = Tensor::full([3, 4, 4], 2.5).unwrap();
        let m = Tensor::from_fn([4, 4], |i| (i % 3 == 0) as u8 as f32).unwrap();
        assert_eq!(wgap(&f, &m).unwrap().data(), &[2.5; 3]);

        let f = random([3, 4, 4], 1);
        let ones = Tensor::ones([4, 4]).unwrap();
        let g = wgap(&f, &ones).unwrap();
        for ch in 0..3 {
            let mean: f32 = f.data()[ch * 16..(ch + 1) * 16].iter().sum::<f32>() / 16.0;
            assert!((g.data()[ch] - mean).abs() < 1e-6);
        }

        let f = Tensor::new([2, 2, 2], vec![1., 2., 3., 4., 0., 0., 0., 0.]).unwrap();
        let m = Tensor::new([2, 2], vec![1., 1., 0., 0.]).unwrap();
        assert_eq!(wgap(&f, &m).unwrap().data(), &[1.5, 0.0]);
        assert_eq!(wgap(&f, &m).unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn wgap_empty_mask() {
        let f = random([2, 3, 3], 1);
        assert!(matches!(wgap(&f, &Tensor::zeros([3, 3]).unwrap()), Err(Error::EmptyMask)));
    }

    #[test]
    fn bank_examples() {
        let f1 = random([3, 4, 4], 1);
        let f2 = random([3, 4, 4], 2);
        let m = Tensor::from_fn([4, 4], |i| (i < 6) as u8 as f32).unwrap();
        let one = build_bank(&[BankInstance { features: &f1, mask: &m, class_id: 7 }]).unwrap();
        assert_eq!(one.prototypes.data(), wgap(&f1, &m).unwrap().data());
        assert_eq!(one.class_ids, vec![7]);
        assert_eq!(one.instance_counts, vec![1]);

        let two = build_bank(&[
            BankInstance { features: &f1, mask: &m, class_id: 7 },
            BankInstance { features: &f2, mask: &m, class_id: 7 },
        ])
        .unwrap();
        let u = wgap(&f1, &m).unwrap();
        let v = wgap(&f2, &m).unwrap();
        for ch in 0..3 {
            let mean = (u.data()[ch] + v.data()[ch]) / 2.0;
            assert!((two.prototypes.data()[ch] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn bank_rows_sorted_and_missing_class_rejected() {
        let f = random([2, 2, 2], 1);
        let m = Tensor::ones([2, 2]).unwrap();
        let bank = build_bank(&[
            BankInstance { features: &f, mask: &m, class_id: 3 },
            BankInstance { features: &f, mask: &m, class_id: 1 },
        ])
        .unwrap();
        assert_eq!(bank.class_ids, vec![1, 3]);
        let err = build_bank_for_classes(&[0, 1], &[BankInstance { features: &f, mask: &m, class_id: 1 }]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(matches!(build_bank(&[]), Err(Error::Config(_))));
        let empty = Tensor::zeros([2, 2]).unwrap();
        let err = build_bank(&[BankInstance { features: &f, mask: &empty, class_id: 1 }]);
        assert!(matches!(err, Err(Error::EmptyMask)));
    }

    fn bank_of(rows: &[&[f32]]) -> BasePrototypeBank {
        let c = rows[0].len();
        BasePrototypeBank {
            prototypes: Tensor::new([rows.len(), c], rows.concat()).unwrap(),
            class_ids: (0..rows.len()).collect(),
            instance_counts: vec![1; rows.len()],
        }
    }

    #[test]
    fn map_orthogonal_is_zero() {
        let bank = bank_of(&[&[1., 0., 0.], &[0., 1., 0.]]);
        let q = Tensor::from_fn([3, 2, 2], |i| if i >= 8 { 3.0 } else { 0.0 }).unwrap();
        let map = probability_map(&bank, &q, false).unwrap();
        assert_eq!(map.values.shape(), &[1, 2, 2]);
        assert_eq!(map.values.max_abs(), 0.0);
    }

    #[test]
    fn map_self_dot_product() {
        let proto = [0.5f32, -1.0, 2.0];
        let bank = bank_of(&[&proto]);
        let q = Tensor::from_fn([3, 3, 3], |i| proto[i / 9]).unwrap();
        let map = probability_map(&bank, &q, false).unwrap();
        for &v in map.values.data() {
            assert!((v - 5.25).abs() < 1e-6);
        }
        let cos = probability_map(&bank, &q, true).unwrap();
        for &v in cos.values.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn map_channel_mismatch() {
        let bank = bank_of(&[&[1., 0.]]);
        assert!(probability_map(&bank, &random([3, 2, 2], 1), false).is_err());
    }

    #[test]
    fn bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jcat");
        let bank = BasePrototypeBank {
            prototypes: random([1, 3, 4], 4).into_reshape([3, 4]).unwrap(),
            class_ids: vec![0, 2, 5],
            instance_counts: vec![4, 1, 9],
        };
        save_bank(&bank, &path).unwrap();
        assert!(dir.path().join("bank.jcat.json").exists());
        assert_eq!(load_bank(&path).unwrap(), bank);
    }

    #[test]
    fn map_downsample() {
        let map = ProbabilityMap::new(Tensor::from_fn([1, 4, 4], |i| i as f32).unwrap()).unwrap();
        let small = map.downsample(2, 2).unwrap();
        assert_eq!(small.values.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
