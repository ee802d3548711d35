use std::fs;
use std::path::{Path, PathBuf};

use protoalign::aggregation::DecodeParams;
use protoalign::bench::Variant;
use protoalign::episode::SyntheticConfig;
use protoalign::pipeline::PipelineConfig;
use protoalign::{Error, Result};
use serde::{Deserialize, Serialize};

/// Synthetic episode settings; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shots: usize,
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub noise_sigma: f64,
    pub latent_object_rate: f64,
    pub object_min_frac: f64,
    pub object_max_frac: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            channels: d.channels,
            height: d.height,
            width: d.width,
            shots: d.shots,
            num_base_classes: d.num_base_classes,
            num_novel_classes: d.num_novel_classes,
            noise_sigma: d.noise_sigma,
            latent_object_rate: d.latent_object_rate,
            object_min_frac: d.object_min_frac,
            object_max_frac: d.object_max_frac,
        }
    }
}

impl SyntheticSection {
    pub fn with_seed(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            shots: self.shots,
            num_base_classes: self.num_base_classes,
            num_novel_classes: self.num_novel_classes,
            noise_sigma: self.noise_sigma,
            latent_object_rate: self.latent_object_rate,
            seed,
            object_min_frac: self.object_min_frac,
            object_max_frac: self.object_max_frac,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub episodes_dir: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub variants: Vec<Variant>,
    pub tokens: Vec<usize>,
    pub channels: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            tokens: vec![3600, 7225],
            channels: vec![64],
            repeats: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Episodes written by `gen` or generated in memory by `run`.
    pub episodes: usize,
    /// Synthetic episodes per base class used to build a bank.
    pub bank_instances_per_class: usize,
    pub synthetic: SyntheticSection,
    pub pipeline: PipelineConfig,
    pub paths: Paths,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 100,
            bank_instances_per_class: 4,
            synthetic: SyntheticSection::default(),
            pipeline: PipelineConfig {
                // separates one-hot synthetic features; see README
                decode: DecodeParams {
                    threshold: 0.5,
                    ag_weight: 0.1,
                },
                ..PipelineConfig::default()
            },
            paths: Paths::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        self.synthetic.with_seed(self.seed)
    }
}
