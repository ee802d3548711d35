//! Timing harness for the attention variants.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::p2p::{
    cosine_align, explicit_attention_oracle, nla_align, p2p_align, AlignedPrototype, AttentionOptions,
    ExplicitVariant, Projection,
};
use crate::rng::{derive_seed, rng};
use crate::tensor::{max_rel_diff, Tensor};

pub const WARMUP_RUNS: usize = 3;
pub const MIN_REPEATS: usize = 5;
/// Relative tolerance of the factored kernel against the explicit form.
pub const EQUIVALENCE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Na,
    Nla,
    Cosine,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Na, Variant::Nla, Variant::Cosine, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Na => "na",
            Variant::Nla => "nla",
            Variant::Cosine => "cosine",
            Variant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench variant `{s}`")))
    }

    /// Approximate floating-point operations for one call with `n` query
    /// and support tokens of `c` channels.
    pub fn flops(self, n: u64, c: u64) -> u64 {
        match self {
            // scores, softmax, weighted sum
            Variant::Na => 2 * n * n * c + 3 * n * n + 2 * n * n * c,
            // token softmax, C×C summary, apply
            Variant::Ours | Variant::Nla => 3 * n * c + 2 * n * c * c + 2 * n * c * c,
            // normalization, pairwise cosine, weighted sum
            Variant::Cosine => 4 * n * c + 2 * n * n * c + 2 * n * n * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: Variant,
    pub tokens: usize,
    pub channels: usize,
    pub median_ns: u64,
    pub p90_ns: u64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedRatio {
    pub variant: Variant,
    pub tokens: usize,
    pub channels: usize,
    /// `na` median over this variant's median; above 1 means faster than `na`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    pub ratios_vs_na: Vec<SpeedRatio>,
}

/// Side length of a square token grid.
pub fn square_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if tokens == 0 || side * side != tokens {
        return Err(Error::Config(format!("token count {tokens} is not a positive perfect square")));
    }
    Ok(side)
}

/// Inputs shared by every variant for one (tokens, channels) cell.
pub struct Cell {
    pub query: Tensor,
    pub support: Tensor,
    pub mask: Tensor,
    pub projection: Projection,
}

impl Cell {
    pub fn generate(tokens: usize, channels: usize, seed: u64) -> Result<Self> {
        let side = square_side(tokens)?;
        if channels == 0 {
            return Err(Error::Config("bench channels must be positive".into()));
        }
        let mut r = rng(seed);
        let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect() };
        let query = Tensor::new([channels, side, side], normal(tokens * channels))?;
        let support = Tensor::new([channels, side, side], normal(tokens * channels))?;
        let mask = Tensor::new([side, side], (0..tokens).map(|_| r.random_bool(0.5) as u8 as f32).collect())?;
        let projection = Projection::seeded(channels, r.random())?;
        Ok(Self {
            query,
            support,
            mask,
            projection,
        })
    }

    pub fn run(&self, variant: Variant) -> Result<AlignedPrototype> {
        let opts = AttentionOptions::default();
        let (q, s, m, p) = (&self.query, &self.support, &self.mask, &self.projection);
        match variant {
            Variant::Na => explicit_attention_oracle(q, s, m, p, opts, ExplicitVariant::Na),
            Variant::Nla => nla_align(q, s, m, p, opts),
            Variant::Cosine => cosine_align(q, s, m, p),
            Variant::Ours => p2p_align(q, s, m, p, opts),
        }
    }

    /// Fails unless the factored kernel matches its explicit form.
    pub fn check_equivalence(&self) -> Result<f64> {
        let ours = self.run(Variant::Ours)?;
        let explicit = explicit_attention_oracle(
            &self.query,
            &self.support,
            &self.mask,
            &self.projection,
            AttentionOptions::default(),
            ExplicitVariant::Unfactored,
        )?;
        let rel = max_rel_diff(&ours.values, &explicit.values)?;
        if rel.is_nan() || rel > EQUIVALENCE_TOL {
            return Err(Error::Invariant(format!(
                "factored attention deviates from the explicit form by {rel:e} (limit {EQUIVALENCE_TOL:e})"
            )));
        }
        Ok(rel)
    }
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    // nearest-rank
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(cell: &Cell, variant: Variant, mut samples: Vec<u64>) -> BenchResult {
    samples.sort_unstable();
    let (c, h, w) = (cell.query.shape()[0], cell.query.shape()[1], cell.query.shape()[2]);
    BenchResult {
        variant,
        tokens: h * w,
        channels: c,
        median_ns: percentile(&samples, 0.5),
        p90_ns: percentile(&samples, 0.9),
        repeats: samples.len(),
    }
}

fn time_once(cell: &Cell, variant: Variant) -> Result<u64> {
    let start = Instant::now();
    let out = cell.run(black_box(variant))?;
    let ns = (start.elapsed().as_nanos() as u64).max(1);
    black_box(out);
    Ok(ns)
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    Ok(())
}

/// Times one variant on one cell after [`WARMUP_RUNS`] discarded calls.
pub fn time_variant(cell: &Cell, variant: Variant, repeats: usize) -> Result<BenchResult> {
    check_repeats(repeats)?;
    for _ in 0..WARMUP_RUNS {
        black_box(cell.run(variant)?);
    }
    let samples = (0..repeats).map(|_| time_once(cell, variant)).collect::<Result<_>>()?;
    Ok(summarize(cell, variant, samples))
}

/// Times every variant on every (tokens, channels) cell, one kernel at a
/// time on the calling thread. Cell inputs come from
/// `derive_seed(seed, cell_index)` and are shared by all variants. After the
/// warm-up calls, repeats go round-robin over all (cell, variant) pairs so
/// that drift in machine speed affects every pair alike.
pub fn run_bench(
    variants: &[Variant],
    token_sizes: &[usize],
    channels: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    check_repeats(repeats)?;
    for &t in token_sizes {
        square_side(t)?;
    }
    let mut cells = Vec::new();
    for &t in token_sizes {
        for &c in channels {
            let cell = Cell::generate(t, c, derive_seed(seed, cells.len() as u64))?;
            cell.check_equivalence()?;
            cells.push(cell);
        }
    }
    let pairs: Vec<(usize, Variant)> = (0..cells.len())
        .flat_map(|i| variants.iter().map(move |&v| (i, v)))
        .collect();
    for &(i, v) in &pairs {
        for _ in 0..WARMUP_RUNS {
            black_box(cells[i].run(v)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(repeats); pairs.len()];
    for _ in 0..repeats {
        for (slot, &(i, v)) in samples.iter_mut().zip(&pairs) {
            slot.push(time_once(&cells[i], v)?);
        }
    }
    let mut results: Vec<BenchResult> = pairs
        .iter()
        .zip(samples)
        .map(|(&(i, v), s)| summarize(&cells[i], v, s))
        .collect();
    results.sort_by_key(|r| (r.variant, r.tokens, r.channels));
    Ok(results)
}

/// Speedup of each variant relative to `na` on the same cell. Cells without
/// an `na` timing are skipped.
pub fn ratios_vs_na(results: &[BenchResult]) -> Vec<SpeedRatio> {
    results
        .iter()
        .filter_map(|r| {
            let na = results
                .iter()
                .find(|n| n.variant == Variant::Na && n.tokens == r.tokens && n.channels == r.channels)?;
            Some(SpeedRatio {
                variant: r.variant,
                tokens: r.tokens,
                channels: r.channels,
                speedup: na.median_ns as f64 / r.median_ns as f64,
            })
        })
        .collect()
}

pub fn report(results: Vec<BenchResult>) -> BenchReport {
    let ratios_vs_na = ratios_vs_na(&results);
    BenchReport { results, ratios_vs_na }
}

/// Median time at `to` tokens over the time at `from` tokens.
pub fn scaling_ratio(results: &[BenchResult], variant: Variant, channels: usize, from: usize, to: usize) -> Option<f64> {
    let find = |t: usize| {
        results
            .iter()
            .find(|r| r.variant == variant && r.channels == channels && r.tokens == t)
    };
    Some(find(to)?.median_ns as f64 / find(from)?.median_ns as f64)
}

/// Pairs of results where the median drops by more than `slack` (relative)
/// as tokens grow at fixed variant and channels.
pub fn monotonicity_violations(results: &[BenchResult], slack: f64) -> Vec<(BenchResult, BenchResult)> {
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|r| (r.variant, r.channels, r.tokens));
    sorted
        .windows(2)
        .filter(|w| w[0].variant == w[1].variant && w[0].channels == w[1].channels)
        .filter(|w| (w[1].median_ns as f64) < w[0].median_ns as f64 * (1.0 - slack))
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("variant,tokens,channels,median_ns,p90_ns,repeats\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant.name(),
            r.tokens,
            r.channels,
            r.median_ns,
            r.p90_ns,
            r.repeats
        );
    }
    out
}
