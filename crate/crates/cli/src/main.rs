mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protoalign::aggregation::save_prediction;
use protoalign::bench::{self, Variant};
use protoalign::ckmm::{build_bank_for_classes, load_bank, save_bank, BankInstance, BasePrototypeBank};
use protoalign::episode::{load_episode, save_episode, EpisodeTask};
use protoalign::pipeline::{evaluate, synthetic_bank, synthetic_episodes, Ablation, Pipeline};
use protoalign::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "protoalign", version, about = "Few-shot segmentation by prototype alignment")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: episode directory for `gen`, bank file for `bank`,
    /// report file for `run` and `bench` (stdout otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for episode-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic episodes to disk.
    Gen(GenArgs),
    /// Run the pipeline over an episode set and print an evaluation report.
    Run(RunArgs),
    /// Build a base-class prototype bank.
    Bank(BankArgs),
    /// Time the attention variants.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Number of base classes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    latent_rate: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    /// Image side length (square images).
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
    /// Read episodes from this directory instead of generating them.
    #[arg(long)]
    episodes_dir: Option<PathBuf>,
    /// Load the prototype bank from this file instead of building one.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Comma-separated components to disable: p2p, p2b, ckmm.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    exclude_masked_tokens: bool,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    ag_weight: Option<f32>,
    /// Also write each predicted mask (JCAT plus JSON metadata) here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BankArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
    /// Use the supports of these episodes as instances.
    #[arg(long)]
    episodes_dir: Option<PathBuf>,
    /// Synthetic instances per base class when no episode directory is given.
    #[arg(long)]
    instances: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated subset of na, nla, cosine, ours.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Token counts (perfect squares).
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Also write the results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
        Error::Invariant(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(args) => cmd_gen(cfg, args, cli.out),
        Command::Run(args) => cmd_run(cfg, args, cli.out),
        Command::Bank(args) => cmd_bank(cfg, args, cli.out),
        Command::Bench(args) => cmd_bench(cfg, args, cli.out),
    }
}

fn apply_synthetic(cfg: &mut RunConfig, a: &SyntheticArgs) {
    let s = &mut cfg.synthetic;
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.channels {
        s.channels = v;
    }
    if let Some(v) = a.classes {
        s.num_base_classes = v;
    }
    if let Some(v) = a.latent_rate {
        s.latent_object_rate = v;
    }
    if let Some(v) = a.noise {
        s.noise_sigma = v;
    }
    if let Some(v) = a.shots {
        s.shots = v;
    }
    if let Some(v) = a.size {
        s.height = v;
        s.width = v;
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn episode_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("episode_{index:05}"))
}

fn cmd_gen(mut cfg: RunConfig, args: GenArgs, out: Option<PathBuf>) -> Result<()> {
    apply_synthetic(&mut cfg, &args.synthetic);
    let dir = out
        .or(cfg.paths.episodes_dir.clone())
        .ok_or_else(|| Error::Config("gen needs --out or paths.episodes_dir".into()))?;
    let tasks = synthetic_episodes(&cfg.synthetic_config(), cfg.episodes)?;
    fs::create_dir_all(&dir)?;
    for (i, task) in tasks.iter().enumerate() {
        save_episode(task, episode_dir(&dir, i))?;
    }
    Ok(())
}

/// Episode subdirectories in name order.
fn load_episodes(dir: &Path) -> Result<Vec<EpisodeTask>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no episodes under {}", dir.display()),
        )));
    }
    dirs.iter().map(load_episode).collect()
}

fn cmd_run(mut cfg: RunConfig, args: RunArgs, out: Option<PathBuf>) -> Result<()> {
    apply_synthetic(&mut cfg, &args.synthetic);
    if let Some(list) = &args.ablate {
        cfg.pipeline.ablate = Ablation::parse(list)?;
    }
    if args.exclude_masked_tokens {
        cfg.pipeline.exclude_masked_tokens = true;
    }
    if let Some(v) = args.levels {
        cfg.pipeline.levels = v;
    }
    if let Some(v) = args.threshold {
        cfg.pipeline.decode.threshold = v;
    }
    if let Some(v) = args.ag_weight {
        cfg.pipeline.decode.ag_weight = v;
    }
    if let Some(p) = args.episodes_dir {
        cfg.paths.episodes_dir = Some(p);
    }
    if let Some(p) = args.bank {
        cfg.paths.bank = Some(p);
    }
    let synthetic = cfg.synthetic_config();
    let tasks = match &cfg.paths.episodes_dir {
        Some(dir) => load_episodes(dir)?,
        None => synthetic_episodes(&synthetic, cfg.episodes)?,
    };
    let (c, h, w) = tasks[0].dims();
    let bank: Option<BasePrototypeBank> = if cfg.pipeline.ablate.ckmm {
        None
    } else {
        match &cfg.paths.bank {
            Some(path) => Some(load_bank(path)?),
            None => Some(synthetic_bank(&synthetic, cfg.bank_instances_per_class)?),
        }
    };
    let pipeline = Pipeline::new(cfg.pipeline.clone(), c, h, w)?;
    let predictions = pipeline.run_episodes(&tasks, bank.as_ref())?;
    if let Some(dir) = &args.predictions {
        fs::create_dir_all(dir)?;
        for (i, p) in predictions.iter().enumerate() {
            save_prediction(
                &p.prediction,
                cfg.pipeline.decode,
                cfg.pipeline.aggregate_mode,
                dir.join(format!("episode_{i:05}.jcat")),
            )?;
        }
    }
    let report = evaluate(&tasks, &predictions)?;
    write_json(&report, out.or(cfg.paths.report).as_deref())
}

#[derive(Serialize)]
struct BankSummary {
    path: PathBuf,
    class_ids: Vec<usize>,
    instance_counts: Vec<usize>,
    channels: usize,
}

fn cmd_bank(mut cfg: RunConfig, args: BankArgs, out: Option<PathBuf>) -> Result<()> {
    apply_synthetic(&mut cfg, &args.synthetic);
    if let Some(n) = args.instances {
        cfg.bank_instances_per_class = n;
    }
    let path = out
        .or(cfg.paths.bank.clone())
        .ok_or_else(|| Error::Config("bank needs --out or paths.bank".into()))?;
    let bank = match args.episodes_dir.or(cfg.paths.episodes_dir.clone()) {
        Some(dir) => {
            let tasks = load_episodes(&dir)?;
            let instances: Vec<BankInstance<'_>> = tasks
                .iter()
                .filter(|t| t.class_id < cfg.synthetic.num_base_classes)
                .flat_map(|t| {
                    t.supports.iter().map(|s| BankInstance {
                        features: &s.features,
                        mask: &s.mask,
                        class_id: t.class_id,
                    })
                })
                .collect();
            let classes: Vec<usize> = (0..cfg.synthetic.num_base_classes).collect();
            build_bank_for_classes(&classes, &instances)?
        }
        None => synthetic_bank(&cfg.synthetic_config(), cfg.bank_instances_per_class)?,
    };
    save_bank(&bank, &path)?;
    write_json(
        &BankSummary {
            path,
            class_ids: bank.class_ids.clone(),
            instance_counts: bank.instance_counts.clone(),
            channels: bank.channels(),
        },
        None,
    )
}

fn cmd_bench(mut cfg: RunConfig, args: BenchArgs, out: Option<PathBuf>) -> Result<()> {
    if let Some(names) = &args.variants {
        cfg.bench.variants = names.iter().map(|n| Variant::parse(n.trim())).collect::<Result<_>>()?;
    }
    if let Some(t) = args.tokens {
        cfg.bench.tokens = t;
    }
    if let Some(c) = args.channels {
        cfg.bench.channels = c;
    }
    if let Some(r) = args.repeats {
        cfg.bench.repeats = r;
    }
    let b = &cfg.bench;
    // timing runs on this thread only, one kernel at a time
    let results = bench::run_bench(&b.variants, &b.tokens, &b.channels, b.repeats, cfg.seed)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, bench::to_csv(&results))?;
    }
    write_json(&bench::report(results), out.or(cfg.paths.report).as_deref())
}
