use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protoalign::ckmm::load_bank;
use protoalign::episode::{manifest_has_latent, SyntheticConfig};
use protoalign::pipeline::{evaluate, synthetic_bank, synthetic_episodes, Ablation, Pipeline, PipelineConfig};
use protoalign::aggregation::DecodeParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: [&str; 4] = ["--channels", "8", "--size", "16"];

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let mut args = vec!["gen", "--episodes", "10", "--seed", "1", "--out", dir.to_str().unwrap()];
        args.extend(SMALL);
        ok(&args);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 10 * 5);
    assert_eq!(ta, tb);
}

#[test]
fn gen_rejects_too_few_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--channels", "2", "--classes", "4", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_forced_latent_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["gen", "--episodes", "100", "--latent-rate", "1.0", "--out", tmp.path().to_str().unwrap()];
    args.extend(SMALL);
    ok(&args);
    let dirs: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 100);
    assert!(dirs.iter().all(|d| manifest_has_latent(d).unwrap()));
}

#[test]
fn run_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let reports: Vec<Vec<u8>> = ["r1.json", "r2.json"]
        .iter()
        .map(|name| {
            let path = tmp.path().join(name);
            ok(&["run", "--episodes", "12", "--seed", "5", "--out", path.to_str().unwrap()]);
            fs::read(path).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let stdout = ok(&["run", "--episodes", "12", "--seed", "5", "--threads", "1"]).stdout;
    assert_eq!(stdout, reports[0]);
    let v: serde_json::Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(v["episodes"], 12);
    assert!(v["miou"].as_f64().unwrap() > 0.9);
}

#[test]
fn ablated_run_matches_p2p_only_pipeline() {
    let out = ok(&["run", "--episodes", "8", "--seed", "2", "--latent-rate", "1", "--ablate", "p2b,ckmm"]);
    let cfg = SyntheticConfig { latent_object_rate: 1.0, seed: 2, ..Default::default() };
    let tasks = synthetic_episodes(&cfg, 8).unwrap();
    let pipe = Pipeline::new(
        PipelineConfig {
            decode: DecodeParams { threshold: 0.5, ag_weight: 0.1 },
            ablate: Ablation { p2b: true, ckmm: true, p2p: false },
            ..Default::default()
        },
        32,
        32,
        32,
    )
    .unwrap();
    let report = evaluate(&tasks, &pipe.run_episodes(&tasks, None).unwrap()).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), serde_json::to_string_pretty(&report).unwrap() + "\n");
}

#[test]
fn run_from_disk_with_bank_and_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = tmp.path().join("eps");
    let bank = tmp.path().join("bank.jcat");
    let preds = tmp.path().join("preds");
    ok(&["gen", "--episodes", "5", "--seed", "3", "--out", eps.to_str().unwrap()]);
    ok(&["bank", "--seed", "3", "--out", bank.to_str().unwrap()]);
    let out = ok(&[
        "run",
        "--episodes-dir",
        eps.to_str().unwrap(),
        "--bank",
        bank.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["episodes"], 5);
    assert!(preds.join("episode_00004.jcat").exists());
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(preds.join("episode_00004.jcat.json")).unwrap()).unwrap();
    assert_eq!(meta["mode"], "concat");

    // the same episodes generated in memory give the same report
    let mem = ok(&["run", "--episodes", "5", "--seed", "3"]);
    assert_eq!(mem.stdout, out.stdout);
}

#[test]
fn missing_inputs_exit_with_io_code() {
    let out = run(&["run", "--episodes-dir", "/nonexistent/episodes"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["run", "--episodes", "2", "--bank", "/nonexistent/bank.jcat"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["--config", "/nonexistent/config.json", "run"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 4, "episodes": 3, "synthetic": {"channels": 16, "height": 16, "width": 16}}"#).unwrap();
    let a = ok(&["--config", cfg.to_str().unwrap(), "run"]).stdout;
    let b = ok(&["--config", cfg.to_str().unwrap(), "run", "--episodes", "3", "--seed", "4"]).stdout;
    assert_eq!(a, b);
    let c = ok(&["--config", cfg.to_str().unwrap(), "run", "--seed", "5"]).stdout;
    assert_ne!(a, c);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["episodes"], 3);

    fs::write(&cfg, r#"{"seeds": 4}"#).unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "run"]).status.code(), Some(2));
    assert_eq!(run(&["run", "--ablate", "decoder"]).status.code(), Some(2));
}

#[test]
fn bank_round_trip_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bank.jcat");
    let out = ok(&["bank", "--seed", "8", "--instances", "3", "--out", path.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["class_ids"], serde_json::json!([0, 1, 2, 3]));
    let expected = synthetic_bank(&SyntheticConfig { seed: 8, ..Default::default() }, 3).unwrap();
    assert_eq!(load_bank(&path).unwrap(), expected);

    // two episodes only cover classes 0 and 1 of the four base classes
    let eps = tmp.path().join("eps");
    ok(&["gen", "--episodes", "2", "--out", eps.to_str().unwrap()]);
    let out = run(&["bank", "--episodes-dir", eps.to_str().unwrap(), "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["bank", "--episodes-dir", eps.to_str().unwrap(), "--classes", "2", "--out", path.to_str().unwrap()]);
    assert_eq!(load_bank(&path).unwrap().class_ids, vec![0, 1]);
}

#[test]
fn bench_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("b.csv");
    let out = ok(&["bench", "--tokens", "16,64", "--channels", "4", "--repeats", "5", "--csv", csv.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 8);
    assert_eq!(v["ratios_vs_na"].as_array().unwrap().len(), 8);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 9);
    assert_eq!(run(&["bench", "--tokens", "10", "--repeats", "5"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--variants", "fast"]).status.code(), Some(2));
}
