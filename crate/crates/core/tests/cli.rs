use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 11
[mobility]
n_users = 150
n_regions = 14
n_intervals = 48
[disease]
n_seed_infections = 10
[model]
epochs = 4
[macro]
epochs = 3
[attack]
max_users = 40
sigma_grid = [0.0, 0.1]
[ablation]
seeds = 1
"#;

struct Sandbox {
    _tmp: TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let out = tmp.path().join("out");
        Self {
            _tmp: tmp,
            config,
            out,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_falcon"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .envs(env.iter().copied())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepared() -> Self {
        let s = Self::new();
        s.ok(&["gen-mobility"]);
        s.ok(&["simulate"]);
        s
    }
}

fn scores(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stages_run_standalone_from_files() {
    let s = Sandbox::prepared();
    let train_stdout = s.ok(&["train", "--variant", "falcon"]);
    let dir = s.out.join("train/falcon");
    for f in [
        "predictions.csv",
        "checkpoint.json",
        "losses.csv",
        "metrics.json",
        "pr_curve.csv",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    for stage in ["gen-mobility", "simulate", "train-falcon"] {
        let m = json(&s.out.join(format!("manifest-{stage}.json")));
        assert!(
            m["config_hash"].as_str().is_some_and(|h| h.len() == 64),
            "{m}"
        );
        assert!(m["stage_seeds"]["train"].is_u64(), "{m}");
    }

    // evaluate from files reproduces the in-process metrics
    let eval_stdout = s.ok(&["evaluate", "--variant", "falcon"]);
    let in_process = json(&dir.join("metrics.json"));
    assert_eq!(json(&s.out.join("evaluate/metrics.json")), in_process);
    let printed: Value = serde_json::from_str(&eval_stdout).unwrap();
    assert_eq!(printed, in_process);
    assert_eq!(
        serde_json::from_str::<Value>(&train_stdout).unwrap(),
        in_process
    );

    let report: Value = serde_json::from_str(&s.ok(&["attack", "--kind", "gradient"])).unwrap();
    assert!(report.is_object());
    s.ok(&["attack", "--kind", "localization"]);
    assert!(s.out.join("attack-localization.json").exists());
}

#[test]
fn ablate_emits_a_row_per_variant() {
    let s = Sandbox::new();
    s.ok(&["ablate"]);
    let csv = fs::read_to_string(s.out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    for v in [
        "hgnn-central",
        "wo-macro",
        "wo-pseudo",
        "wo-perturbation",
        "wo-privacy",
        "falcon",
        "dct",
    ] {
        assert_eq!(variants.iter().filter(|&&x| x == v).count(), 1, "{v}");
    }
}

#[test]
fn sweep_writes_grid() {
    let s = Sandbox::prepared();
    s.ok(&["sweep"]);
    let csv = fs::read_to_string(s.out.join("sweep.csv")).unwrap();
    assert!(csv.lines().count() > 2, "{csv}");
}

#[test]
fn missing_input_names_producer() {
    let s = Sandbox::new();
    let out = s.run(&["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-mobility"));

    s.ok(&["gen-mobility"]);
    let out = s.run(&["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate"));
}

#[test]
fn invalid_key_is_named() {
    let s = Sandbox::new();
    let out = s.run(&["gen-mobility", "--model.epohcs", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epohcs"));

    let out = s.run(&["train", "--variant", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_four() {
    let s = Sandbox::prepared();
    let out = s.run(&["train", "--variant", "hgnn-central", "--model.lr", "1e300"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn central_oracle_matches_federated_without_privacy() {
    let s = Sandbox::prepared();
    s.ok(&[
        "train",
        "--variant",
        "hgnn-central",
        "--privacy.enabled",
        "false",
    ]);
    s.ok(&["train", "--variant", "falcon", "--privacy.enabled", "false"]);
    let a = scores(&s.out.join("train/hgnn-central/predictions.csv"));
    let b = scores(&s.out.join("train/falcon/predictions.csv"));
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "max diff {diff}");
    let ma = json(&s.out.join("train/hgnn-central/metrics.json"));
    let mb = json(&s.out.join("train/falcon/metrics.json"));
    for k in ["auc", "f1", "accuracy", "bep"] {
        assert!(
            (ma[k].as_f64().unwrap() - mb[k].as_f64().unwrap()).abs() < 1e-6,
            "{k}"
        );
    }
}

#[test]
fn metrics_are_byte_identical_across_runs_and_thread_counts() {
    let runs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|threads| {
            let s = Sandbox::new();
            for args in [
                &["gen-mobility"][..],
                &["simulate"],
                &["train", "--variant", "falcon"],
            ] {
                let out = s.run_env(args, &[("FALCON_THREADS", threads)]);
                assert!(
                    out.status.success(),
                    "{}",
                    String::from_utf8_lossy(&out.stderr)
                );
            }
            fs::read(s.out.join("train/falcon/metrics.json")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);

    let s = Sandbox::new();
    let out = s.run_env(&["gen-mobility"], &[("FALCON_THREADS", "many")]);
    assert_eq!(out.status.code(), Some(2));
}
