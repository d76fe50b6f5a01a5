use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scop::pipeline::{read_metrics, DataConfig, DatasetName, ExperimentConfig, TrainConfig};

const SUBCOMMANDS: [&str; 10] = [
    "pretrain", "knockoff", "select", "prune", "finetune", "eval", "run", "ablate", "diagnose", "report",
];

fn scop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scop"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut cases: Vec<(String, Vec<&str>)> = vec![("scop".into(), vec!["--help"])];
    cases.extend(SUBCOMMANDS.iter().map(|s| (s.to_string(), vec![*s, "--help"])));
    for (name, args) in cases {
        let out = scop(&args);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stderr(&out));
        let text = stdout(&out);
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path)
            .unwrap_or_else(|_| panic!("missing {}; rerun with UPDATE_GOLDEN=1", path.display()));
        assert_eq!(text, want, "help for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
    }
}

#[test]
fn help_lists_defaults() {
    let text = stdout(&scop(&["run", "--help"]));
    for flag in ["--seed", "--control", "--bias", "--rate", "--criterion", "--out-dir", "--force", "--preset"] {
        assert!(text.contains(flag), "{flag} missing from run --help");
    }
    assert!(text.contains("[default: scop-out]"));
    assert!(stdout(&scop(&["diagnose", "--help"])).contains("[default: knockoff,none,noise,random-sample]"));
}

#[test]
fn exit_codes() {
    assert_eq!(scop(&["--version"]).status.code(), Some(0));
    assert_eq!(scop(&[]).status.code(), Some(1));
    assert_eq!(scop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(scop(&["eval", "--net", "x", "--colour", "red"]).status.code(), Some(1));
    assert_eq!(scop(&["run", "--bias", "maybe"]).status.code(), Some(1));
    assert_eq!(scop(&["run", "--control", "dice"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.ckpt");
    let o = scop(&["prune", "--rate", "1.5", "--net", "missing.ckpt", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = scop(&["eval", "--dataset", "synthetic", "--net", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("error:"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let o = scop(&["eval", "--config", bad.to_str().unwrap(), "--net", "x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::mnist_default(0);
    c.dataset = DataConfig {
        name: DatasetName::Synthetic,
        dir: None,
        train_limit: Some(300),
        test_limit: Some(100),
    };
    c.pretrain = TrainConfig {
        lr: 0.05,
        epochs: 1,
        batch: 32,
        ..Default::default()
    };
    c.selection.epochs = 1;
    c.selection.batch = 64;
    c.selection.examples = Some(128);
    c.finetune = TrainConfig {
        lr: 0.01,
        epochs: 1,
        batch: 32,
        ..Default::default()
    };
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&c).unwrap()).unwrap();
    path
}

#[test]
fn prune_rate_zero_reports_no_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let net = dir.path().join("net.ckpt");
    let o = scop(&["pretrain", "--config", cfg, "--out", net.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("resolved config:"));

    let pruned = dir.path().join("pruned.ckpt");
    let args = ["prune", "--config", cfg, "--rate", "0", "--criterion", "l1", "--net", net.to_str().unwrap(), "--out", pruned.to_str().unwrap()];
    let o = scop(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["reduction"]["params_drop_pct"], 0.0);
    assert_eq!(v["reduction"]["flops_drop_pct"], 0.0);

    // second invocation skips the existing output
    let o = scop(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("skipping"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn run_is_deterministic_and_ablate_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = scop(&["run", "--config", cfg, "--seed", "7", "--out-dir", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let recs = read_metrics(&out.join("metrics.jsonl")).unwrap();
        assert_eq!(recs.len(), 1);
        recs[0].without_timestamp()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert_eq!(a.config.seed, 7);

    let out = dir.path().join("abl");
    let o = scop(&["ablate", "--config", cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 8);
    let mut labels: Vec<&str> = recs.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels.len(), 8);
    assert_eq!(stdout(&o).lines().count(), 8);
}
