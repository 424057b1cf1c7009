//! End-to-end behaviour of the `fairgkd` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fairgkd_cli::{CliConfig, CommonArgs};

const SMALL: &str = "[data.synthetic]\nnum_nodes = 120\n\n[train]\nepochs = 15\nruns = 2\n";

fn fairgkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairgkd"))
        .args(args)
        .env_remove(fairgkd_cli::OUT_ENV)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_flag_with_default_and_provenance() {
    let o = fairgkd(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--config", "--seed ", "--seeds", "--runs", "--out", "--strategy", "--backbone", "--with-sensitive", "--soft-loss",
    ] {
        let line = text.lines().position(|l| l.trim_start().starts_with(flag)).unwrap_or_else(|| panic!("{flag} missing"));
        let help = text.lines().nth(line + 1).unwrap();
        assert!(help.contains("[default: "), "{flag}: {help}");
        assert!(help.contains("[paper]") || help.contains("[repo]"), "{flag}: {help}");
    }
    assert!(text.contains("weight_decay"));
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fairgkd(&["--no-such-flag", "train"]).status.code(), Some(1));
    assert_eq!(fairgkd(&["baseline", "--strategy", "sideways"]).status.code(), Some(1));

    let cfg = write_config(dir.path(), "[train]\nlearning_rate = 0.1\n");
    let o = fairgkd(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[usage]"));

    let missing = dir.path().join("absent.toml").display().to_string();
    let o = fairgkd(&["prepare", "--dataset", &missing]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[data]"));

    // evaluating a directory without checkpoints is a data error
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("empty").display().to_string();
    assert_eq!(fairgkd(&["evaluate", "--config", &cfg, "--out", &out]).status.code(), Some(2));
}

#[test]
fn malformed_edge_line_is_reported_with_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = fairgkd(&["synth", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let edges = data.join("edges.txt");
    let mut text = fs::read_to_string(&edges).unwrap();
    text.push_str("3 four\n");
    let line = text.lines().count();
    fs::write(&edges, text).unwrap();
    let o = fairgkd(&["prepare", "--dataset", data.join("meta.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&line.to_string()), "{}", stderr(&o));
}

#[test]
fn synthetic_dataset_round_trips_through_prepare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    assert_eq!(fairgkd(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]).status.code(), Some(0));
    let direct = fairgkd(&["prepare", "--config", &cfg]);
    let reloaded = fairgkd(&["prepare", "--dataset", data.join("meta.toml").to_str().unwrap()]);
    assert_eq!(direct.status.code(), Some(0));
    assert_eq!(direct.stdout, reloaded.stdout);
    assert!(String::from_utf8_lossy(&direct.stdout).contains("nodes = 120"));
}

#[test]
fn train_is_deterministic_and_evaluate_reproduces_stored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fairgkd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for doc in ["fairgkd.json", "fairgkd.csv", "vanilla.json", "vanilla.csv", "seed-0/metrics.json", "seed-1/logs/student.csv"] {
        assert_eq!(fs::read(a.join(doc)).unwrap(), fs::read(b.join(doc)).unwrap(), "{doc}");
    }
    let log = fs::read_to_string(a.join("seed-0/logs/student.csv")).unwrap();
    assert!(log.starts_with("epoch,hard_loss,soft_loss,alpha,beta"));
    assert_eq!(log.lines().count(), 16);
    assert!(a.join("seed-1/checkpoints/manifest.json").exists());
    assert!(a.join("seed-1/embeddings/teacher.bin").exists());

    // evaluate picks up the snapshot written next to the reports
    let o = fairgkd(&["evaluate", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("evaluation.json")).unwrap()).unwrap();
    let stored: serde_json::Value = serde_json::from_slice(&fs::read(a.join("fairgkd.json")).unwrap()).unwrap();
    assert_eq!(report["runs"], stored["runs"]);
    assert_eq!(report["config_hash"], stored["config_hash"]);
}

#[test]
fn evaluate_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(fairgkd(&["train", "--config", &cfg, "--out", out, "--runs", "1"]).status.code(), Some(0));
    let o = fairgkd(&["evaluate", "--config", &cfg, "--out", out, "--runs", "1", "--epochs", "16"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn baseline_emits_one_comparable_report_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = fairgkd(&["baseline", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4);
    let mut headers = Vec::new();
    for s in ["full", "nodes-only", "topology-only"] {
        let csv = fs::read_to_string(out.join(format!("baseline-{s}.csv"))).unwrap();
        headers.push(csv.lines().next().unwrap().to_string());
        assert!(out.join(format!("baseline-{s}.json")).exists());
    }
    assert!(headers.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn output_root_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "out = \"from-config\"\n[data.synthetic]\nnum_nodes = 60\n");
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fairgkd"));
        c.args(["synth", "--config", &cfg]).env_remove(fairgkd_cli::OUT_ENV);
        if let Some(e) = env {
            c.env(fairgkd_cli::OUT_ENV, e);
        }
        if let Some(f) = flag {
            c.args(["--out", f]);
        }
        assert_eq!(c.output().unwrap().status.code(), Some(0));
    };
    let flag = dir.path().join("from-flag");
    let env = dir.path().join("from-env");
    run(Some(env.to_str().unwrap()), Some(flag.to_str().unwrap()));
    assert!(flag.join("meta.toml").exists() && !env.exists());
    run(Some(env.to_str().unwrap()), None);
    assert!(env.join("meta.toml").exists());
    run(None, None);
    assert!(dir.path().join("from-config/meta.toml").exists());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochs = 7\nbackbone = \"gin\"\nruns = 3\n");
    let common = CommonArgs {
        config: Some(cfg.into()),
        backbone: Some("gcn".parse().unwrap()),
        seed: Some(5),
        ..CommonArgs::default()
    };
    let r = fairgkd_cli::resolve(&common, &fairgkd_cli::Command::Train, None).unwrap();
    assert_eq!(r.config.train.epochs, 7);
    assert_eq!(r.config.train.backbone.to_string(), "gcn");
    assert_eq!(r.config.train.seeds, Some(vec![5, 6, 7]));
    assert_eq!(r.out, Path::new(fairgkd_cli::DEFAULT_OUT));
    assert_eq!(CliConfig::default().train.epochs, 1000);
    assert!(CliConfig::from_toml("[data]\nbogus = 1\n").is_err());
    assert!(CliConfig::from_toml("typo = 1\n").is_err());
}
