use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use copulad::config::resolve_config;
use tempfile::TempDir;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn copulad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copulad"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = copulad(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate_and_train(dir: &Path) {
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    ok(dir, &["generate", "--config", cfg, "--out", "data"]);
    ok(dir, &["train", "--config", cfg, "--data", "data", "--out", "run1"]);
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let tmp = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(tmp.path(), &["generate", "--case", "2", "--seed", "42", "--out", out]);
    }
    for name in ["train.csv", "test.csv", "train.events.csv", "test.events.csv"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs");
    }
    let other = tmp.path().join("c");
    ok(tmp.path(), &["generate", "--case", "2", "--seed", "43", "--out", "c"]);
    assert_ne!(
        fs::read(other.join("train.csv")).unwrap(),
        fs::read(tmp.path().join("a/train.csv")).unwrap()
    );
}

#[test]
fn output_is_never_silently_overwritten() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["generate", "--case", "1", "--out", "data"]);
    let again = copulad(tmp.path(), &["generate", "--case", "1", "--out", "data"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(tmp.path(), &["generate", "--case", "1", "--out", "data", "--force"]);
}

#[test]
fn train_writes_artifacts_and_a_replayable_config() {
    let tmp = TempDir::new().unwrap();
    generate_and_train(tmp.path());
    let run = tmp.path().join("run1");
    for name in ["checkpoint.json", "history.json", "config.toml"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }

    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    let resolved = resolve_config(Some(&echo), &[]).unwrap();
    assert_eq!(resolved.seed, 1);
    assert_eq!(resolved.train.epochs, 3);
    assert_eq!(resolved.out, PathBuf::from("run1"));

    let replay = tmp.path().join("replay.toml");
    fs::write(&replay, &echo).unwrap();
    ok(tmp.path(), &["train", "--config", replay.to_str().unwrap(), "--out", "run2"]);
    for name in ["checkpoint.json", "history.json"] {
        assert_eq!(
            fs::read(run.join(name)).unwrap(),
            fs::read(tmp.path().join("run2").join(name)).unwrap(),
            "{name} differs on replay"
        );
    }
}

#[test]
fn evaluate_score_and_plot_produce_their_files() {
    let tmp = TempDir::new().unwrap();
    generate_and_train(tmp.path());
    ok(tmp.path(), &["evaluate", "--model", "run1/checkpoint.json", "--data", "data/test.csv"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run1/eval/report.json")).unwrap()).unwrap();
    for key in ["precision", "recall", "f1", "auc_roc", "add", "threshold"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert!(tmp.path().join("run1/eval/separation.svg").is_file());

    ok(tmp.path(), &["score", "--model", "run1", "--data", "data", "--out", "scores.csv"]);
    let dump = fs::read_to_string(tmp.path().join("scores.csv")).unwrap();
    assert!(dump.starts_with("window_index,t_end,score,label,prediction"));
    let test_rows = fs::read_to_string(tmp.path().join("data/test.csv")).unwrap().lines().count() - 1;
    assert_eq!(dump.lines().count() - 1, test_rows - 20 + 1);
    assert_eq!(copulad(tmp.path(), &["score", "--model", "run1", "--data", "data", "--out", "scores.csv"]).status.code(), Some(1));

    ok(tmp.path(), &["plot", "--data", "run1/history.json", "--out", "figs"]);
    let svg = fs::read_to_string(tmp.path().join("figs/separation.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    ok(tmp.path(), &["plot", "--data", "run1/eval/report.json", "--out", "figs2"]);
}

#[test]
fn command_line_overrides_reach_the_echo() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["generate", "--config", cfg, "--out", "data"]);
    ok(
        tmp.path(),
        &[
            "train", "--config", cfg, "--data", "data", "--out", "run", "--margin", "2.0", "--epochs", "1",
            "--family", "multivariate", "--base", "gaussian", "--baseline",
        ],
    );
    let echo = resolve_config(Some(&fs::read_to_string(tmp.path().join("run/config.toml")).unwrap()), &[]).unwrap();
    assert_eq!(echo.train.loss.margin, 2.0);
    assert_eq!(echo.train.epochs, 1);
    assert_eq!(echo.train.dependency.family, copulad::dependency::Family::Multivariate);
    assert_eq!(echo.train.dependency.base, copulad::dependency::Base::Gaussian);
    assert_eq!(echo.train.scorer, copulad::pipeline::Scorer::Marginal);
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let tmp = TempDir::new().unwrap();
    let out = copulad(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = copulad(tmp.path(), &["train", "--windw", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    assert_eq!(copulad(tmp.path(), &["generate", "--case", "4"]).status.code(), Some(1));
    assert_eq!(copulad(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nwindw_size = 30\n").unwrap();
    let out = copulad(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.windw_size") && err.contains("window_size"), "{err}");

    fs::write(&cfg, "[train]\nepochs = 2.5\n").unwrap();
    let out = copulad(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = TempDir::new().unwrap();
    let out = copulad(tmp.path(), &["train", "--data", "missing.csv", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let out = copulad(tmp.path(), &["evaluate", "--model", "nowhere", "--data", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn toy_config_runs_all_subcommands_within_a_minute() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    generate_and_train(tmp.path());
    ok(tmp.path(), &["evaluate", "--model", "run1", "--data", "data"]);
    ok(tmp.path(), &["score", "--model", "run1", "--data", "data"]);
    ok(tmp.path(), &["plot", "--data", "run1/history.json"]);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}
