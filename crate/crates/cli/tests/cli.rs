use std::path::Path;
use std::process::{Command, Output};

use deltaquant::{load_container, QuantArtifact};

fn dq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltaquant"))
        .current_dir(dir)
        .env_remove("DELTAQUANT_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dq(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train-toy", "--dims", "8,16,8", "--steps", "200", "--seed", "7", "--out", "run"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn train_toy_writes_checkpoints_and_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(a.path(), &[]);
    train(b.path(), &[]);
    for name in ["step_000000.dqt", "step_000100.dqt", "step_000200.dqt", "pre.dqt", "post.dqt", "calib.dqt", "losses.csv"] {
        let x = std::fs::read(a.path().join("run").join(name)).unwrap();
        let y = std::fs::read(b.path().join("run").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(dq(d.path(), &["train-toy"]).status.code(), Some(2));
    assert_eq!(dq(d.path(), &["quantize", "--bits"]).status.code(), Some(2));
    assert_eq!(dq(d.path(), &["no-such-command"]).status.code(), Some(2));
    train(d.path(), &[]);
    let out = dq(
        d.path(),
        &["ablate", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--calib", "run/calib.dqt", "--signals", "", "--out", "a.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = dq(
        d.path(),
        &["importance", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--signal", "activation-sq", "--out", "i.dqt"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--calib"));
}

#[test]
fn runtime_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let out = dq(d.path(), &["importance", "--pre", "missing.dqt", "--post", "missing.dqt", "--out", "i.dqt"]);
    assert_eq!(out.status.code(), Some(1));
    train(d.path(), &[]);
    ok(d.path(), &["train-toy", "--dims", "8,12,8", "--steps", "2", "--out", "other"]);
    let out = dq(d.path(), &["importance", "--pre", "run/pre.dqt", "--post", "other/post.dqt", "--out", "i.dqt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    let d = tempfile::tempdir().unwrap();
    let help = String::from_utf8(ok(d.path(), &["quantize", "--help"]).stdout).unwrap();
    for needle in ["--bits", "[default: 3]", "--group-size", "[default: 128]", "--grid-points", "[default: 20]", "--no-normalize"] {
        assert!(help.contains(needle), "missing {needle}:\n{help}");
    }
    let help = String::from_utf8(ok(d.path(), &["importance", "--help"]).stdout).unwrap();
    assert!(help.contains("[default: both-ends-zero]") && help.contains("[default: 10]"));
}

#[test]
fn importance_echoes_defaults_and_slices_runs() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    let base = ["importance", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--signal", "both-ends-zero"];
    ok(d.path(), &[&base[..], &["--out", "i1.dqt"]].concat());
    ok(d.path(), &[&base[..], &["--slices", "2", "--out", "i2.dqt"]].concat());
    let i1 = load_container(d.path().join("i1.dqt")).unwrap();
    let i2 = load_container(d.path().join("i2.dqt")).unwrap();
    assert_eq!(i1.meta_get("y_min"), Some("1"));
    assert_eq!(i1.meta_get("y_max"), Some("10"));
    assert_eq!(i2.meta_get("slices"), Some("2"));
    assert_eq!(i1.names().collect::<Vec<_>>(), i2.names().collect::<Vec<_>>());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    ok(d.path(), &["importance", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--out", "imp.dqt"]);
    std::fs::write(d.path().join("run.cfg"), "# shared\nquant.bits = 4\nsearch.grid_points = 5\n").unwrap();
    let q = ["quantize", "--config", "run.cfg", "--post", "run/post.dqt", "--importance", "imp.dqt", "--calib", "run/calib.dqt"];

    ok(d.path(), &[&q[..], &["--out", "a.dqt", "--report", "a.json"]].concat());
    let a = QuantArtifact::from_tensor_map(&load_container(d.path().join("a.dqt")).unwrap()).unwrap();
    assert_eq!(a.config.bits, 4);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(rep[0]["loss_curve"].as_array().unwrap().len(), 5);

    ok(d.path(), &[&q[..], &["--bits", "3", "--grid-points", "20", "--out", "b.dqt", "--report", "b.json"]].concat());
    let b = QuantArtifact::from_tensor_map(&load_container(d.path().join("b.dqt")).unwrap()).unwrap();
    assert_eq!(b.config.bits, 3);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(rep[0]["loss_curve"].as_array().unwrap().len(), 20);

    std::fs::write(d.path().join("bad.cfg"), "quant.bitz = 4\n").unwrap();
    let out = dq(d.path(), &[&q[..], &["--config", "bad.cfg", "--out", "c.dqt"]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_protection_evaluates_to_zero() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    ok(d.path(), &["importance", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--out", "imp.dqt"]);
    ok(
        d.path(),
        &["quantize", "--post", "run/post.dqt", "--importance", "imp.dqt", "--calib", "run/calib.dqt", "--protect", "1.0", "--out", "q.dqt"],
    );
    ok(d.path(), &["eval", "--post", "run/post.dqt", "--artifact", "q.dqt", "--calib", "run/calib.dqt", "--out", "e.json"]);
    let e: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("e.json")).unwrap()).unwrap();
    for (_, m) in e["per_module"].as_object().unwrap() {
        assert!(m["protected_mse"].as_f64().unwrap() <= 1e-10);
    }
    assert!(e["end_to_end"]["output_mse_fp32_vs_quant"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn ablate_emits_one_row_per_signal_and_fraction() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    ok(
        d.path(),
        &[
            "ablate", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--calib", "run/calib.dqt", "--signals",
            "magnitude,mid,both-ends,both-ends-zero,activation-sq", "--fractions", "0.05,0.3", "--out", "a.csv",
        ],
    );
    let csv = std::fs::read_to_string(d.path().join("a.csv")).unwrap();
    let means: Vec<&str> = csv.lines().filter(|l| l.split(',').nth(2) == Some("mean")).collect();
    assert_eq!(means.len(), 10);
    assert!(means[0].starts_with("magnitude,0.05,") && means[9].starts_with("activation-sq,0.3,"));
}

#[test]
fn curve_accepts_explicit_snapshots() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    ok(
        d.path(),
        &[
            "curve", "--snapshots", "run/step_000000.dqt,run/step_000000.dqt,run/step_000100.dqt", "--final", "run/post.dqt",
            "--calib", "run/calib.dqt", "--out", "c.csv",
        ],
    );
    let csv = std::fs::read_to_string(d.path().join("c.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,mean_loss,slope");
    assert!(rows[1].starts_with("0,degenerate,"));
    // One usable point leaves the slope undefined.
    assert!(rows[2].starts_with("100,") && rows[2].ends_with(",nan"));
}

#[test]
fn threads_flag_and_env_agree() {
    let d = tempfile::tempdir().unwrap();
    train(d.path(), &[]);
    ok(d.path(), &["importance", "--pre", "run/pre.dqt", "--post", "run/post.dqt", "--out", "imp.dqt"]);
    let q = ["quantize", "--post", "run/post.dqt", "--importance", "imp.dqt", "--calib", "run/calib.dqt"];
    ok(d.path(), &[&q[..], &["--threads", "1", "--out", "a.dqt"]].concat());
    let out = Command::new(env!("CARGO_BIN_EXE_deltaquant"))
        .current_dir(d.path())
        .env("DELTAQUANT_THREADS", "3")
        .args([&q[..], &["--out", "b.dqt"]].concat())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.path().join("a.dqt")).unwrap(), std::fs::read(d.path().join("b.dqt")).unwrap());
}
