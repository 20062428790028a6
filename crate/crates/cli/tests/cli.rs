use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--config",
    "bundled:toy-classification",
    "--set",
    "data.train_samples=256",
    "--set",
    "data.valid_samples=200",
    "--set",
    "model.hidden_dims=[16]",
    "--set",
    "total-steps=40",
    "--set",
    "train.checkpoint_every=20",
    "--set",
    "analysis.sensitivity_batches=4",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intradistill"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Failures exit with status 1 and a single `error:` line.
fn assert_one_line_error(o: &Output, needle: &str) {
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains(needle), "{needle:?} not in {err}");
}

#[test]
fn train_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    train(&out, &["--set", "mode=intra"]);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"complete\""));
    assert!(manifest.contains("mode = \"intra\""));
    for f in ["model.ckpt", "metrics.csv", "validation.csv", "sensitivity.csv", "histogram.csv", "sweep.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn train_several_seeds() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--seeds", "1,2"]);
    for s in ["seed-1", "seed-2"] {
        assert!(dir.path().join(s).join("manifest.toml").exists());
    }
    let a = fs::read(dir.path().join("seed-1/model.ckpt")).unwrap();
    let b = fs::read(dir.path().join("seed-2/model.ckpt")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn unknown_key_fails_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "train.bogus=1"]);
    assert_one_line_error(&run(&args), "bogus");
}

#[test]
fn missing_config_file_fails_on_one_line() {
    let o = run(&["train", "--config", "/nonexistent/x.toml"]);
    assert_one_line_error(&o, "/nonexistent/x.toml");
}

#[test]
fn sensitivity_and_sweep_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let runp = dir.path().join("run");
    train(&runp, &[]);
    let ckpt = runp.join("model.ckpt");
    let post = dir.path().join("post");

    let mut args = vec!["sensitivity", "--checkpoint", ckpt.to_str().unwrap(), "--out", post.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--trim", "0", "--sample", "1"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = post.join("sensitivity.csv");
    assert!(report.exists());

    let mut args = vec![
        "sweep",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--out",
        post.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = fs::read_to_string(post.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 11);

    args.extend_from_slice(&["--ratios", "0.5,0.2"]);
    assert_one_line_error(&run(&args), "ratio");
}

#[test]
fn sensitivity_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let runp = dir.path().join("run");
    train(&runp, &[]);
    let ckpt = runp.join("model.ckpt");
    let mut args = vec![
        "sensitivity",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "model.hidden_dims=[8]"]);
    assert_one_line_error(&run(&args), "model.ckpt");
}

#[test]
fn schedule_prints_and_writes() {
    let o = run(&["schedule", "--alpha", "5", "--p", "5", "--q", "10", "--n", "50000", "--samples", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,alpha_prime"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (x, a) = l.split_once(',').unwrap();
            (x.parse().unwrap(), a.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0], (0, 0.0));
    assert_eq!(rows[1].0, 5000);
    assert!((rows[1].1 - 1.0).abs() < 5e-3);
    assert_eq!(rows[2], (10000, 5.0));

    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "schedule", "--alpha", "5", "--p", "5", "--q", "10", "--n", "50000", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 102);

    let o = run(&["schedule", "--alpha", "5", "--p", "10", "--q", "5", "--n", "100"]);
    assert_one_line_error(&o, "sentinel");
}

#[test]
fn compare_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&a, &[]);
    train(&b, &["--set", "mode=intra"]);
    let o = run(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
    assert!(text.contains("intra"));

    let missing = dir.path().join("nope");
    let o = run(&["compare", a.to_str().unwrap(), missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_one_line_error(&o, missing.to_str().unwrap());
    // The OS error appears once, not repeated by the error chain.
    assert_eq!(stderr(&o).matches("No such file").count(), 1, "{}", stderr(&o));
}

#[test]
fn self_distill_requires_a_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "mode=self-distill"]);
    assert_one_line_error(&run(&args), "teacher");
}
