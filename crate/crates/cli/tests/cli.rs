use std::path::Path;
use std::process::{Command, Output};

fn dhn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhn"))
        .args(args)
        .current_dir(dir)
        .env_remove("DHN_SEED")
        .output()
        .expect("run dhn")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dhn(dir, args);
    assert!(
        out.status.success(),
        "dhn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &[&str] = &[
    "--encoder-dims",
    "16,8",
    "--latent-dim",
    "8",
    "--head-hidden-dim",
    "8",
    "--k-train",
    "8",
    "--k-eval",
    "32",
];

fn synth_and_train(dir: &Path, extra: &[&str]) {
    ok(
        dir,
        &[
            "synth",
            "--n",
            "600",
            "--m",
            "4",
            "--l",
            "3",
            "--kind",
            "continuous",
            "--seed",
            "1",
            "--out",
            "synth",
        ],
    );
    let mut args = vec![
        "train",
        "--data",
        "synth.csv",
        "--schema",
        "synth.schema",
        "--kind",
        "continuous",
        "--epochs",
        "2",
        "--seed",
        "7",
        "--model",
        "m.json",
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn synth_writes_three_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(
            dir,
            &[
                "synth", "--n", "5000", "--m", "10", "--l", "8", "--kind", "count", "--seed", "1",
                "--out", "s",
            ],
        );
    }
    for f in ["s.csv", "s.schema", "s.truth.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_targets_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        dhn(dir.path(), &["synth", "--l", "0"]).status.code(),
        Some(1)
    );
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_train(d, &[]);
    for f in ["m.json", "m.train.txt", "m.config.json", "m.timing.txt"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let out = ok(
        d,
        &[
            "eval",
            "--data",
            "synth.csv",
            "--schema",
            "synth.schema",
            "--model",
            "m.json",
            "--alpha-sweep",
            "0,0.25,0.5,0.75,1",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("no {key} in {text}"))
            .parse()
            .unwrap()
    };
    assert!(value("acc").is_finite() && value("zrmse").is_finite());
    assert_eq!(value("alpha"), 0.5);
    let sweep = std::fs::read_to_string(d.join("m.sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    assert_eq!(sweep.lines().next(), Some("alpha,zrmse"));

    std::fs::write(d.join("one.csv"), "x1,x2,x3,x4\n0.5,-1,2,0\n").unwrap();
    ok(
        d,
        &[
            "predict", "--model", "m.json", "--input", "one.csv", "--output", "p1.csv",
        ],
    );
    ok(
        d,
        &[
            "predict", "--model", "m.json", "--input", "one.csv", "--output", "p2.csv",
        ],
    );
    let p1 = std::fs::read_to_string(d.join("p1.csv")).unwrap();
    assert_eq!(p1, std::fs::read_to_string(d.join("p2.csv")).unwrap());
    let lines: Vec<&str> = p1.lines().collect();
    assert_eq!(lines[0], "p_1,p_2,p_3,yhat_1,yhat_2,yhat_3");
    assert_eq!(lines.len(), 2);
    assert!(lines[1]
        .split(',')
        .all(|v| v.parse::<f64>().unwrap().is_finite()));
    assert_eq!(lines[1].split(',').count(), 6);

    std::fs::write(d.join("empty.csv"), "").unwrap();
    ok(
        d,
        &[
            "predict",
            "--model",
            "m.json",
            "--input",
            "empty.csv",
            "--output",
            "p0.csv",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(d.join("p0.csv")).unwrap(),
        "p_1,p_2,p_3,yhat_1,yhat_2,yhat_3\n"
    );
}

#[test]
fn no_encoder_ablation_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_train(dir.path(), &["--ablation", "no-encoder"]);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.config.json")).unwrap())
            .unwrap();
    assert_eq!(record["config"]["ablation"], "no-encoder");
    assert_eq!(record["config"]["encoder_dims"], serde_json::json!([]));
}

#[test]
fn missing_schema_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["synth", "--n", "100", "--m", "2", "--l", "2", "--out", "s"],
    );
    let out = dhn(
        dir.path(),
        &[
            "train",
            "--data",
            "s.csv",
            "--schema",
            "nowhere.schema",
            "--epochs",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.schema"));
}

#[test]
fn wrong_target_count_fails_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_train(d, &[]);
    ok(
        d,
        &[
            "synth", "--n", "300", "--m", "4", "--l", "5", "--out", "wide",
        ],
    );
    let out = dhn(
        d,
        &[
            "eval",
            "--data",
            "wide.csv",
            "--schema",
            "wide.schema",
            "--model",
            "m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains('5') && msg.contains('3'), "{msg}");
}
