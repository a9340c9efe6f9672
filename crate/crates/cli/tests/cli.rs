use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deshadow"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str) {
    ok(
        dir,
        &[
            "synth", "--out", name, "--count", "6", "--size", "64", "--seed", seed,
        ],
    );
}

/// Synthesises a small set and trains a few steps on it.
fn trained(dir: &Path) {
    synth(dir, "ds", "1");
    fs::write(
        dir.join("c.toml"),
        "manifest = \"ds/train.tsv\"\nout_dir = \"run\"\niterations = 3\n",
    )
    .unwrap();
    ok(dir, &["train", "--config", "c.toml"]);
}

#[test]
fn synth_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", "5");
    synth(dir.path(), "b", "5");
    for sub in ["images", "masks", "gt"] {
        assert_eq!(
            fs::read_dir(dir.path().join("a").join(sub))
                .unwrap()
                .count(),
            6
        );
    }
    for f in [
        "manifest.tsv",
        "train.tsv",
        "test.tsv",
        "images/00003.png",
        "masks/00003.png",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["synth"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train"]).status.code(), Some(2));
    assert!(!run(dir.path(), &["train", "--config", "nope.toml"])
        .status
        .success());
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let log = fs::read_to_string(d.join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let table = ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--manifest",
            "ds/test.tsv",
        ],
    );
    assert!(table.contains("identity") && table.contains("RMSE"));
    let csv = fs::read_to_string(d.join("run/eval_report.csv")).unwrap();
    assert!(csv
        .lines()
        .any(|l| l == "method,metric,shadow,nonshadow,all"));
    assert!(csv.lines().any(|l| l.starts_with("model,rmse,")));

    ok(
        d,
        &[
            "infer",
            "--checkpoint",
            "run/model.ckpt",
            "--image",
            "ds/images/00000.png",
        ],
    );
    let src = image::image_dimensions(d.join("ds/images/00000.png")).unwrap();
    let out = image::image_dimensions(d.join("ds/images/00000.deshadow.png")).unwrap();
    assert_eq!(src, out);
}

#[test]
fn selftest_passes_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["selftest"]);
    assert!(text.contains("6 of 6 properties passed"));
    ok(dir.path(), &["selftest", "--r", "2.5", "--dim", "7"]);
    let bad = run(dir.path(), &["selftest", "--pole-tolerance", "0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

fn transformed(stdout: &str) -> Vec<f64> {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("transformed:"))
        .unwrap();
    let inner = line.split('[').nth(1).unwrap().trim_end_matches(']');
    inner.split(", ").map(|v| v.parse().unwrap()).collect()
}

#[test]
fn transform_identity_and_explicit_maps() {
    let dir = tempfile::tempdir().unwrap();
    // The default map is the identity, so the output is the projected input.
    let y = transformed(&ok(
        dir.path(),
        &["transform", "--point", "0,3,4", "--r", "2"],
    ));
    for (a, b) in y.iter().zip([0.0, 1.2, 1.6]) {
        assert!((a - b).abs() < 1e-8, "{y:?}");
    }
    // A zero map sends everything to the pole.
    let y = transformed(&ok(
        dir.path(),
        &["transform", "--point", "1,-1,2", "--weight", "0,0;0,0"],
    ));
    for (a, b) in y.iter().zip([0.0, 0.0, 1.0]) {
        assert!((a - b).abs() < 1e-8, "{y:?}");
    }
    assert!(!run(
        dir.path(),
        &["transform", "--point", "1,2,3", "--weight", "1,0,0;0,1,0"]
    )
    .status
    .success());
}

#[test]
fn transform_reads_the_learned_map_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let point: Vec<String> = (1..=16).map(|i| format!("{}", i as f64 / 10.0)).collect();
    let point = point.join(",");
    for side in ["visible", "infrared"] {
        let y = transformed(&ok(
            d,
            &[
                "transform",
                "--checkpoint",
                "run/model.ckpt",
                "--modality",
                side,
                "--point",
                &point,
            ],
        ));
        assert_eq!(y.len(), 16);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "{norm}");
    }
    let wrong = run(
        d,
        &[
            "transform",
            "--checkpoint",
            "run/model.ckpt",
            "--point",
            "1,2,3",
        ],
    );
    assert!(!wrong.status.success());
    assert!(
        run(
            d,
            &[
                "transform",
                "--checkpoint",
                "run/model.ckpt",
                "--point",
                &point,
                "--weight",
                "1"
            ]
        )
        .status
        .code()
            == Some(2)
    );
}
