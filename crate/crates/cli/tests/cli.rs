use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vseg(args);
    assert!(
        out.status.success(),
        "vseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn inspect_reports_architecture() {
    let report = ok(&["inspect", "--variant", "combined"]);
    assert!(report.contains("receptive field 67x67"));
    assert!(report.contains("receptive field 25x25x25"));
    assert!(report.contains("classifier input: 128"));
    let report = ok(&["inspect", "--variant", "triplanar-separate"]);
    assert!(report.contains("classifier input: 96"));
}

#[test]
fn phantom_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["phantom", "--size", "40", "--seed", "7", "--count", "2", "--out", p(d)]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.txt");
    fs::write(&cfg, "size = 33x34x35\nseed = 2\n").unwrap();
    let out = dir.path().join("d");
    ok(&["phantom", "--config", p(&cfg), "--seed", "9", "--out", p(&out)]);
    let meta = fs::read_to_string(out.join("phantom.txt")).unwrap();
    assert!(meta.contains("size = 33x34x35"));
    assert!(meta.contains("seed = 9"));
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 6] = [
        &["inspect", "--bogus"],
        &["frobnicate"],
        &["inspect", "--variant", "quadplanar"],
        &["segment", "--model", "/no/such/model", "--data", "/no/such", "--out", p(dir.path())],
        &["train", "--data", p(dir.path()), "--out", p(dir.path()), "--variant", "triplanar-shared", "--with-3d"],
        &["phantom", "--size", "8", "--out", p(dir.path())],
    ];
    for args in cases {
        let out = vseg(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    assert_eq!(vseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_labels_and_bad_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["phantom", "--size", "33", "--out", p(&data)]);
    let model = dir.path().join("m");
    let out = vseg(&["train", "--data", p(&data), "--out", p(&model), "--dropout", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
    fs::remove_file(data.join("phantom00_labels.nii")).unwrap();
    let out = vseg(&["train", "--data", p(&data), "--out", p(&model)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no reference labels"));
}

/// train → segment → evaluate → preview, twice with different thread counts,
/// the second run replaying the first run's metadata.
#[test]
fn end_to_end_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["phantom", "--size", "33", "--seed", "1", "--out", p(&data)]);

    let run = |tag: &str, threads: &str, config: Option<&Path>| {
        let model = dir.path().join(format!("model-{tag}"));
        let seg = dir.path().join(format!("seg-{tag}"));
        let mut args = vec!["--threads", threads, "train", "--data", p(&data), "--out", p(&model)];
        match config {
            Some(c) => args.extend(["--config", p(c)]),
            None => args.extend([
                "--variant",
                "combined",
                "--seed",
                "1",
                "--samples-per-class",
                "10",
                "--epochs",
                "1",
                "--batch-size",
                "30",
            ]),
        }
        ok(&args);
        ok(&["--threads", threads, "segment", "--model", p(&model.join("model.vseg")), "--data", p(&data), "--out", p(&seg)]);
        let report = ok(&["evaluate", "--seg", p(&seg), "--data", p(&data), "--out", p(&seg.join("dice.txt"))]);
        (model, seg, report)
    };
    let (model_a, seg_a, report_a) = run("a", "1", None);
    let (model_b, seg_b, report_b) = run("b", "2", Some(&model_a.join("run.txt")));

    let dice: Vec<f64> = report_a
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(dice.len(), 3);
    assert!(dice.iter().all(|d| (0.0..=1.0).contains(d)), "{report_a}");

    assert_eq!(report_a, report_b);
    for file in ["model.vseg", "run.txt"] {
        assert_eq!(fs::read(model_a.join(file)).unwrap(), fs::read(model_b.join(file)).unwrap(), "{file}");
    }
    for file in ["phantom00_seg.nii", "dice.txt"] {
        assert_eq!(fs::read(seg_a.join(file)).unwrap(), fs::read(seg_b.join(file)).unwrap(), "{file}");
    }
    let run_txt = fs::read_to_string(model_a.join("run.txt")).unwrap();
    assert!(run_txt.contains("variant = combined"));
    assert!(run_txt.contains("epoch_loss.0 = "));

    let previews = dir.path().join("png");
    let listed = ok(&[
        "preview",
        "--data",
        p(&data),
        "--case",
        "phantom00",
        "--seg",
        p(&seg_a.join("phantom00_seg.nii")),
        "--out",
        p(&previews),
    ]);
    assert_eq!(listed.lines().count(), 3);
    assert!(previews.join("labels.png").exists());
}
