use std::path::Path;
use std::process::{Command, Output};

use rawmix_core::augment::{AugmentKind, AugmentSpec};
use rawmix_core::constancy::white_balance;
use rawmix_core::io::{read_raw, write_raw};
use rawmix_core::{RawImage, MsfaPattern};

fn rawmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawmix")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn sample_raw(dir: &Path) -> std::path::PathBuf {
    let pattern = MsfaPattern::imec4x4();
    let data = (0..32 * 32).map(|i| 0.05 + ((i * 37) % 101) as f64 / 120.0).collect();
    let path = dir.join("a.bin");
    write_raw(&path, &RawImage::new(pattern, 32, 32, data).unwrap()).unwrap();
    path
}

fn max_diff(a: &RawImage, b: &RawImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The library result after the f32 round trip of the tensor format.
fn through_f32(img: &RawImage) -> RawImage {
    let data = img.data().iter().map(|&v| v as f32 as f64).collect();
    RawImage::new(img.pattern().clone(), img.height(), img.width(), data).unwrap()
}

#[test]
fn verify_passes_for_every_msfa() {
    for msfa in ["imec2x2", "imec4x4", "imec5x5"] {
        let o = rawmix(&["verify", "--msfa", msfa, "--cases", "5"]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 7);
    }
}

#[test]
fn white_balance_is_idempotent_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_raw(dir.path());
    let (b, c) = (dir.path().join("b.bin"), dir.path().join("c.bin"));
    let est = dir.path().join("est.json");
    assert_eq!(code(&rawmix(&["wb", "--in", p(&a), "--out", p(&b), "--dump-estimate", p(&est)])), 0);
    assert_eq!(code(&rawmix(&["wb", "--in", p(&b), "--out", p(&c)])), 0);
    let (b, c) = (read_raw(&b).unwrap(), read_raw(&c).unwrap());
    assert!(max_diff(&b, &c) < 1e-6);
    assert_eq!(b, through_f32(&white_balance(&read_raw(&a).unwrap())));
    let est: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(est).unwrap()).unwrap();
    assert_eq!(est["per_band"].as_array().unwrap().len(), 16);
}

#[test]
fn unshuffle_then_shuffle_restores_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_raw(dir.path());
    let (cube, back) = (dir.path().join("cube.bin"), dir.path().join("back.bin"));
    assert_eq!(code(&rawmix(&["unshuffle", "--in", p(&a), "--out", p(&cube)])), 0);
    assert_eq!(code(&rawmix(&["shuffle", "--in", p(&cube), "--out", p(&back)])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn augment_matches_the_library_and_honours_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_raw(dir.path());
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"kind":"remodel","fraction":0.3,"seed":1}"#).unwrap();
    let (o1, o2) = (dir.path().join("o1.bin"), dir.path().join("o2.bin"));
    rawmix(&["augment", "--spec", p(&spec), "--seed", "9", "--in", p(&a), "--out", p(&o1)]);
    rawmix(&["augment", "--spec", p(&spec), "--seed", "9", "--in", p(&a), "--out", p(&o2)]);
    let got = read_raw(&o1).unwrap();
    assert_eq!(got, read_raw(&o2).unwrap());
    let want = AugmentSpec::new(AugmentKind::Remodel { fraction: 0.3 }, 9)
        .apply(&read_raw(&a).unwrap())
        .unwrap()
        .image;
    assert_eq!(got, through_f32(&want));

    // directory mode keeps file names
    let out = dir.path().join("augmented");
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    std::fs::copy(&a, input.join("x.bin")).unwrap();
    assert_eq!(code(&rawmix(&["augment", "--spec", p(&spec), "--in", p(&input), "--out", p(&out)])), 0);
    assert!(out.join("x.bin").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let o = rawmix(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    let o = rawmix(&["--json", "frobnicate"]);
    assert_eq!(code(&o), 1);
    let line = String::from_utf8(o.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "usage");
    assert_eq!(code(&rawmix(&["--help"])), 0);
}

#[test]
fn missing_input_is_a_data_error_with_json_report() {
    let o = rawmix(&["wb", "--json", "--in", "/nonexistent/x.bin", "--out", "/tmp/y.bin"]);
    assert_eq!(code(&o), 3);
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "data");
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scenes = d.join("scenes");
    let o = rawmix(&[
        "synth", "--msfa", "imec2x2", "--classes", "3", "--height", "32", "--width", "32", "--patch-size", "8",
        "--seed", "4", "--out", p(&scenes),
    ]);
    assert_eq!(code(&o), 0);
    let patches = d.join("patches");
    assert_eq!(code(&rawmix(&["patches", "--in", p(&scenes.join("dataset.json")), "--out", p(&patches), "--wb"])), 0);
    let manifest = patches.join("patches.json");

    let config = d.join("exp.json");
    std::fs::write(
        &config,
        r#"{"training": {"epochs": 2, "batch_size": 8}, "model": {"n_kernels": 8, "embed_dim": 12, "heads": 2, "ff_dim": 24, "feature_dim": 6}}"#,
    )
    .unwrap();
    let model = d.join("model.ckpt");
    let o = rawmix(&["train", "--in", p(&manifest), "--out", p(&model), "--config", p(&config), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for (model_arg, dim) in [(Some(&model), 6), (None, 1024)] {
        let (tr, te) = (d.join("train.csv"), d.join("test.csv"));
        let mut args = vec!["extract", "--in", p(&manifest)];
        if let Some(m) = model_arg {
            args.extend(["--model", p(m)]);
        }
        let mut a = args.clone();
        a.extend(["--role", "train", "--out", p(&tr)]);
        assert_eq!(code(&rawmix(&a)), 0);
        let mut a = args.clone();
        a.extend(["--role", "test", "--out", p(&te)]);
        assert_eq!(code(&rawmix(&a)), 0);
        let header = std::fs::read_to_string(&te).unwrap();
        assert_eq!(header.lines().next().unwrap().split(',').count(), 3 + dim);
        // 3 classes x (16 / 8) x (32 / 8) test patches
        assert_eq!(header.lines().count(), 1 + 24);

        let pred = d.join("pred.csv");
        let o = rawmix(&["knn", "--train", p(&tr), "--test", p(&te), "--out", p(&pred)]);
        assert_eq!(code(&o), 0);
        assert!(stdout(&o).starts_with("accuracy"));
        assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 25);
    }
}

#[test]
fn bench_writes_reports_and_flags_threshold_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.json");
    let write = |min: f64| {
        std::fs::write(
            &config,
            format!(
                r#"{{"msfa": "imec2x2", "patch_size": 8, "descriptor": "mlbp", "num_classes": 3,
                    "scene_height": 16, "scene_width": 32, "seeds": [0, 1],
                    "thresholds": {{"min_accuracy": {min}}}}}"#
            ),
        )
        .unwrap();
    };
    write(0.0);
    let out = dir.path().join("report");
    let o = rawmix(&["bench", "--config", p(&config), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.csv", "report.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("median accuracy"));
    write(100.5);
    assert_eq!(code(&rawmix(&["bench", "--config", p(&config), "--out", p(&out)])), 2);
}
