use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splatfield::gsplat::{encode_cloud, load_checkpoint, save_checkpoint};
use splatfield::oracle::{make_oracle_scene, Dataset};
use splatfield::raster::{render, RenderSettings};
use splatfield::tensor::FeatureMap;
use splatfield::trainer::{initial_model, TrainConfig};
use splatfield_cli::pose_string;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Ground-truth oracle cloud saved as a checkpoint with its codebook.
fn oracle_checkpoint(dir: &Path) -> PathBuf {
    let scene = make_oracle_scene(3, 40, 12, 5).unwrap();
    let path = dir.join("model.gsplat");
    save_checkpoint(&scene.cloud, None, &path).unwrap();
    scene.codebook.save(&dir.join("codebook.txt")).unwrap();
    path
}

fn orbit_pose() -> String {
    pose_string(&splatfield::camera::CameraView::orbit(0.7, 0.5, 3.0, 64, 64).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_iterations_writes_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&[
        "train", "--synthetic", "2", "--per-class", "10", "--decoder-out", "8", "--iters", "0",
        "--feature-dim", "4", "--init-count", "50", "--seed", "3", "--out", s(&out),
    ]);
    let scene = make_oracle_scene(2, 10, 8, 3).unwrap();
    let views = Dataset::from_scene(&scene, None).train_views(true);
    let config = TrainConfig {
        feature_dim: 4,
        init_count: 50,
        seed: 3,
        ..TrainConfig::default()
    };
    let (cloud, decoder) = initial_model(&views, &config).unwrap();
    let written = fs::read(out.join("model.gsplat")).unwrap();
    assert_eq!(written, encode_cloud(&cloud, decoder.as_ref()).unwrap());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(out.join("codebook.txt").exists());
}

#[test]
fn make_dataset_then_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-dataset", "--classes", "2", "--per-class", "15", "--dim", "8", "--seed", "2", "--out", s(&data)]);
    assert!(data.join("views.txt").exists());
    let run_dir = dir.path().join("run");
    let stdout = ok(&[
        "train", "--data", s(&data), "--iters", "20", "--init-count", "100", "--feature-dim", "4", "--out",
        s(&run_dir),
    ]);
    assert!(stdout.contains("held-out psnr"));
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    let (cloud, decoder) = load_checkpoint(&run_dir.join("model.gsplat")).unwrap();
    assert_eq!(cloud.feature_dim(), 4);
    assert_eq!(decoder.unwrap().out_dim(), 8);

    let viz = dir.path().join("viz");
    let stdout = ok(&["viz", "--checkpoint", s(&run_dir.join("model.gsplat")), "--data", s(&data), "--out", s(&viz)]);
    assert!(stdout.contains("miou"));
    assert!(viz.join("0002_seg.png").exists());

    let mismatch = run(&["train", "--data", s(&data), "--decoder-out", "16", "--out", s(&run_dir)]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn bad_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--synthetic", "2", "--gamma", "-1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_outputs_and_background_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let pose = orbit_pose();
    let (black, white) = (dir.path().join("black"), dir.path().join("white"));
    for (out, bg) in [(&black, "0,0,0"), (&white, "1,1,1")] {
        ok(&[
            "render", "--checkpoint", s(&ckpt), "--pose", &pose, "-W", "64", "-H", "64", "--bg", bg, "--out", s(out),
        ]);
    }
    for f in ["rgb.png", "features.png", "seg.png"] {
        assert!(black.join(f).exists(), "{f}");
    }
    let b = FeatureMap::load_png(&black.join("rgb.png")).unwrap();
    let w = FeatureMap::load_png(&white.join("rgb.png")).unwrap();
    let (cloud, _) = load_checkpoint(&ckpt).unwrap();
    let view = splatfield::session::view_from_pose(&pose, 64, 64).unwrap();
    let (out, _) = render(&cloud, &view, &RenderSettings::default()).unwrap();
    let (mut empty, mut covered) = (0, 0);
    for p in 0..b.num_pixels() {
        let alpha = out.alpha[p];
        for c in 0..3 {
            let d = w.data[3 * p + c] - b.data[3 * p + c];
            assert!(d >= -1e-9 && d <= (1.0 - alpha) + 1.0 / 255.0 + 1e-9, "pixel {p}: {d} vs alpha {alpha}");
        }
        if alpha == 0.0 {
            empty += 1;
            assert_eq!(w.data[3 * p], 1.0);
        } else {
            covered += 1;
        }
    }
    assert!(empty > 0 && covered > 0);
}

#[test]
fn render_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "render", "--checkpoint", s(&dir.path().join("missing.gsplat")), "--orbit", "0,0.5,3", "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let ckpt = oracle_checkpoint(dir.path());
    let skewed = "1,0.3,0,0, 0,1,0,0, 0,0,1,3, 0,0,0,1";
    let out = run(&["render", "--checkpoint", s(&ckpt), "--pose", skewed, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("orthonormal"));
}

#[test]
fn edit_scripts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let script = dir.path().join("script.txt");

    fs::write(&script, "# nothing\n\n").unwrap();
    let same = dir.path().join("same.gsplat");
    ok(&["edit", "--checkpoint", s(&ckpt), "--script", s(&script), "--out", s(&same)]);
    assert_eq!(fs::read(&same).unwrap(), fs::read(&ckpt).unwrap());

    fs::write(&script, "extract all-labels\n").unwrap();
    let all = dir.path().join("all.gsplat");
    ok(&["edit", "--checkpoint", s(&ckpt), "--script", s(&script), "--out", s(&all)]);
    let pose = orbit_pose();
    let (ra, rb) = (dir.path().join("ra"), dir.path().join("rb"));
    for (c, o) in [(&ckpt, &ra), (&all, &rb)] {
        ok(&["render", "--checkpoint", s(c), "--pose", &pose, "-W", "48", "-H", "48", "--out", s(o)]);
    }
    assert_eq!(fs::read(ra.join("rgb.png")).unwrap(), fs::read(rb.join("rgb.png")).unwrap());

    fs::write(&script, "delete classA hybrid 0.5\n").unwrap();
    let del = dir.path().join("del.gsplat");
    let stdout = ok(&["edit", "--checkpoint", s(&ckpt), "--script", s(&script), "--out", s(&del)]);
    assert!(stdout.contains("40 selected"), "{stdout}");
    assert_eq!(load_checkpoint(&del).unwrap().0.len(), 80);

    fs::write(&script, "delete zebra\n").unwrap();
    let out = run(&["edit", "--checkpoint", s(&ckpt), "--script", s(&script), "--out", s(&del)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("classA") && err.contains("background"), "{err}");

    fs::write(&script, "explode classA\n").unwrap();
    let out = run(&["edit", "--checkpoint", s(&ckpt), "--script", s(&script), "--out", s(&del)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn query_labels_and_point() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = oracle_checkpoint(dir.path());
    let stdout = ok(&["query", "--checkpoint", s(&ckpt), "--labels", "classB", "--mode", "hard"]);
    assert!(stdout.starts_with("selected 40 of 120"), "{stdout}");

    let mask = dir.path().join("mask.png");
    let stdout = ok(&[
        "query", "--checkpoint", s(&ckpt), "--box", "0,0,64,64", "--orbit", "0.7,0.5,3", "-W", "64", "-H", "64",
        "--mode", "soft", "--mask", s(&mask),
    ]);
    assert!(stdout.starts_with("selected"));
    assert!(mask.exists());

    let out = run(&["query", "--checkpoint", s(&ckpt), "--point", "3,3"]);
    assert_eq!(out.status.code(), Some(2));
}
