use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depthdeblur"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn depthdeblur")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn synth(dir: &Path, seed: u64, size: usize) {
    let out = run(&[
        "synth",
        "--procedural",
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
        "--sigma-a",
        "0.05",
        "--sigma-t",
        "0.05",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
}

#[test]
fn synth_records_seed_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 7, 48);
    synth(&b, 7, 48);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed = 7"), "{manifest}");
    assert_eq!(fs::read(a.join("blurry.png")).unwrap(), fs::read(b.join("blurry.png")).unwrap());
}

#[test]
fn synth_from_manifest_reproduces_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 3, 40);
    let out = run(&[
        "synth",
        "--manifest",
        a.join("manifest.toml").to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    for f in ["blurry.png", "clean.png", "depth.pfm", "true_flow.pfm", "true_pose.txt", "manifest.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn negative_sigma_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--procedural", "--sigma-a", "-1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
}

#[test]
fn deblur_eval_and_render_on_a_tiny_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 1, 32);
    let b = bundle.to_str().unwrap();
    let out = run(&["deblur", "--bundle", b, "--levels", "1", "--starts", "3"]);
    assert!(out.status.success(), "{}", text(&out));
    let result = bundle.join("result");
    for f in ["latent.png", "pose.txt", "flow.pfm", "energy.csv", "status.txt"] {
        assert!(result.join(f).exists(), "{f}");
    }
    let pose = fs::read_to_string(result.join("pose.txt")).unwrap();
    let values: Vec<f64> = pose.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(values.len(), 6);
    assert!(values.iter().all(|v| v.is_finite()));
    let csv = fs::read_to_string(result.join("energy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("level,iteration,energy"));
    assert!(fs::read_to_string(result.join("status.txt")).unwrap().contains("ok = true"));

    let out = run(&["eval", "--bundle", b]);
    assert!(out.status.success(), "{}", text(&out));
    let report = String::from_utf8_lossy(&out.stdout).to_string();
    for key in ["psnr=", "ssim=", "flowErrorPct="] {
        assert!(report.contains(key), "{report}");
    }
    assert!(result.join("report.toml").exists());

    let frames = tmp.path().join("frames");
    let out = run(&["render-seq", "--bundle", b, "--frames", "4", "--out", frames.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(fs::read_dir(&frames).unwrap().count(), 4);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 2, 32);
    let result = bundle.join("result");
    fs::create_dir_all(&result).unwrap();
    fs::copy(bundle.join("clean.png"), result.join("latent.png")).unwrap();
    fs::copy(bundle.join("true_pose.txt"), result.join("pose.txt")).unwrap();
    fs::copy(bundle.join("true_flow.pfm"), result.join("flow.pfm")).unwrap();
    let out = run(&["eval", "--bundle", bundle.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let report = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(report.contains("psnr=inf\n"), "{report}");
    assert!(report.contains("ssim=1\n"), "{report}");
    assert!(report.contains("flowErrorPct=0\n"), "{report}");
}

#[test]
fn eval_with_mismatched_dimensions_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 2, 32);
    synth(&b, 2, 40);
    let result = a.join("result");
    fs::create_dir_all(&result).unwrap();
    fs::copy(b.join("clean.png"), result.join("latent.png")).unwrap();
    fs::copy(b.join("true_pose.txt"), result.join("pose.txt")).unwrap();
    fs::copy(b.join("true_flow.pfm"), result.join("flow.pfm")).unwrap();
    let out = run(&["eval", "--bundle", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("dimension mismatch"));
}

#[test]
fn eval_without_ground_truth_explains() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 2, 32);
    fs::remove_file(bundle.join("clean.png")).unwrap();
    let out = run(&["eval", "--bundle", bundle.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("ground-truth clean image not found"), "{}", text(&out));
}

#[test]
fn missing_depth_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 2, 32);
    fs::remove_file(bundle.join("depth.pfm")).unwrap();
    let out = run(&["deblur", "--bundle", bundle.to_str().unwrap(), "--levels", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("depth map not found"), "{}", text(&out));
}

#[test]
fn render_seq_rejects_single_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["render-seq", "--bundle", ".", "--frames", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
}

#[test]
fn render_seq_with_zero_pose_repeats_the_latent() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 5, 32);
    let result = bundle.join("result");
    fs::create_dir_all(&result).unwrap();
    fs::copy(bundle.join("clean.png"), result.join("latent.png")).unwrap();
    fs::write(result.join("pose.txt"), "0 0 0 0 0 0\n").unwrap();
    fs::copy(bundle.join("true_flow.pfm"), result.join("flow.pfm")).unwrap();
    let frames = tmp.path().join("f");
    let out = run(&["render-seq", "--bundle", bundle.to_str().unwrap(), "--frames", "3", "--out", frames.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let mut names: Vec<_> = fs::read_dir(&frames).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    let first = fs::read(&names[0]).unwrap();
    assert!(names.iter().all(|n| fs::read(n).unwrap() == first));
    assert_eq!(first, fs::read(bundle.join("clean.png")).unwrap());
}

#[test]
fn glob_processes_every_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("x1"), 1, 24);
    synth(&tmp.path().join("x2"), 2, 24);
    let pattern = tmp.path().join("x*");
    let out = bin()
        .args(["deblur", "--glob", pattern.to_str().unwrap(), "--levels", "1", "--starts", "2"])
        .env("DEPTHDEBLUR_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    for d in ["x1", "x2"] {
        assert!(tmp.path().join(d).join("result").join("pose.txt").exists());
    }
}

#[test]
fn config_file_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("b");
    synth(&bundle, 1, 24);
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "pyramidLevels = 0\n").unwrap();
    let b = bundle.to_str().unwrap();
    let out = run(&["deblur", "--bundle", b, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    let out = run(&["deblur", "--bundle", b, "--config", cfg.to_str().unwrap(), "--levels", "1", "--starts", "2"]);
    assert!(out.status.success(), "{}", text(&out));
}
