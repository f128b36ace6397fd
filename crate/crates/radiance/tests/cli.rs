//! End-to-end checks of the command-line interface: artifact layout, exit
//! codes, determinism of reruns and the resolved-config echo.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radiance"))
}

/// Small run config so CLI tests stay quick: tiny views, few samples.
fn write_small_config(dir: &Path, out: &Path) -> PathBuf {
    let text = format!(
        r#"
[run]
seed = 7
out = "{out}"

[scene]
source = "smoke"

[arch]
kind = "hash"

[render]
n_samples = 12

[optim]
steps = 6
batch_rays = 32

[distill]
total_steps = 6
stage_steps = [2, 2]
batch_rays = 16
batch_points = 64

[eval]
width = 24
height = 24
n_train = 2
n_test = 2
gt_samples = 32

[render_out]
n_poses = 2
"#,
        out = out.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn radiance");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_writes_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_small_config(tmp.path(), &out_dir);

    run_ok(bin().args(["train", "--config"]).arg(&config));
    for artifact in ["config.toml", "field.ckpt", "train_log.ndjson", "metrics.json"] {
        assert!(out_dir.join(artifact).is_file(), "missing {artifact}");
    }
    let ckpt = std::fs::read(out_dir.join("field.ckpt")).unwrap();
    let metrics = std::fs::read(out_dir.join("metrics.json")).unwrap();

    // The resolved config reruns to identical outputs with no extra flags.
    run_ok(bin().args(["train", "--config"]).arg(out_dir.join("config.toml")));
    assert_eq!(ckpt, std::fs::read(out_dir.join("field.ckpt")).unwrap());
    assert_eq!(metrics, std::fs::read(out_dir.join("metrics.json")).unwrap());
}

#[test]
fn zero_steps_checkpoints_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_small_config(tmp.path(), &out_dir);
    run_ok(bin().args(["train", "--steps", "0", "--config"]).arg(&config));
    assert!(out_dir.join("field.ckpt").is_file());
}

#[test]
fn missing_scene_exits_2_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_small_config(tmp.path(), &out_dir);
    let out = bin()
        .args(["train", "--scene", "/no/such/dataset", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/no/such/dataset"), "{stderr}");
}

#[test]
fn unknown_arch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_small_config(tmp.path(), &out_dir);
    let out = bin()
        .args(["train", "--arch", "octree", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn distill_pipeline_and_plenoxels_gating() {
    let tmp = tempfile::tempdir().unwrap();
    let train_out = tmp.path().join("teacher");
    let config = write_small_config(tmp.path(), &train_out);
    run_ok(bin().args(["train", "--config"]).arg(&config));

    // Distill the tiny teacher into a plenoxels-style student; the log's
    // feature-loss column must be identically zero.
    let distill_out = tmp.path().join("student");
    let config2 = {
        let path = tmp.path().join("run2.toml");
        let text = std::fs::read_to_string(&config)
            .unwrap()
            .replace(&format!("{}", train_out.display()), &format!("{}", distill_out.display()));
        std::fs::write(&path, text).unwrap();
        path
    };
    run_ok(
        bin()
            .args(["distill", "--student", "plenoxels", "--teacher"])
            .arg(train_out.join("field.ckpt"))
            .args(["--config"])
            .arg(&config2),
    );
    for artifact in ["student.ckpt", "distill_log.ndjson", "report.json", "metrics.json"] {
        assert!(distill_out.join(artifact).is_file(), "missing {artifact}");
    }
    let log = std::fs::read_to_string(distill_out.join("distill_log.ndjson")).unwrap();
    for line in log.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["l_feature"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn invalid_student_arch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_small_config(tmp.path(), &out_dir);
    let out = bin()
        .args([
            "distill",
            "--teacher",
            "/nonexistent.ckpt",
            "--student",
            "voxelhash",
            "--config",
        ])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_orbit_writes_rgb_and_depth_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let train_out = tmp.path().join("teacher");
    let config = write_small_config(tmp.path(), &train_out);
    run_ok(bin().args(["train", "--steps", "2", "--config"]).arg(&config));

    let render_out = tmp.path().join("frames");
    let render = |out: &Path| {
        run_ok(
            bin()
                .args(["render", "--orbit", "3", "--checkpoint"])
                .arg(train_out.join("field.ckpt"))
                .args(["--config"])
                .arg(&config)
                .args(["--out"])
                .arg(out),
        );
    };
    render(&render_out);
    for i in 0..3 {
        assert!(render_out.join(format!("rgb_{i:03}.png")).is_file());
        assert!(render_out.join(format!("depth_{i:03}.png")).is_file());
    }
    let first = std::fs::read(render_out.join("rgb_000.png")).unwrap();
    let render_out2 = tmp.path().join("frames2");
    render(&render_out2);
    assert_eq!(first, std::fs::read(render_out2.join("rgb_000.png")).unwrap());
}

#[test]
fn eval_reports_metrics_json() {
    let tmp = tempfile::tempdir().unwrap();
    let train_out = tmp.path().join("teacher");
    let config = write_small_config(tmp.path(), &train_out);
    run_ok(bin().args(["train", "--steps", "2", "--config"]).arg(&config));

    let eval_out = tmp.path().join("eval");
    run_ok(
        bin()
            .args(["eval", "--checkpoint"])
            .arg(train_out.join("field.ckpt"))
            .args(["--config"])
            .arg(&config)
            .args(["--out"])
            .arg(&eval_out),
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap())
            .unwrap();
    assert!(report["mean_psnr"].as_f64().unwrap().is_finite());
    assert_eq!(report["per_view"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_passes_for_the_grid_arch() {
    let out = run_ok(bin().args(["gradcheck", "--arch", "grid", "--n-params", "40"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck grid"), "{stdout}");
}
