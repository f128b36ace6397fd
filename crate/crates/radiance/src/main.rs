//! Command-line frontend: train fields from scratch, convert them between
//! architectures by distillation, render checkpoints, evaluate against
//! held-out views and verify gradients.

use clap::{Args, Parser, Subcommand};
use radiance::config::{resolve_scene, RunConfig, SceneHandle};
use radiance::distill::{distill, train_from_scratch, write_ndjson, StageRecord};
use radiance::fields::{ArchTag, FieldPair};
use radiance::render::{render_image, write_depth_png, write_png};
use radiance::scene::{evaluate, orbit_cameras, MetricReport};
use radiance::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "radiance", version, about = "Trainable radiance fields with cross-architecture distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a field from scratch on a scene's ground-truth views.
    Train(TrainArgs),
    /// Convert a trained teacher checkpoint into another architecture.
    Distill(DistillArgs),
    /// Render RGB and depth images from a checkpoint on an orbit.
    Render(RenderArgs),
    /// Evaluate a checkpoint against a scene's held-out views.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run-config TOML; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Use the full-sized reference model shapes instead of desk-scale.
    #[arg(long)]
    full_scale: bool,
    /// Built-in scene name (fog|sphere|box|smoke|spike) or a dataset dir.
    #[arg(long)]
    scene: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Architecture: mlp|grid|vm|hash.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint path.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student architecture: mlp|grid|vm|hash.
    #[arg(long)]
    student: Option<String>,
    /// Total distillation steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Steps for stages one and two (stage three takes the rest).
    #[arg(long, num_args = 2, value_names = ["S1", "S2"])]
    stage_steps: Option<Vec<u64>>,
    /// Disable the density clamp in the density loss (ablation arm).
    #[arg(long)]
    no_sigma_clip: bool,
    /// Density clamp bounds for the density loss.
    #[arg(long, num_args = 2, value_names = ["A", "B"], allow_negative_numbers = true)]
    sigma_clip: Option<Vec<f64>>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of orbit poses to render.
    #[arg(long)]
    orbit: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    n_samples: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Architecture to check; omitted means all four.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step. 1e-4 keeps the deep ReLU trunks away from
    /// kink crossings that contaminate the numeric side at coarser steps.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 120)]
    n_params: usize,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args).map(|_| 0),
        Cmd::Distill(args) => cmd_distill(args).map(|_| 0),
        Cmd::Render(args) => cmd_render(args).map(|_| 0),
        Cmd::Eval(args) => cmd_eval(args).map(|_| 0),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Load the config file (if any) and fold the shared flag overrides in.
fn resolved_config(common: &Common, default_out: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut c = RunConfig::default();
            c.run.out = PathBuf::from(default_out);
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.run.out = out.clone();
    }
    if let Some(threads) = common.threads {
        cfg.run.threads = threads;
    }
    if common.full_scale {
        cfg.run.full_scale = true;
    }
    if let Some(scene) = &common.scene {
        cfg.scene.source = scene.clone();
    }
    Ok(cfg)
}

fn prepare(cfg: &RunConfig) -> Result<SceneHandle> {
    radiance::exec::set_threads(cfg.run.threads);
    let cache = cfg.run.out.join("gt-cache");
    resolve_scene(&cfg.scene.source, &cfg.eval, Some(&cache))
}

fn write_metrics(dir: &Path, report: &MetricReport) -> Result<()> {
    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report).expect("serializable report");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolved_config(&args.common, "runs/train")?;
    if let Some(arch) = &args.arch {
        cfg.arch.kind = arch.clone();
    }
    if let Some(steps) = args.steps {
        cfg.optim.steps = steps;
    }
    if let Some(batch) = args.batch_rays {
        cfg.optim.batch_rays = batch;
    }
    if let Some(n) = args.n_samples {
        cfg.render.n_samples = n;
    }
    let arch = cfg.arch_tag()?;
    cfg.write(&cfg.run.out)?;
    let scene = prepare(&cfg)?;

    let (field, log) = train_from_scratch::<f32>(
        &scene.train,
        &cfg.field_config(arch),
        cfg.optim.steps,
        &cfg.train_config(),
        &cfg.render,
    )?;
    field.save(&cfg.run.out.join("field.ckpt"))?;
    write_ndjson(&cfg.run.out.join("train_log.ndjson"), &log)?;
    let report = evaluate(&field, &scene.test, &cfg.render, cfg.run.seed)?;
    write_metrics(&cfg.run.out, &report)?;
    println!(
        "trained {arch} on `{}` for {} steps: PSNR {:.2} dB, SSIM {:.4}",
        scene.label, cfg.optim.steps, report.mean_psnr, report.mean_ssim
    );
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let mut cfg = resolved_config(&args.common, "runs/distill")?;
    if let Some(teacher) = &args.teacher {
        cfg.distill.teacher = Some(teacher.clone());
    }
    if let Some(student) = &args.student {
        cfg.distill.student = Some(student.clone());
    }
    if let Some(steps) = args.steps {
        cfg.distill.total_steps = steps;
    }
    if let Some(stage_steps) = &args.stage_steps {
        cfg.distill.stage_steps = [stage_steps[0], stage_steps[1]];
    }
    if args.no_sigma_clip {
        cfg.distill.no_sigma_clip = true;
    }
    if let Some(clip) = &args.sigma_clip {
        cfg.distill.sigma_clip = [clip[0], clip[1]];
    }
    if let Some(n) = args.n_samples {
        cfg.render.n_samples = n;
    }
    let teacher_path = cfg
        .distill
        .teacher
        .clone()
        .ok_or_else(|| Error::Config("distill needs --teacher PATH".into()))?;
    let student_arch: ArchTag = cfg
        .distill
        .student
        .clone()
        .ok_or_else(|| Error::Config("distill needs --student ARCH".into()))?
        .parse()?;
    cfg.write(&cfg.run.out)?;
    let scene = prepare(&cfg)?;

    let teacher: FieldPair<f32> = FieldPair::load(&teacher_path)?;
    let dcfg = cfg.distill_config()?;
    let (student, log) = distill(&teacher, &cfg.field_config(student_arch), &dcfg, &cfg.render)?;
    student.save(&cfg.run.out.join("student.ckpt"))?;
    write_ndjson(&cfg.run.out.join("distill_log.ndjson"), &log)?;

    let report = evaluate(&student, &scene.test, &cfg.render, cfg.run.seed)?;
    write_metrics(&cfg.run.out, &report)?;
    let stage_ms = |s: u8| median_wall_ms(&log, s);
    let summary = serde_json::json!({
        "teacher": teacher_path,
        "teacher_arch": teacher.arch().as_str(),
        "student_arch": student_arch.as_str(),
        "steps": dcfg.total_steps,
        "stage_median_wall_ms": {
            "stage1": stage_ms(1),
            "stage2": stage_ms(2),
            "stage3": stage_ms(3),
        },
        "mean_psnr": report.mean_psnr,
        "mean_ssim": report.mean_ssim,
    });
    let path = cfg.run.out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    println!(
        "distilled {} -> {student_arch} in {} steps: PSNR {:.2} dB, SSIM {:.4}",
        teacher.arch(),
        dcfg.total_steps,
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn median_wall_ms(log: &[StageRecord], stage: u8) -> Option<f64> {
    let mut times: Vec<f64> = log
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.wall_ms)
        .collect();
    if times.is_empty() {
        return None;
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Some(times[times.len() / 2])
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let mut cfg = resolved_config(&args.common, "runs/render")?;
    if let Some(orbit) = args.orbit {
        cfg.render_out.n_poses = orbit;
    }
    if let Some(n) = args.n_samples {
        cfg.render.n_samples = n;
    }
    cfg.write(&cfg.run.out)?;
    radiance::exec::set_threads(cfg.run.threads);
    let field: FieldPair<f32> = FieldPair::load(&args.checkpoint)?;
    let cams = orbit_cameras(
        cfg.render_out.n_poses,
        cfg.eval.width,
        cfg.eval.height,
        0.8,
        4.0,
        0.0,
    );
    for (i, cam) in cams.iter().enumerate() {
        let (rgb, depth) = render_image(&field, cam, &cfg.render, cfg.run.seed)?;
        write_png(&rgb, &cfg.run.out.join(format!("rgb_{i:03}.png")))?;
        write_depth_png(
            &depth,
            cfg.render.near,
            cfg.render.far,
            &cfg.run.out.join(format!("depth_{i:03}.png")),
        )?;
    }
    println!(
        "rendered {} poses to {}",
        cams.len(),
        cfg.run.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = resolved_config(&args.common, "runs/eval")?;
    if let Some(n) = args.n_samples {
        cfg.render.n_samples = n;
    }
    cfg.write(&cfg.run.out)?;
    let scene = prepare(&cfg)?;
    let field: FieldPair<f32> = FieldPair::load(&args.checkpoint)?;
    let report = evaluate(&field, &scene.test, &cfg.render, cfg.run.seed)?;
    write_metrics(&cfg.run.out, &report)?;
    println!(
        "eval on `{}`: PSNR {:.2} dB, SSIM {:.4} over {} views",
        scene.label,
        report.mean_psnr,
        report.mean_ssim,
        report.per_view.len()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let archs: Vec<ArchTag> = match &args.arch {
        Some(a) => vec![a.parse()?],
        None => ArchTag::ALL.to_vec(),
    };
    let mut worst = 0.0f64;
    for arch in archs {
        let report = radiance::verify::gradcheck_arch(arch, args.seed, args.eps, args.n_params)?;
        println!(
            "gradcheck {arch}: max rel error {:.3e} over {} params (worst idx {}: analytic {:.6e} vs numeric {:.6e})",
            report.max_rel_error,
            report.checked,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
        worst = worst.max(report.max_rel_error);
    }
    Ok(if worst > 1e-3 { 3 } else { 0 })
}
