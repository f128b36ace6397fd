//! Run configuration: one human-readable TOML file per run, with every
//! default pre-filled. Unknown keys are rejected, and each command writes the
//! fully resolved config next to its outputs so the run can be reproduced
//! with no command-line flags.

use crate::distill::{DistillConfig, PointMode, TrainConfig};
use crate::error::{Error, Result};
use crate::fields::{ArchTag, DensityClip, FieldConfig};
use crate::render::RenderConfig;
use crate::scene::{analytic_viewset, load_transforms_dataset, AnalyticScene, ViewSet};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub full_scale: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("runs/out"),
            threads: 0,
            full_scale: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// A built-in analytic scene name or a dataset directory.
    pub source: String,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            source: "smoke".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub kind: String,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            kind: "hash".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub steps: u64,
    pub batch_rays: usize,
    pub tv_rate: f64,
    pub l1_rate: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 0.02,
            steps: 2_000,
            batch_rays: 4_096,
            tv_rate: 1e-5,
            l1_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub teacher: Option<PathBuf>,
    pub student: Option<String>,
    pub weights: [f64; 5],
    pub sigma_clip: [f64; 2],
    pub no_sigma_clip: bool,
    pub total_steps: u64,
    pub stage_steps: [u64; 2],
    pub batch_rays: usize,
    pub batch_points: usize,
    pub tv_rate: f64,
    pub l1_rate: f64,
    pub lr: f64,
    pub point_mode: PointMode,
    pub pseudo_radius: f64,
    pub pseudo_elevation_deg: [f64; 2],
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            teacher: None,
            student: None,
            weights: [d.w_feature, d.w_density, d.w_color, d.w_rgb, d.w_reg],
            sigma_clip: [-2.0, 7.0],
            no_sigma_clip: false,
            total_steps: d.total_steps,
            stage_steps: [d.stage1_steps, d.stage2_steps],
            batch_rays: d.batch_rays,
            batch_points: d.batch_points,
            tv_rate: d.tv_rate,
            l1_rate: d.l1_rate,
            lr: d.lr,
            point_mode: d.point_mode,
            pseudo_radius: d.pseudo_radius,
            pseudo_elevation_deg: d.pseudo_elevation_deg,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Quadrature samples for the cached ground-truth renders.
    pub gt_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            width: 128,
            height: 128,
            n_train: 20,
            n_test: 10,
            gt_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOutSection {
    pub n_poses: usize,
}

impl Default for RenderOutSection {
    fn default() -> Self {
        RenderOutSection { n_poses: 8 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub scene: SceneSection,
    pub arch: ArchSection,
    pub render: RenderConfig,
    pub optim: OptimSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
    pub render_out: RenderOutSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            field: "config".into(),
            msg: e.to_string(),
        })
    }

    /// Write the fully resolved config next to the run's outputs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self).expect("serializable config");
        let path = dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn arch_tag(&self) -> Result<ArchTag> {
        self.arch.kind.parse()
    }

    pub fn field_config(&self, arch: ArchTag) -> FieldConfig {
        if self.run.full_scale {
            FieldConfig::paper(arch)
        } else {
            FieldConfig::desk(arch)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.optim.lr,
            batch_rays: self.optim.batch_rays,
            tv_rate: self.optim.tv_rate,
            l1_rate: self.optim.l1_rate,
            seed: self.run.seed,
        }
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = &self.distill;
        let clip = if d.no_sigma_clip {
            None
        } else {
            Some(DensityClip::new(d.sigma_clip[0], d.sigma_clip[1])?)
        };
        let cfg = DistillConfig {
            w_feature: d.weights[0],
            w_density: d.weights[1],
            w_color: d.weights[2],
            w_rgb: d.weights[3],
            w_reg: d.weights[4],
            clip,
            total_steps: d.total_steps,
            stage1_steps: d.stage_steps[0],
            stage2_steps: d.stage_steps[1],
            batch_rays: d.batch_rays,
            batch_points: d.batch_points,
            tv_rate: d.tv_rate,
            l1_rate: d.l1_rate,
            lr: d.lr,
            seed: self.run.seed,
            point_mode: d.point_mode,
            pseudo_radius: d.pseudo_radius,
            pseudo_elevation_deg: d.pseudo_elevation_deg,
            pseudo_size: [self.eval.width, self.eval.height],
            pseudo_fov: 0.8,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A resolved scene: either an analytic oracle with generated orbit views or
/// an on-disk transforms dataset.
pub struct SceneHandle {
    pub label: String,
    pub analytic: Option<AnalyticScene>,
    pub train: ViewSet,
    pub test: ViewSet,
}

/// Resolve `--scene NAME|PATH`. Built-in names produce deterministic orbit
/// view sets with cached high-sample ground truth; anything else must be a
/// dataset directory holding `transforms_train.json` and
/// `transforms_test.json`.
pub fn resolve_scene(
    source: &str,
    eval: &EvalSection,
    cache_dir: Option<&Path>,
) -> Result<SceneHandle> {
    if let Some(scene) = AnalyticScene::by_name(source) {
        let train = analytic_viewset(
            &scene,
            eval.n_train,
            eval.width,
            eval.height,
            eval.gt_samples,
            0.13,
            "train",
            cache_dir,
        )?;
        let test = analytic_viewset(
            &scene,
            eval.n_test,
            eval.width,
            eval.height,
            eval.gt_samples,
            0.57,
            "test",
            cache_dir,
        )?;
        return Ok(SceneHandle {
            label: source.to_string(),
            analytic: Some(scene),
            train,
            test,
        });
    }
    let dir = Path::new(source);
    if !dir.exists() {
        return Err(Error::Config(format!(
            "scene `{source}` is neither a built-in name ({}) nor an existing path",
            AnalyticScene::NAMES.join("|")
        )));
    }
    let train_path = dir.join("transforms_train.json");
    let test_path = dir.join("transforms_test.json");
    for p in [&train_path, &test_path] {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "dataset at `{source}` is missing {}",
                p.display()
            )));
        }
    }
    Ok(SceneHandle {
        label: source.to_string(),
        analytic: None,
        train: load_transforms_dataset(&train_path, "train")?,
        test: load_transforms_dataset(&test_path, "test")?,
    })
}
