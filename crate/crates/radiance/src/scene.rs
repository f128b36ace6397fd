//! Procedural analytic scenes (closed-form density and color, usable as
//! ground-truth oracles), the transforms-file dataset loader, PSNR/SSIM and
//! the held-out evaluation harness.

use crate::error::{Error, Result};
use crate::fields::{in_bounds, RadianceSample};
use crate::real::Real;
use crate::render::{render_image, Camera, Image, RadianceSource, RenderConfig};
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Analytic scenes
// ---------------------------------------------------------------------------

/// Closed-form scenes on the unit cube. Density is zero outside the bounds;
/// colors stay strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticScene {
    /// Homogeneous medium filling the bounds.
    ConstantFog { sigma: f64, color: [f64; 3] },
    /// Smooth compact blob: sigma_peak * (1 - (r/radius)^2)^2 inside radius.
    SoftSphere {
        center: [f64; 3],
        radius: f64,
        sigma_peak: f64,
        albedo: [f64; 3],
    },
    /// Homogeneous axis-aligned box (hard edges).
    SolidBox {
        min: [f64; 3],
        max: [f64; 3],
        sigma: f64,
        albedo: [f64; 3],
    },
    /// Two soft spheres with different albedos and a view-direction tint.
    TwoSpheres,
    /// Very dense core inside thin haze; trained teachers on this scene span
    /// a wide raw-density range, which is what the clipping ablation needs.
    DenseCore,
}

impl AnalyticScene {
    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "fog" => AnalyticScene::ConstantFog {
                sigma: 2.0,
                color: [0.6, 0.7, 0.8],
            },
            "sphere" => AnalyticScene::SoftSphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.8,
                sigma_peak: 8.0,
                albedo: [0.8, 0.45, 0.3],
            },
            "box" => AnalyticScene::SolidBox {
                min: [-0.6, -0.6, -0.6],
                max: [0.6, 0.6, 0.6],
                sigma: 30.0,
                albedo: [0.3, 0.7, 0.4],
            },
            "smoke" => AnalyticScene::TwoSpheres,
            "spike" => AnalyticScene::DenseCore,
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 5] = ["fog", "sphere", "box", "smoke", "spike"];

    fn eval_f64(&self, x: [f64; 3], d: [f64; 3]) -> (f64, [f64; 3]) {
        match self {
            AnalyticScene::ConstantFog { sigma, color } => (*sigma, *color),
            AnalyticScene::SoftSphere {
                center,
                radius,
                sigma_peak,
                albedo,
            } => {
                let sigma = *sigma_peak * blob(dist(x, *center) / *radius);
                (sigma, *albedo)
            }
            AnalyticScene::SolidBox {
                min,
                max,
                sigma,
                albedo,
            } => {
                let inside = (0..3).all(|a| x[a] >= min[a] && x[a] <= max[a]);
                (if inside { *sigma } else { 0.0 }, *albedo)
            }
            AnalyticScene::TwoSpheres => {
                let s1 = 9.0 * blob(dist(x, [-0.35, -0.1, 0.0]) / 0.55);
                let s2 = 7.0 * blob(dist(x, [0.4, 0.2, 0.15]) / 0.45);
                let sigma = s1 + s2;
                // Albedo blends the per-sphere colors by their density share,
                // then tilts with the view direction so color paths see d.
                let w = if sigma > 1e-9 { s1 / sigma } else { 0.5 };
                let base = [
                    0.85 * w + 0.25 * (1.0 - w),
                    0.35 * w + 0.55 * (1.0 - w),
                    0.25 * w + 0.85 * (1.0 - w),
                ];
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = (base[c] + 0.12 * d[c]).clamp(0.02, 0.98);
                }
                (sigma, rgb)
            }
            AnalyticScene::DenseCore => {
                let r = dist(x, [0.0, 0.0, 0.0]);
                // Steep sigmoid wall at r = 0.45 rising to sigma = 40, plus
                // faint haze elsewhere.
                let wall = 40.0 / (1.0 + (28.0 * (r - 0.45)).exp());
                let haze = 0.08 * blob(r / 1.2);
                let sigma = wall + haze;
                let rgb = [
                    (0.85 - 0.5 * r).clamp(0.05, 0.95),
                    (0.3 + 0.25 * r).clamp(0.05, 0.95),
                    (0.25 + 0.1 * x[2]).clamp(0.05, 0.95),
                ];
                (sigma, rgb)
            }
        }
    }
}

#[inline]
fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Smooth compact falloff: (1 - u^2)^2 for u < 1, else 0.
#[inline]
fn blob(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u;
        v * v
    }
}

/// Exact closed-form density and color; zero density outside the bounds.
pub fn analytic_eval<T: Real>(scene: &AnalyticScene, x: [T; 3], d: [T; 3]) -> RadianceSample<T> {
    let xf = [x[0].to_f64(), x[1].to_f64(), x[2].to_f64()];
    let df = [d[0].to_f64(), d[1].to_f64(), d[2].to_f64()];
    if !in_bounds(xf) {
        return RadianceSample {
            sigma: T::ZERO,
            rgb: [T::cast(0.5); 3],
        };
    }
    let (sigma, rgb) = scene.eval_f64(xf, df);
    RadianceSample {
        sigma: T::cast(sigma),
        rgb: rgb.map(T::cast),
    }
}

impl<T: Real> RadianceSource<T> for AnalyticScene {
    fn sample(&self, x: [T; 3], d: [T; 3]) -> RadianceSample<T> {
        analytic_eval(self, x, d)
    }
}

// ---------------------------------------------------------------------------
// Ground-truth rendering with an on-disk cache
// ---------------------------------------------------------------------------

const GT_CACHE_VERSION: u32 = 1;

fn gt_cache_key(scene: &AnalyticScene, cam: &Camera, cfg: &RenderConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        version: u32,
        scene: &'a AnalyticScene,
        cam: &'a Camera,
        cfg: &'a RenderConfig,
    }
    let json = serde_json::to_vec(&Key {
        version: GT_CACHE_VERSION,
        scene,
        cam,
        cfg,
    })
    .expect("serializable key");
    let mut hasher = sha2::Sha256::new();
    hasher.update(&json);
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// High-sample-count reference render, cached on disk keyed by the content
/// hash of (scene, camera, config). Cache writes are atomic
/// (write-temp-then-rename), so concurrent test runs cannot tear files.
pub fn render_ground_truth(
    scene: &AnalyticScene,
    cam: &Camera,
    cfg: &RenderConfig,
    cache_dir: Option<&Path>,
) -> Result<Image> {
    let cache_path = cache_dir.map(|dir| dir.join(format!("{}.gt", gt_cache_key(scene, cam, cfg))));
    if let Some(path) = &cache_path {
        if path.exists() {
            return read_image_file(path);
        }
    }
    let (image, _) = render_image::<f64, _>(scene, cam, cfg, 0)?;
    if let Some(path) = &cache_path {
        let dir = path.parent().unwrap();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        write_image_file(&image, &tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(image)
}

fn write_image_file(image: &Image, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = serde_json::json!({"width": image.width, "height": image.height});
    let header = serde_json::to_vec(&header).unwrap();
    w.write_all(&(header.len() as u32).to_le_bytes())
        .and_then(|_| w.write_all(&header))
        .map_err(|e| Error::io(path, e))?;
    for px in &image.pixels {
        for c in px {
            w.write_all(&c.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_image_file(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let parse = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        field: "image".into(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(parse("truncated".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[4..4 + hlen]).map_err(|e| parse(e.to_string()))?;
    let width = header["width"].as_u64().ok_or_else(|| parse("width".into()))? as usize;
    let height = header["height"].as_u64().ok_or_else(|| parse("height".into()))? as usize;
    let payload = &bytes[4 + hlen..];
    if payload.len() != width * height * 24 {
        return Err(parse(format!("payload size {}", payload.len())));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for chunk in payload.chunks_exact(24) {
        pixels.push([
            f64::from_le_bytes(chunk[0..8].try_into().unwrap()),
            f64::from_le_bytes(chunk[8..16].try_into().unwrap()),
            f64::from_le_bytes(chunk[16..24].try_into().unwrap()),
        ]);
    }
    Ok(Image {
        width,
        height,
        pixels,
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB over [0,1] images, capped at 99 dB for
/// effectively identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape {
            what: "psnr images",
            expected: a.pixels.len(),
            got: b.pixels.len(),
        });
    }
    let mut mse = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (a.pixels.len() * 3) as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(-10.0 * mse.log10())
}

/// Mean local structural similarity on the channel-mean grayscale image:
/// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape {
            what: "ssim images",
            expected: a.pixels.len(),
            got: b.pixels.len(),
        });
    }
    if a.width < WIN || a.height < WIN {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {WIN}x{WIN} images, got {}x{}",
            a.width, a.height
        )));
    }
    let grey = |img: &Image| -> Vec<f64> {
        img.pixels
            .iter()
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    };
    let ga = grey(a);
    let gb = grey(b);
    // Gaussian window, normalized.
    let mut win = [[0.0f64; WIN]; WIN];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            *w = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            norm += *w;
        }
    }
    for row in &mut win {
        for w in row {
            *w /= norm;
        }
    }
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in 0..=(h - WIN) {
        for cx in 0..=(w - WIN) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let idx = (cy + i) * w + cx + j;
                    mu_a += win[i][j] * ga[idx];
                    mu_b += win[i][j] * gb[idx];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..WIN {
                for j in 0..WIN {
                    let idx = (cy + i) * w + cx + j;
                    let da = ga[idx] - mu_a;
                    let db = gb[idx] - mu_b;
                    var_a += win[i][j] * da * da;
                    var_b += win[i][j] * db * db;
                    cov += win[i][j] * da * db;
                }
            }
            let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// View sets and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub images: Option<Vec<Image>>,
    pub split: String,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_view: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Render every view of the set and compare against its ground-truth images.
pub fn evaluate<T: Real, S: RadianceSource<T>>(
    source: &S,
    views: &ViewSet,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<MetricReport> {
    let images = views
        .images
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("view set has no ground-truth images".into()))?;
    let mut per_view = Vec::with_capacity(views.cameras.len());
    let mut sum_psnr = 0.0;
    let mut sum_ssim = 0.0;
    for (cam, gt) in views.cameras.iter().zip(images) {
        let (img, _) = render_image(source, cam, cfg, seed)?;
        let p = psnr(&img, gt)?;
        let s = ssim(&img, gt)?;
        sum_psnr += p;
        sum_ssim += s;
        per_view.push(ViewMetrics { psnr: p, ssim: s });
    }
    let n = per_view.len().max(1) as f64;
    Ok(MetricReport {
        mean_psnr: sum_psnr / n,
        mean_ssim: sum_ssim / n,
        per_view,
    })
}

/// Deterministic orbit cameras: evenly spaced azimuths with a phase offset,
/// elevations cycling through a small fixed set. Train and test splits use
/// different phases so they never coincide.
pub fn orbit_cameras(
    n: usize,
    width: usize,
    height: usize,
    fov_x: f64,
    radius: f64,
    phase: f64,
) -> Vec<Camera> {
    let elevations = [20.0f64, 42.0, 8.0, 55.0];
    (0..n)
        .map(|i| {
            let az = phase + i as f64 / n as f64 * std::f64::consts::TAU;
            let el = elevations[i % elevations.len()].to_radians();
            let center = [
                radius * el.cos() * az.cos(),
                radius * el.cos() * az.sin(),
                radius * el.sin(),
            ];
            let pose = Camera::look_at_pose(center, [0.0; 3], [0.0, 0.0, 1.0]);
            Camera::from_fov(width, height, fov_x, pose).expect("orbit pose is orthonormal")
        })
        .collect()
}

/// Orbit view set with cached ground-truth renders of an analytic scene.
pub fn analytic_viewset(
    scene: &AnalyticScene,
    n: usize,
    width: usize,
    height: usize,
    gt_samples: usize,
    phase: f64,
    split: &str,
    cache_dir: Option<&Path>,
) -> Result<ViewSet> {
    let cameras = orbit_cameras(n, width, height, 0.8, 4.0, phase);
    let gt_cfg = RenderConfig {
        n_samples: gt_samples,
        ..Default::default()
    };
    let mut images = Vec::with_capacity(n);
    for cam in &cameras {
        images.push(render_ground_truth(scene, cam, &gt_cfg, cache_dir)?);
    }
    Ok(ViewSet {
        cameras,
        images: Some(images),
        split: split.to_string(),
    })
}

// ---------------------------------------------------------------------------
// transforms.json datasets (camera_angle_x + frames of 4x4 matrices)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<TransformsFrame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Load a transforms-file dataset: cameras from the shared horizontal field
/// of view and per-frame camera-to-world matrices, images as linear [0,1]
/// RGB with alpha composited onto white.
pub fn load_transforms_dataset(path: &Path, split: &str) -> Result<ViewSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: TransformsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        field: "transforms".into(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    for (i, frame) in parsed.frames.iter().enumerate() {
        let img_path = resolve_frame_path(base, &frame.file_path).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            field: format!("frames[{i}].file_path"),
            msg: format!("image `{}` not found", frame.file_path),
        })?;
        let image = load_linear_image(&img_path)?;
        let fx = 0.5 * image.width as f64 / (0.5 * parsed.camera_angle_x).tan();
        let pose = [
            frame.transform_matrix[0],
            frame.transform_matrix[1],
            frame.transform_matrix[2],
        ];
        let cam = Camera::new(
            image.width,
            image.height,
            fx,
            fx,
            image.width as f64 * 0.5,
            image.height as f64 * 0.5,
            pose,
        )
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            field: format!("frames[{i}].transform_matrix"),
            msg: e.to_string(),
        })?;
        cameras.push(cam);
        images.push(image);
    }
    Ok(ViewSet {
        cameras,
        images: Some(images),
        split: split.to_string(),
    })
}

fn resolve_frame_path(base: &Path, file_path: &str) -> Option<PathBuf> {
    let direct = base.join(file_path);
    if direct.is_file() {
        return Some(direct);
    }
    let with_png = base.join(format!("{file_path}.png"));
    with_png.is_file().then_some(with_png)
}

fn load_linear_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        let a = px[3] as f64 / 255.0;
        out.pixels[i] = [
            px[0] as f64 / 255.0 * a + (1.0 - a),
            px[1] as f64 / 255.0 * a + (1.0 - a),
            px[2] as f64 / 255.0 * a + (1.0 - a),
        ];
    }
    Ok(out)
}

/// Write a view set in the same transforms layout (used for fixtures and to
/// export pseudo-pose renders).
pub fn write_transforms_dataset(dir: &Path, views: &ViewSet, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = views
        .images
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("cannot write a view set without images".into()))?;
    let cam0 = views
        .cameras
        .first()
        .ok_or_else(|| Error::InvalidInput("empty view set".into()))?;
    let camera_angle_x = 2.0 * (0.5 * cam0.width as f64 / cam0.fx).atan();
    let mut frames = Vec::new();
    for (i, (cam, img)) in views.cameras.iter().zip(images).enumerate() {
        let file_path = format!("./{name}_{i:03}.png");
        crate::render::write_png(img, &dir.join(format!("{name}_{i:03}.png")))?;
        let mut matrix = [[0.0; 4]; 4];
        matrix[3] = [0.0, 0.0, 0.0, 1.0];
        matrix[..3].copy_from_slice(&cam.pose);
        frames.push(TransformsFrame {
            file_path,
            transform_matrix: matrix,
        });
    }
    let file = TransformsFile {
        camera_angle_x,
        frames,
    };
    let path = dir.join(format!("transforms_{name}.json"));
    let json = serde_json::to_string_pretty(&file).expect("serializable");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
