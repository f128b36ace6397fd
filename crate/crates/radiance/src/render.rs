//! Cameras, rays and the emission-absorption quadrature along them.
//!
//! Rendering parallelizes over pixels or rays against a frozen field
//! snapshot. Depth-sample jitter comes from per-ray seed streams, so results
//! do not depend on worker count or batch composition.

use crate::error::{Error, Result};
use crate::fields::{in_bounds, FieldPair, RadianceSample};
use crate::real::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Cameras and rays
// ---------------------------------------------------------------------------

/// Pinhole camera with a 3x4 camera-to-world pose. The camera looks along its
/// local -z axis, x right, y up (so pixel rows grow downwards).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rows of the camera-to-world matrix: rotation columns are the camera
    /// axes in world space, last column is the camera center.
    pub pose: [[f64; 4]; 3],
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: [[f64; 4]; 3],
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            pose,
        };
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let mut dot = 0.0;
                for r in 0..3 {
                    dot += cam.pose[r][i] * cam.pose[r][j];
                }
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "camera rotation is not orthonormal (col {i} . col {j} = {dot})"
                    )));
                }
            }
        }
        Ok(cam)
    }

    /// Square-pixel camera from a horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x: f64, pose: [[f64; 4]; 3]) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera::new(
            width,
            height,
            fx,
            fx,
            width as f64 * 0.5,
            height as f64 * 0.5,
            pose,
        )
    }

    /// Camera-to-world pose at `center` looking at `target`, `up` fixing roll.
    pub fn look_at_pose(center: [f64; 3], target: [f64; 3], up: [f64; 3]) -> [[f64; 4]; 3] {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        // Camera z points away from the target (the view direction is -z).
        let z = normalize(sub(center, target));
        let x = normalize(cross(up, z));
        let y = cross(z, x);
        [
            [x[0], y[0], z[0], center[0]],
            [x[1], y[1], z[1], center[1]],
            [x[2], y[2], z[2], center[2]],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

/// Ray through a pixel center (plus an optional sub-pixel jitter in [0,1)^2),
/// direction normalized and rotated into world space.
pub fn ray_for_pixel(cam: &Camera, i: usize, j: usize, jitter: Option<[f64; 2]>) -> Result<Ray> {
    if i >= cam.width {
        return Err(Error::Range {
            index: i,
            extent: cam.width,
        });
    }
    if j >= cam.height {
        return Err(Error::Range {
            index: j,
            extent: cam.height,
        });
    }
    let [jx, jy] = jitter.unwrap_or([0.5, 0.5]);
    let dir_cam = [
        (i as f64 + jx - cam.cx) / cam.fx,
        -((j as f64 + jy - cam.cy) / cam.fy),
        -1.0,
    ];
    let mut dir = [0.0; 3];
    for r in 0..3 {
        dir[r] =
            cam.pose[r][0] * dir_cam[0] + cam.pose[r][1] * dir_cam[1] + cam.pose[r][2] * dir_cam[2];
    }
    Ok(Ray {
        origin: cam.center(),
        dir: normalize(dir),
    })
}

// ---------------------------------------------------------------------------
// Depth sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    pub stratified: bool,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 128,
            near: 2.0,
            far: 6.0,
            stratified: false,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Config(format!(
                "render range must satisfy 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::Config(format!(
                "need at least 2 samples per ray, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// Strictly increasing depths in `[near, far]` and the gaps between them; the
/// last gap runs to `far`. Non-stratified sampling uses bin centers;
/// stratified sampling jitters uniformly inside each bin, driven entirely by
/// `seed`.
pub fn sample_along_ray(_ray: &Ray, cfg: &RenderConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.n_samples;
    let bin = (cfg.far - cfg.near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    if cfg.stratified {
        let mut rng: rand_chacha::ChaCha8Rng = rand_chacha::rand_core::SeedableRng::seed_from_u64(seed);
        for i in 0..n {
            ts.push(cfg.near + (i as f64 + rng.gen_range(0.0..1.0)) * bin);
        }
    } else {
        for i in 0..n {
            ts.push(cfg.near + (i as f64 + 0.5) * bin);
        }
    }
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(cfg.far - ts[n - 1]);
    (ts, deltas)
}

/// Per-pixel jitter seed for a base seed; callers that reproduce a single
/// pixel's ray outside `render_image` use the same derivation.
pub fn pixel_seed(seed: u64, pixel_index: u64) -> u64 {
    crate::rng::stream_key(seed, "ray-jitter", pixel_index)
}

// ---------------------------------------------------------------------------
// Compositing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeOut<T> {
    pub rgb: [T; 3],
    pub acc: T,
    pub depth: T,
}

/// Emission-absorption quadrature. Opacity uses `max(sigma, 0)` so negative
/// raw densities act as empty space; expected depth is normalized by the
/// accumulated opacity; remaining transmittance is filled with background.
pub fn composite<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    ts: &[T],
    background: [T; 3],
) -> Result<CompositeOut<T>> {
    let n = sigmas.len();
    if colors.len() != n || deltas.len() != n || ts.len() != n {
        return Err(Error::Shape {
            what: "composite inputs",
            expected: n,
            got: colors.len().min(deltas.len()).min(ts.len()),
        });
    }
    let mut transmittance = T::ONE;
    let mut rgb = [T::ZERO; 3];
    let mut acc = T::ZERO;
    let mut depth_num = T::ZERO;
    for i in 0..n {
        let passthrough = (-sigmas[i].max(T::ZERO) * deltas[i]).exp();
        let weight = transmittance * (T::ONE - passthrough);
        for c in 0..3 {
            rgb[c] += weight * colors[i][c];
        }
        acc += weight;
        depth_num += weight * ts[i];
        transmittance *= passthrough;
    }
    let depth = depth_num / acc.max(T::cast(1e-10));
    for c in 0..3 {
        rgb[c] += (T::ONE - acc) * background[c];
    }
    Ok(CompositeOut { rgb, acc, depth })
}

/// Backward of [`composite`] for the pixel-color output: given dL/d(pixel),
/// fills dL/d(sigma_i) and dL/d(color_i). Accumulated opacity and depth are
/// not differentiated (no loss reads them).
pub fn composite_backward<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    background: [T; 3],
    d_pixel: [T; 3],
    d_sigmas: &mut [T],
    d_colors: &mut [[T; 3]],
) {
    let n = sigmas.len();
    // Forward again to get weights and transmittances.
    let mut weights = vec![T::ZERO; n];
    let mut trans_next = vec![T::ZERO; n]; // transmittance after sample i
    let mut transmittance = T::ONE;
    for i in 0..n {
        let passthrough = (-sigmas[i].max(T::ZERO) * deltas[i]).exp();
        weights[i] = transmittance * (T::ONE - passthrough);
        transmittance *= passthrough;
        trans_next[i] = transmittance;
    }
    // g_i = dL/d(weight_i) = d_pixel . (color_i - background).
    // dL/d(sigma_i) = delta_i * (T_{i+1} g_i - sum_{j>i} w_j g_j); zero where
    // the opacity clamp is active (raw sigma <= 0).
    let mut suffix = T::ZERO;
    for i in (0..n).rev() {
        let mut g = T::ZERO;
        for c in 0..3 {
            g += d_pixel[c] * (colors[i][c] - background[c]);
            d_colors[i][c] = d_pixel[c] * weights[i];
        }
        d_sigmas[i] = if sigmas[i] > T::ZERO {
            deltas[i] * (trans_next[i] * g - suffix)
        } else {
            T::ZERO
        };
        suffix += weights[i] * g;
    }
}

// ---------------------------------------------------------------------------
// Radiance sources and per-ray tracing
// ---------------------------------------------------------------------------

/// Anything that yields density and color at a point: a trained field (with
/// out-of-bounds points treated as empty space) or an analytic scene.
pub trait RadianceSource<T: Real>: Sync {
    fn sample(&self, x: [T; 3], d: [T; 3]) -> RadianceSample<T>;
}

impl<T: Real> RadianceSource<T> for FieldPair<T> {
    fn sample(&self, x: [T; 3], d: [T; 3]) -> RadianceSample<T> {
        if !in_bounds(x) {
            return RadianceSample {
                sigma: T::ZERO,
                rgb: [T::cast(0.5); 3],
            };
        }
        let mut feat = vec![T::ZERO; self.feature_dim()];
        self.phi1_into(x, d, &mut feat);
        self.phi2_raw(&feat, d)
    }
}

/// Everything a distillation loss needs to know about one rendered ray.
#[derive(Debug, Clone)]
pub struct RayOutput<T> {
    pub rgb: [T; 3],
    pub acc: T,
    pub depth: T,
    pub ts: Vec<T>,
    pub sigmas: Vec<T>,
    pub colors: Vec<[T; 3]>,
}

/// March one ray through a radiance source.
pub fn trace_ray<T: Real, S: RadianceSource<T>>(
    source: &S,
    ray: &Ray,
    cfg: &RenderConfig,
    jitter_seed: u64,
) -> RayOutput<T> {
    let (ts64, deltas64) = sample_along_ray(ray, cfg, jitter_seed);
    let origin = ray.origin.map(T::cast);
    let dir = ray.dir.map(T::cast);
    let n = ts64.len();
    let mut ts = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let t = T::cast(ts64[i]);
        let x = [
            origin[0] + t * dir[0],
            origin[1] + t * dir[1],
            origin[2] + t * dir[2],
        ];
        let s = source.sample(x, dir);
        ts.push(t);
        deltas.push(T::cast(deltas64[i]));
        sigmas.push(s.sigma);
        colors.push(s.rgb);
    }
    let background = cfg.background.map(T::cast);
    let out = composite(&sigmas, &colors, &deltas, &ts, background).expect("equal lengths");
    RayOutput {
        rgb: out.rgb,
        acc: out.acc,
        depth: out.depth,
        ts,
        sigmas,
        colors,
    }
}

/// Render a batch of rays; per-ray jitter seeds travel with the rays so the
/// output only depends on (ray, seed) pairs, not on batch order or workers.
pub fn render_rays_batched<T: Real, S: RadianceSource<T>>(
    source: &S,
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<Vec<RayOutput<T>>> {
    cfg.validate()?;
    if seeds.len() != rays.len() {
        return Err(Error::Shape {
            what: "ray seeds",
            expected: rays.len(),
            got: seeds.len(),
        });
    }
    if rays.is_empty() {
        return Err(Error::InvalidInput("empty ray batch".into()));
    }
    let chunks = crate::exec::map_chunks(rays.len(), 16, |range| {
        range
            .map(|i| trace_ray(source, &rays[i], cfg, seeds[i]))
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Linear-light RGB image; values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.pixels[y * self.width + x] = value;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Render every pixel of a view: the color image plus expected depth.
pub fn render_image<T: Real, S: RadianceSource<T>>(
    source: &S,
    cam: &Camera,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(Image, DepthMap)> {
    cfg.validate()?;
    let n_pixels = cam.width * cam.height;
    let rows = crate::exec::map_chunks(n_pixels, 16, |range| {
        let mut out = Vec::with_capacity(range.len());
        for idx in range {
            let (x, y) = (idx % cam.width, idx / cam.width);
            let ray = ray_for_pixel(cam, x, y, None).expect("pixel in frame");
            let traced = trace_ray(source, &ray, cfg, pixel_seed(seed, idx as u64));
            out.push((
                [
                    traced.rgb[0].to_f64(),
                    traced.rgb[1].to_f64(),
                    traced.rgb[2].to_f64(),
                ],
                traced.depth.to_f64(),
            ));
        }
        out
    });
    let mut image = Image::new(cam.width, cam.height);
    let mut depth = DepthMap {
        width: cam.width,
        height: cam.height,
        values: vec![0.0; n_pixels],
    };
    let mut idx = 0;
    for row in rows {
        for (rgb, d) in row {
            image.pixels[idx] = rgb;
            depth.values[idx] = d;
            idx += 1;
        }
    }
    Ok((image, depth))
}

// ---------------------------------------------------------------------------
// Rendered-pixel MSE with gradients (the training workhorse)
// ---------------------------------------------------------------------------

/// Mean squared error between rendered ray colors and target pixels,
/// accumulating parameter gradients into `grads`. Per-ray work fans out over
/// chunks; chunk gradients are reduced in chunk order so results are
/// independent of worker count.
///
/// The returned loss is the raw MSE; gradients are scaled by `grad_weight`
/// (the loss weight this term carries in a larger objective).
pub fn render_mse_loss_grad<T: Real>(
    field: &FieldPair<T>,
    rays: &[Ray],
    seeds: &[u64],
    targets: &[[T; 3]],
    cfg: &RenderConfig,
    grad_weight: f64,
    grads: &mut [T],
) -> Result<T> {
    cfg.validate()?;
    let n = rays.len();
    if seeds.len() != n || targets.len() != n {
        return Err(Error::Shape {
            what: "render mse batch",
            expected: n,
            got: seeds.len().min(targets.len()),
        });
    }
    let grad_len = grads.len();
    let scale = T::cast(grad_weight * 2.0 / (3.0 * n as f64));
    let n_chunks = crate::exec::grad_chunk_count(grad_len);
    let background = cfg.background.map(T::cast);
    let chunks = crate::exec::map_chunks(n, n_chunks, |range| {
        let mut chunk_grads = vec![T::ZERO; grad_len];
        let mut sq_sum = T::ZERO;
        let feat_dim = field.feature_dim();
        let mut dfeat = vec![T::ZERO; feat_dim];
        let mut feat = vec![T::ZERO; feat_dim];
        for i in range {
            let traced: RayOutput<T> = trace_ray(field, &rays[i], cfg, seeds[i]);
            let mut d_pixel = [T::ZERO; 3];
            for c in 0..3 {
                let diff = traced.rgb[c] - targets[i][c];
                sq_sum += diff * diff;
                d_pixel[c] = scale * diff;
            }
            let k = traced.ts.len();
            let deltas = deltas_from(&traced.ts, cfg);
            let mut d_sigmas = vec![T::ZERO; k];
            let mut d_colors = vec![[T::ZERO; 3]; k];
            composite_backward(
                &traced.sigmas,
                &traced.colors,
                &deltas,
                background,
                d_pixel,
                &mut d_sigmas,
                &mut d_colors,
            );
            let origin = rays[i].origin.map(T::cast);
            let dir = rays[i].dir.map(T::cast);
            for s in 0..k {
                if d_sigmas[s] == T::ZERO && d_colors[s] == [T::ZERO; 3] {
                    continue;
                }
                let t = traced.ts[s];
                let x = [
                    origin[0] + t * dir[0],
                    origin[1] + t * dir[1],
                    origin[2] + t * dir[2],
                ];
                if !in_bounds(x) {
                    continue;
                }
                field.phi1_into(x, dir, &mut feat);
                field.phi2_backward(&feat, dir, d_sigmas[s], d_colors[s], &mut chunk_grads, &mut dfeat);
                field.phi1_backward(x, dir, &dfeat, &mut chunk_grads);
            }
        }
        (sq_sum, chunk_grads)
    });
    let mut total = T::ZERO;
    for (sq_sum, chunk_grads) in chunks {
        total += sq_sum;
        for (g, c) in grads.iter_mut().zip(&chunk_grads) {
            *g += *c;
        }
    }
    Ok(total / T::cast(3.0 * n as f64))
}

fn deltas_from<T: Real>(ts: &[T], cfg: &RenderConfig) -> Vec<T> {
    let n = ts.len();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(ts[i + 1] - ts[i]);
    }
    deltas.push(T::cast(cfg.far) - ts[n - 1]);
    deltas
}

// ---------------------------------------------------------------------------
// Image output: 8-bit PNG / ASCII PPM for color, 16-bit PNG for depth
// ---------------------------------------------------------------------------

#[inline]
fn quantize8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.pixels.len() * 3);
    for px in &image.pixels {
        bytes.extend(px.iter().map(|&v| quantize8(v)));
    }
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(image.width as u32, image.height as u32, bytes)
            .expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "P3").map_err(|e| Error::io(path, e))?;
    writeln!(w, "{} {}", image.width, image.height).map_err(|e| Error::io(path, e))?;
    writeln!(w, "255").map_err(|e| Error::io(path, e))?;
    for px in &image.pixels {
        writeln!(
            w,
            "{} {} {}",
            quantize8(px[0]),
            quantize8(px[1]),
            quantize8(px[2])
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Depth normalized to `[near, far]`, written as 16-bit grayscale.
pub fn write_depth_png(depth: &DepthMap, near: f64, far: f64, path: &Path) -> Result<()> {
    let mut values = Vec::with_capacity(depth.values.len());
    for &d in &depth.values {
        let v = ((d - near) / (far - near)).clamp(0.0, 1.0);
        values.push((65535.0 * v).round() as u16);
    }
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(depth.width as u32, depth.height as u32, values)
            .expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{ArchTag, FieldPair};

    fn identity_pose() -> [[f64; 4]; 3] {
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    }

    fn test_camera() -> Camera {
        Camera::from_fov(32, 24, std::f64::consts::FRAC_PI_2, identity_pose()).unwrap()
    }

    /// Constant-density medium over the whole sampled range.
    struct Fog {
        sigma: f64,
        color: [f64; 3],
    }

    impl RadianceSource<f64> for Fog {
        fn sample(&self, _x: [f64; 3], _d: [f64; 3]) -> RadianceSample<f64> {
            RadianceSample {
                sigma: self.sigma,
                rgb: self.color,
            }
        }
    }

    #[test]
    fn principal_pixel_looks_down_negative_z() {
        let cam = test_camera();
        let ray = ray_for_pixel(&cam, 16, 12, Some([0.0, 0.0])).unwrap();
        assert!((ray.dir[0]).abs() < 1e-12);
        assert!((ray.dir[1]).abs() < 1e-12);
        assert!((ray.dir[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_rays_unit_norm_and_translation_shifts_origins() {
        let cam = test_camera();
        let mut shifted_pose = identity_pose();
        shifted_pose[0][3] = 1.5;
        shifted_pose[1][3] = -0.5;
        shifted_pose[2][3] = 4.0;
        let cam2 = Camera {
            pose: shifted_pose,
            ..cam.clone()
        };
        for j in 0..cam.height {
            for i in 0..cam.width {
                let r = ray_for_pixel(&cam, i, j, None).unwrap();
                let n = (r.dir[0] * r.dir[0] + r.dir[1] * r.dir[1] + r.dir[2] * r.dir[2]).sqrt();
                assert!((n - 1.0).abs() < 1e-6);
                let r2 = ray_for_pixel(&cam2, i, j, None).unwrap();
                assert_eq!(r2.origin, [1.5, -0.5, 4.0]);
                for a in 0..3 {
                    assert!((r2.dir[a] - r.dir[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_frame_pixel_errors() {
        let cam = test_camera();
        assert!(ray_for_pixel(&cam, 32, 0, None).is_err());
        assert!(ray_for_pixel(&cam, 0, 24, None).is_err());
    }

    #[test]
    fn bin_center_sampling_matches_reference() {
        let cfg = RenderConfig {
            n_samples: 2,
            near: 0.0,
            far: 1.0,
            stratified: false,
            ..Default::default()
        };
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, -1.0],
        };
        let (ts, deltas) = sample_along_ray(&ray, &cfg, 0);
        assert_eq!(ts, vec![0.25, 0.75]);
        assert_eq!(deltas, vec![0.5, 0.25]);
    }

    #[test]
    fn stratified_sampling_is_seeded_and_increasing() {
        let cfg = RenderConfig {
            n_samples: 64,
            near: 2.0,
            far: 6.0,
            stratified: true,
            ..Default::default()
        };
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, -1.0],
        };
        let (a, _) = sample_along_ray(&ray, &cfg, 7);
        let (b, _) = sample_along_ray(&ray, &cfg, 7);
        let (c, _) = sample_along_ray(&ray, &cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for w in a.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(a[0] >= 2.0 && *a.last().unwrap() <= 6.0);
        let (ts, deltas) = sample_along_ray(&ray, &cfg, 9);
        let sum: f64 = deltas.iter().sum();
        assert!(sum <= 6.0 - ts[0] + 1e-12);
    }

    #[test]
    fn composite_transparent_and_opaque_limits() {
        let out = composite(
            &[0.0, 0.0],
            &[[0.2, 0.4, 0.9]; 2],
            &[0.5, 0.5],
            &[0.25, 0.75],
            [0.0; 3],
        )
        .unwrap();
        assert_eq!(out.rgb, [0.0; 3]);
        assert_eq!(out.acc, 0.0);
        let out = composite(&[50.0], &[[0.3, 0.6, 0.1]], &[1.0], &[1.0], [1.0; 3]).unwrap();
        assert!((out.acc - 1.0).abs() < 1e-20);
        for c in 0..3 {
            assert!((out.rgb[c] - [0.3, 0.6, 0.1][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_medium_matches_closed_form() {
        // sigma = 2 over a unit segment: opacity -> 1 - exp(-2).
        let cfg = RenderConfig {
            n_samples: 256,
            near: 1.0,
            far: 2.0,
            stratified: false,
            background: [0.0; 3],
        };
        let fog = Fog {
            sigma: 2.0,
            color: [1.0, 1.0, 1.0],
        };
        let ray = Ray {
            origin: [0.0, 0.0, 0.0],
            dir: [0.0, 0.0, -1.0],
        };
        let out = trace_ray(&fog, &ray, &cfg, 0);
        assert!((out.acc - 0.8646647).abs() <= 1e-3, "acc {}", out.acc);
    }

    #[test]
    fn transmittance_and_weights_are_well_behaved() {
        let mut rng = crate::rng::stream(31, "weights");
        use rand::Rng;
        for _ in 0..50 {
            let n = 32;
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..8.0)).collect();
            let deltas = vec![0.05; n];
            let mut transmittance = 1.0f64;
            let mut weight_sum = 0.0;
            let mut prev_t = 1.0;
            for i in 0..n {
                assert!(transmittance <= prev_t && transmittance > 0.0);
                prev_t = transmittance;
                let pass = (-sigmas[i].max(0.0) * deltas[i]).exp();
                let w = transmittance * (1.0 - pass);
                assert!(w >= 0.0);
                weight_sum += w;
                transmittance *= pass;
            }
            assert!(weight_sum <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(17, "composite-fd");
        use rand::Rng;
        let n = 16;
        let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..4.0)).collect();
        let colors: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.1..0.9)))
            .collect();
        let deltas = vec![0.1; n];
        let ts: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bg = [0.8, 0.7, 0.6];
        let g = [0.3, -0.2, 0.5];
        let loss = |sig: &[f64], col: &[[f64; 3]]| {
            let out = composite(sig, col, &deltas, &ts, bg).unwrap();
            g[0] * out.rgb[0] + g[1] * out.rgb[1] + g[2] * out.rgb[2]
        };
        let mut d_sigmas = vec![0.0; n];
        let mut d_colors = vec![[0.0; 3]; n];
        composite_backward(&sigmas, &colors, &deltas, bg, g, &mut d_sigmas, &mut d_colors);
        let eps = 1e-6;
        for i in 0..n {
            if sigmas[i] > 1e-3 {
                let mut plus = sigmas.clone();
                plus[i] += eps;
                let mut minus = sigmas.clone();
                minus[i] -= eps;
                let fd = (loss(&plus, &colors) - loss(&minus, &colors)) / (2.0 * eps);
                assert!(
                    (fd - d_sigmas[i]).abs() < 1e-6,
                    "sigma {i}: {fd} vs {}",
                    d_sigmas[i]
                );
            }
            for c in 0..3 {
                let mut plus = colors.clone();
                plus[i][c] += eps;
                let mut minus = colors.clone();
                minus[i][c] -= eps;
                let fd = (loss(&sigmas, &plus) - loss(&sigmas, &minus)) / (2.0 * eps);
                assert!((fd - d_colors[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn negative_density_gets_zero_gradient() {
        let sigmas = [-2.0, 3.0];
        let colors = [[0.5; 3]; 2];
        let deltas = [0.5; 2];
        let mut d_sigmas = [0.0; 2];
        let mut d_colors = [[0.0; 3]; 2];
        composite_backward(
            &sigmas,
            &colors,
            &deltas,
            [1.0; 3],
            [1.0, 1.0, 1.0],
            &mut d_sigmas,
            &mut d_colors,
        );
        assert_eq!(d_sigmas[0], 0.0);
        assert_ne!(d_sigmas[1], 0.0);
    }

    #[test]
    fn empty_source_renders_background() {
        let cfg = RenderConfig {
            n_samples: 16,
            background: [0.25, 0.5, 0.75],
            ..Default::default()
        };
        let empty = Fog {
            sigma: 0.0,
            color: [0.0; 3],
        };
        let cam = test_camera();
        let (img, _) = render_image(&empty, &cam, &cfg, 0).unwrap();
        for px in &img.pixels {
            for c in 0..3 {
                assert!((px[c] - cfg.background[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_of_one_matches_image_pixel_bitwise() {
        let field: FieldPair<f32> =
            FieldPair::init(&crate::fields::tests::tiny_config(ArchTag::Hash), 3).unwrap();
        let cam = test_camera();
        let cfg = RenderConfig {
            n_samples: 24,
            stratified: true,
            ..Default::default()
        };
        let seed = 5;
        let (img, _) = render_image(&field, &cam, &cfg, seed).unwrap();
        for idx in [0usize, 100, 500] {
            let (x, y) = (idx % cam.width, idx / cam.width);
            let ray = ray_for_pixel(&cam, x, y, None).unwrap();
            let outs =
                render_rays_batched(&field, &[ray], &[pixel_seed(seed, idx as u64)], &cfg).unwrap();
            for c in 0..3 {
                assert_eq!(
                    (outs[0].rgb[c].to_f64()).to_bits(),
                    img.pixels[idx][c].to_bits()
                );
            }
        }
    }

    #[test]
    fn permuting_batch_permutes_outputs() {
        let field: FieldPair<f32> =
            FieldPair::init(&crate::fields::tests::tiny_config(ArchTag::Grid), 3).unwrap();
        let cam = test_camera();
        let cfg = RenderConfig {
            n_samples: 16,
            stratified: true,
            ..Default::default()
        };
        let rays: Vec<Ray> = (0..10)
            .map(|i| ray_for_pixel(&cam, i * 3, i, None).unwrap())
            .collect();
        let seeds: Vec<u64> = (0..10).map(|i| pixel_seed(9, i)).collect();
        let fwd = render_rays_batched(&field, &rays, &seeds, &cfg).unwrap();
        let rev_rays: Vec<Ray> = rays.iter().rev().cloned().collect();
        let rev_seeds: Vec<u64> = seeds.iter().rev().cloned().collect();
        let rev = render_rays_batched(&field, &rev_rays, &rev_seeds, &cfg).unwrap();
        for i in 0..10 {
            let a = &fwd[i];
            let b = &rev[9 - i];
            for c in 0..3 {
                assert_eq!(a.rgb[c].to_bits(), b.rgb[c].to_bits());
            }
        }
    }

    #[test]
    fn parallel_and_sequential_rendering_agree() {
        let field: FieldPair<f32> =
            FieldPair::init(&crate::fields::tests::tiny_config(ArchTag::Vm), 8).unwrap();
        let cam = test_camera();
        let cfg = RenderConfig {
            n_samples: 16,
            ..Default::default()
        };
        let (par, _) = render_image(&field, &cam, &cfg, 1).unwrap();
        let (seq, _) = crate::exec::sequential_scope(|| render_image(&field, &cam, &cfg, 1).unwrap());
        for (a, b) in par.pixels.iter().zip(&seq.pixels) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }
    }

    #[test]
    fn render_mse_gradients_match_finite_differences() {
        let field: FieldPair<f64> =
            FieldPair::init(&crate::fields::tests::tiny_config(ArchTag::Grid), 6).unwrap();
        let cam = test_camera();
        let cfg = RenderConfig {
            n_samples: 12,
            near: 2.0,
            far: 6.0,
            stratified: false,
            background: [1.0; 3],
        };
        let rays: Vec<Ray> = (0..4)
            .map(|i| ray_for_pixel(&cam, 8 + 4 * i, 12, None).unwrap())
            .collect();
        let seeds = vec![0u64; 4];
        let targets = vec![[0.2, 0.3, 0.4]; 4];
        let mut values = field.params.values().to_vec();
        let report = crate::grad::grad_check(
            &mut values,
            |v| {
                let mut f = field.clone();
                f.params.values_mut().copy_from_slice(v);
                let outs = render_rays_batched(&f, &rays, &seeds, &cfg).unwrap();
                let mut loss = 0.0;
                for (o, t) in outs.iter().zip(&targets) {
                    for c in 0..3 {
                        loss += (o.rgb[c] - t[c]) * (o.rgb[c] - t[c]);
                    }
                }
                loss / (3.0 * rays.len() as f64)
            },
            |v, g| {
                let mut f = field.clone();
                f.params.values_mut().copy_from_slice(v);
                render_mse_loss_grad(&f, &rays, &seeds, &targets, &cfg, 1.0, g).unwrap()
            },
            100,
            1e-4,
            12,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn image_writers_round_and_are_deterministic() {
        let mut img = Image::new(3, 2);
        img.set(0, 0, [0.0, 0.5, 1.0]);
        img.set(1, 0, [0.501, 1.2, -0.3]);
        img.set(2, 1, [0.25, 0.75, 0.999]);
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("out.ppm");
        write_ppm(&img, &ppm).unwrap();
        let text = std::fs::read_to_string(&ppm).unwrap();
        // 255 * 0.5 = 127.5 rounds half-up to 128.
        assert!(text.starts_with("P3\n3 2\n255\n0 128 255\n"));
        let png_a = dir.path().join("a.png");
        let png_b = dir.path().join("b.png");
        write_png(&img, &png_a).unwrap();
        write_png(&img, &png_b).unwrap();
        assert_eq!(std::fs::read(&png_a).unwrap(), std::fs::read(&png_b).unwrap());
    }
}
