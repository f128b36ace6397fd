//! The four scene representations, each exposed as a pair of maps: a stage-one
//! encoder from a spatial point (and direction) to a feature vector, and a
//! stage-two decoder from the feature to density and color. Field evaluation
//! is always the literal composition of the two stages.
//!
//! All fields live on the unit cube `[-1, 1]^3`. Density is stored raw and may
//! be negative; only the renderer clamps it when computing opacity.

mod grid;
mod hash;
mod mlp;
mod vm;

pub use grid::GridConfig;
pub use hash::HashFieldConfig;
pub use mlp::MlpConfig;
pub use vm::VmConfig;

use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

/// Per-point output of a field: raw density and sigmoid-bounded color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceSample<T> {
    pub sigma: T,
    pub rgb: [T; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchTag {
    Mlp,
    Grid,
    Vm,
    Hash,
}

impl ArchTag {
    pub const ALL: [ArchTag; 4] = [ArchTag::Mlp, ArchTag::Grid, ArchTag::Vm, ArchTag::Hash];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchTag::Mlp => "mlp",
            ArchTag::Grid => "grid",
            ArchTag::Vm => "vm",
            ArchTag::Hash => "hash",
        }
    }
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchTag::Mlp),
            // "plenoxels" names the same sparse-grid architecture.
            "grid" | "plenoxels" => Ok(ArchTag::Grid),
            "vm" => Ok(ArchTag::Vm),
            "hash" => Ok(ArchTag::Hash),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected mlp|grid|vm|hash)"
            ))),
        }
    }
}

/// Density clamp bounds used by the distillation density loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityClip {
    pub a: f64,
    pub b: f64,
}

impl Default for DensityClip {
    fn default() -> Self {
        DensityClip { a: -2.0, b: 7.0 }
    }
}

impl DensityClip {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a >= b {
            return Err(Error::Config(format!("density clip needs a < b, got [{a}, {b}]")));
        }
        Ok(DensityClip { a, b })
    }
}

/// Clamp a raw density into the clip interval.
#[inline]
pub fn clip_density<T: Real>(sigma: T, clip: &DensityClip) -> T {
    sigma.clamp_to(T::cast(clip.a), T::cast(clip.b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum FieldConfig {
    Mlp(MlpConfig),
    Grid(GridConfig),
    Vm(VmConfig),
    Hash(HashFieldConfig),
}

impl FieldConfig {
    pub fn arch(&self) -> ArchTag {
        match self {
            FieldConfig::Mlp(_) => ArchTag::Mlp,
            FieldConfig::Grid(_) => ArchTag::Grid,
            FieldConfig::Vm(_) => ArchTag::Vm,
            FieldConfig::Hash(_) => ArchTag::Hash,
        }
    }

    /// Laptop-sized defaults: same shapes as the reference settings, smaller
    /// extents.
    pub fn desk(arch: ArchTag) -> Self {
        match arch {
            ArchTag::Mlp => FieldConfig::Mlp(MlpConfig::desk()),
            ArchTag::Grid => FieldConfig::Grid(GridConfig::desk()),
            ArchTag::Vm => FieldConfig::Vm(VmConfig::desk()),
            ArchTag::Hash => FieldConfig::Hash(HashFieldConfig::desk()),
        }
    }

    /// Full-sized reference settings.
    pub fn paper(arch: ArchTag) -> Self {
        match arch {
            ArchTag::Mlp => FieldConfig::Mlp(MlpConfig::paper()),
            ArchTag::Grid => FieldConfig::Grid(GridConfig::paper()),
            ArchTag::Vm => FieldConfig::Vm(VmConfig::paper()),
            ArchTag::Hash => FieldConfig::Hash(HashFieldConfig::paper()),
        }
    }

    fn build(&self) -> Result<Rep> {
        Ok(match self {
            FieldConfig::Mlp(c) => Rep::Mlp(mlp::MlpRep::new(c)?),
            FieldConfig::Grid(c) => Rep::Grid(grid::GridRep::new(c)?),
            FieldConfig::Vm(c) => Rep::Vm(vm::VmRep::new(c)?),
            FieldConfig::Hash(c) => Rep::Hash(hash::HashRep::new(c)?),
        })
    }
}

#[derive(Debug, Clone)]
enum Rep {
    Mlp(mlp::MlpRep),
    Grid(grid::GridRep),
    Vm(vm::VmRep),
    Hash(hash::HashRep),
}

impl Rep {
    fn feature_dim(&self) -> usize {
        match self {
            Rep::Mlp(r) => r.feature_dim(),
            Rep::Grid(r) => r.feature_dim(),
            Rep::Vm(r) => r.feature_dim(),
            Rep::Hash(r) => r.feature_dim(),
        }
    }

    fn layout(&self) -> Vec<(String, usize, f64)> {
        match self {
            Rep::Mlp(r) => r.layout(),
            Rep::Grid(r) => r.layout(),
            Rep::Vm(r) => r.layout(),
            Rep::Hash(r) => r.layout(),
        }
    }
}

/// `true` when a point lies inside the scene cube.
#[inline]
pub fn in_bounds<T: Real>(x: [T; 3]) -> bool {
    x.iter().all(|v| v.abs() <= T::ONE && v.is_finite())
}

/// A representation plus its parameters: the unit every other module works
/// with. Evaluation methods are read-only; parameter mutation goes through
/// the public `params` store.
#[derive(Debug, Clone)]
pub struct FieldPair<T> {
    config: FieldConfig,
    rep: Rep,
    pub params: ParamStore<T>,
    seed: u64,
}

/// Initialize a field with reproducible, seed-derived parameters.
pub fn init_field<T: Real>(config: &FieldConfig, seed: u64) -> Result<FieldPair<T>> {
    FieldPair::init(config, seed)
}

impl<T: Real> FieldPair<T> {
    pub fn init(config: &FieldConfig, seed: u64) -> Result<Self> {
        let rep = config.build()?;
        let layout = rep.layout();
        let layout_refs: Vec<(&str, usize, f64)> = layout
            .iter()
            .map(|(n, l, m)| (n.as_str(), *l, *m))
            .collect();
        let mut params = ParamStore::from_layout(&layout_refs);
        let mut rng = crate::rng::stream(seed, "init");
        match &rep {
            Rep::Mlp(r) => r.init(&mut params, &mut rng),
            Rep::Grid(r) => r.init(&mut params, &mut rng),
            Rep::Vm(r) => r.init(&mut params, &mut rng),
            Rep::Hash(r) => r.init(&mut params, &mut rng),
        }
        Ok(FieldPair {
            config: config.clone(),
            rep,
            params,
            seed,
        })
    }

    pub fn arch(&self) -> ArchTag {
        self.config.arch()
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.rep.feature_dim()
    }

    /// Stage-one features at a point. Direction only matters to the decoder;
    /// it is accepted here to keep one signature across architectures.
    pub fn eval_phi1(&self, x: [T; 3], d: [T; 3]) -> Result<Vec<T>> {
        if !in_bounds(x) {
            return Err(Error::OutOfBounds([
                x[0].to_f64(),
                x[1].to_f64(),
                x[2].to_f64(),
            ]));
        }
        let mut out = vec![T::ZERO; self.feature_dim()];
        self.phi1_into(x, d, &mut out);
        Ok(out)
    }

    /// Stage-two decode of a feature vector into density and color.
    pub fn eval_phi2(&self, feat: &[T], d: [T; 3]) -> Result<RadianceSample<T>> {
        if feat.len() != self.feature_dim() {
            return Err(Error::Shape {
                what: "stage-two feature",
                expected: self.feature_dim(),
                got: feat.len(),
            });
        }
        Ok(self.phi2_raw(feat, d))
    }

    /// Full field evaluation: literally the composition of the two stages.
    pub fn eval_field(&self, x: [T; 3], d: [T; 3]) -> Result<RadianceSample<T>> {
        let feat = self.eval_phi1(x, d)?;
        self.eval_phi2(&feat, d)
    }

    pub(crate) fn phi1_into(&self, x: [T; 3], d: [T; 3], out: &mut [T]) {
        let params = self.params.values();
        match &self.rep {
            Rep::Mlp(r) => r.phi1(params, x, d, out),
            Rep::Grid(r) => r.phi1(params, x, out),
            Rep::Vm(r) => r.phi1(params, x, out),
            Rep::Hash(r) => r.phi1(params, x, out),
        }
    }

    pub(crate) fn phi2_raw(&self, feat: &[T], d: [T; 3]) -> RadianceSample<T> {
        let params = self.params.values();
        match &self.rep {
            Rep::Mlp(r) => r.phi2(params, feat, d),
            Rep::Grid(r) => r.phi2(feat, d),
            Rep::Vm(r) => r.phi2(params, feat, d),
            Rep::Hash(r) => r.phi2(params, feat, d),
        }
    }

    /// Backward through the decoder: accumulates parameter gradients into
    /// `grads` and overwrites `dfeat` with the gradient at the stage boundary.
    pub(crate) fn phi2_backward(
        &self,
        feat: &[T],
        d: [T; 3],
        d_sigma: T,
        d_rgb: [T; 3],
        grads: &mut [T],
        dfeat: &mut [T],
    ) {
        let params = self.params.values();
        match &self.rep {
            Rep::Mlp(r) => r.phi2_backward(params, feat, d, d_sigma, d_rgb, grads, dfeat),
            Rep::Grid(r) => r.phi2_backward(feat, d, d_sigma, d_rgb, dfeat),
            Rep::Vm(r) => r.phi2_backward(params, feat, d, d_sigma, d_rgb, grads, dfeat),
            Rep::Hash(r) => r.phi2_backward(params, feat, d, d_sigma, d_rgb, grads, dfeat),
        }
    }

    /// Backward through the encoder: accumulates parameter gradients.
    pub(crate) fn phi1_backward(&self, x: [T; 3], d: [T; 3], dfeat: &[T], grads: &mut [T]) {
        let params = self.params.values();
        match &self.rep {
            Rep::Mlp(r) => r.phi1_backward(params, x, d, dfeat, grads),
            Rep::Grid(r) => r.phi1_backward(x, dfeat, grads),
            Rep::Vm(r) => r.phi1_backward(params, x, dfeat, grads),
            Rep::Hash(r) => r.phi1_backward(x, dfeat, grads),
        }
    }

    /// Move the stage boundary of an MLP field without touching its weights.
    pub fn resplit(&self, split_k: usize) -> Result<Self> {
        match &self.config {
            FieldConfig::Mlp(cfg) => {
                let mut cfg = cfg.clone();
                cfg.split_k = split_k;
                let config = FieldConfig::Mlp(cfg);
                let rep = config.build()?;
                Ok(FieldPair {
                    config,
                    rep,
                    params: self.params.clone(),
                    seed: self.seed,
                })
            }
            _ => Err(Error::Config("resplit only applies to mlp fields".into())),
        }
    }

    /// Reinterpret the parameter buffer in another precision.
    pub fn convert<U: Real>(&self) -> Result<FieldPair<U>> {
        Ok(FieldPair {
            config: self.config.clone(),
            rep: self.config.build()?,
            params: self.params.convert(),
            seed: self.seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, little-endian u32 header length, JSON header,
// then the parameters as raw little-endian f32.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"RADCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: String,
    config: FieldConfig,
    feature_dim: usize,
    param_count: usize,
    seed: u64,
}

impl<T: Real> FieldPair<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            arch: self.arch().as_str().to_string(),
            config: self.config.clone(),
            feature_dim: self.feature_dim(),
            param_count: self.params.len(),
            seed: self.seed,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Config(format!("header encode: {e}")))?;
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(&mut file);
        let io_err = |e| Error::io(path, e);
        buf.write_all(CKPT_MAGIC).map_err(io_err)?;
        buf.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        buf.write_all(&header_json).map_err(|e| Error::io(path, e))?;
        for v in self.params.values() {
            buf.write_all(&v.to_f32().to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        buf.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let parse = |field: &str, msg: String| Error::Parse {
            path: path.to_path_buf(),
            field: field.to_string(),
            msg,
        };
        if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
            return Err(parse("magic", "not a checkpoint file".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(parse("header", "truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| parse("header", e.to_string()))?;
        let payload = &bytes[payload_start..];
        if payload.len() != header.param_count * 4 {
            return Err(parse(
                "payload",
                format!(
                    "expected {} parameter bytes, found {}",
                    header.param_count * 4,
                    payload.len()
                ),
            ));
        }
        if header.arch != header.config.arch().as_str() {
            return Err(parse("arch", "arch tag does not match config".into()));
        }
        let mut field = FieldPair::<T>::init(&header.config, header.seed)?;
        if field.params.len() != header.param_count {
            return Err(parse(
                "param_count",
                format!(
                    "config implies {} parameters, header says {}",
                    field.params.len(),
                    header.param_count
                ),
            ));
        }
        if field.feature_dim() != header.feature_dim {
            return Err(parse("feature_dim", "feature_dim mismatch".into()));
        }
        for (slot, chunk) in field.params.values_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *slot = T::cast(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(field)
    }
}

// ---------------------------------------------------------------------------
// Shared dense-layer helpers for the MLP-style decoders.
// ---------------------------------------------------------------------------

/// `out[o] = dot(w[o], x) + b[o]` for a row-major `[rows][cols]` weight block.
pub(crate) fn linear_forward<T: Real>(
    params: &[T],
    w_off: usize,
    b_off: usize,
    x: &[T],
    out: &mut [T],
) {
    let cols = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &params[w_off + o * cols..w_off + (o + 1) * cols];
        *slot = crate::real::dot(row, x) + params[b_off + o];
    }
}

/// Backward of `linear_forward`: accumulates weight/bias grads and, when
/// `dx` is given, adds the input gradient into it.
pub(crate) fn linear_backward<T: Real>(
    params: &[T],
    w_off: usize,
    b_off: usize,
    x: &[T],
    dout: &[T],
    grads: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let cols = x.len();
    for (o, &g) in dout.iter().enumerate() {
        crate::real::axpy(g, x, &mut grads[w_off + o * cols..w_off + (o + 1) * cols]);
        grads[b_off + o] += g;
        if let Some(dx) = dx.as_deref_mut() {
            let row = &params[w_off + o * cols..w_off + (o + 1) * cols];
            crate::real::axpy(g, row, dx);
        }
    }
}

#[inline]
pub(crate) fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::ZERO);
    }
}

/// Kaiming-style uniform fan-in init for one linear layer; biases zero.
pub(crate) fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    w_name: &str,
    fan_in: usize,
    rng: &mut impl rand::Rng,
) {
    let bound = (6.0 / fan_in as f64).sqrt();
    let range = store.segment_range(w_name).expect("weight segment");
    for slot in &mut store.values_mut()[range] {
        *slot = T::cast(rng.gen_range(-bound..bound));
    }
}
