//! Stateless numerical building blocks: sinusoidal positional encoding, real
//! spherical harmonics, integer-lattice hashing, trilinear interpolation and
//! low-rank vector-matrix tensor reconstruction.

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncConfig {
    /// Number of frequency octaves L; frequencies are 2^0..2^(L-1) times pi.
    pub num_freqs: usize,
    pub include_input: bool,
}

impl PosEncConfig {
    pub fn new(num_freqs: usize, include_input: bool) -> Self {
        Self {
            num_freqs,
            include_input,
        }
    }

    /// Output length for an input of `input_dim` components.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (usize::from(self.include_input) + 2 * self.num_freqs)
    }
}

/// Sinusoidal encoding `[p?, sin(2^0 pi p), cos(2^0 pi p), ..., cos(2^(L-1) pi p)]`,
/// each block spanning all components of `p`.
pub fn positional_encode<T: Real>(p: &[T], cfg: &PosEncConfig) -> Result<Vec<T>> {
    for &v in p {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite component {v:?} in positional_encode"
            )));
        }
    }
    let mut out = Vec::with_capacity(cfg.output_dim(p.len()));
    encode_into(p, cfg, &mut out);
    Ok(out)
}

/// Unchecked fast path used by the field evaluators.
pub(crate) fn encode_into<T: Real>(p: &[T], cfg: &PosEncConfig, out: &mut Vec<T>) {
    if cfg.include_input {
        out.extend_from_slice(p);
    }
    let pi = T::cast(std::f64::consts::PI);
    let mut freq = pi;
    for _ in 0..cfg.num_freqs {
        for &v in p {
            out.push((freq * v).sin());
        }
        for &v in p {
            out.push((freq * v).cos());
        }
        freq = freq + freq;
    }
}

// ---------------------------------------------------------------------------
// Real spherical harmonics (hardcoded to degree 3)
// ---------------------------------------------------------------------------

pub const MAX_SH_DEGREE: usize = 3;

/// Basis length `(degree + 1)^2`.
pub const fn sh_basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Real orthonormal spherical harmonics evaluated at a unit direction, in
/// (l, m) order. Supports degrees 0..=3.
pub fn sh_basis<T: Real>(d: [T; 3], degree: usize) -> Result<Vec<T>> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    let mut out = vec![T::ZERO; sh_basis_len(degree)];
    sh_basis_into(d, degree, &mut out);
    Ok(out)
}

pub(crate) fn sh_basis_into<T: Real>(d: [T; 3], degree: usize, out: &mut [T]) {
    debug_assert!(degree <= MAX_SH_DEGREE);
    debug_assert_eq!(out.len(), sh_basis_len(degree));
    debug_assert!({
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).to_f64().sqrt();
        (n - 1.0).abs() < 1e-5
    });
    let [x, y, z] = d;
    out[0] = T::cast(SH_C0);
    if degree < 1 {
        return;
    }
    out[1] = T::cast(-SH_C1) * y;
    out[2] = T::cast(SH_C1) * z;
    out[3] = T::cast(-SH_C1) * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = T::cast(SH_C2[0]) * xy;
    out[5] = T::cast(SH_C2[1]) * yz;
    out[6] = T::cast(SH_C2[2]) * (T::cast(2.0) * zz - xx - yy);
    out[7] = T::cast(SH_C2[3]) * xz;
    out[8] = T::cast(SH_C2[4]) * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = T::cast(SH_C3[0]) * y * (T::cast(3.0) * xx - yy);
    out[10] = T::cast(SH_C3[1]) * xy * z;
    out[11] = T::cast(SH_C3[2]) * y * (T::cast(4.0) * zz - xx - yy);
    out[12] = T::cast(SH_C3[3]) * z * (T::cast(2.0) * zz - T::cast(3.0) * (xx + yy));
    out[13] = T::cast(SH_C3[4]) * x * (T::cast(4.0) * zz - xx - yy);
    out[14] = T::cast(SH_C3[5]) * z * (xx - yy);
    out[15] = T::cast(SH_C3[6]) * x * (xx - T::cast(3.0) * yy);
}

/// Decode an RGB color from per-channel SH coefficients: sigmoid of the SH
/// expansion along `d`. `coeffs` holds the three channels concatenated,
/// each of length `(degree + 1)^2`.
pub fn sh_color<T: Real>(coeffs: &[T], d: [T; 3], degree: usize) -> Result<[T; 3]> {
    let n = sh_basis_len(degree);
    if coeffs.len() != 3 * n {
        return Err(Error::Shape {
            what: "sh_color coefficients",
            expected: 3 * n,
            got: coeffs.len(),
        });
    }
    let basis = sh_basis(d, degree)?;
    let mut rgb = [T::ZERO; 3];
    for ch in 0..3 {
        let logit = crate::real::dot(&coeffs[ch * n..(ch + 1) * n], &basis);
        rgb[ch] = sigmoid(logit);
    }
    Ok(rgb)
}

// ---------------------------------------------------------------------------
// Spatial hashing
// ---------------------------------------------------------------------------

/// Reference prime choice for the lattice hash; the first prime is 1 so the
/// finest-varying axis stays coherent in the table.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashConfig {
    /// Table size S; must be a power of two.
    pub table_size: usize,
    pub primes: [u32; 3],
    pub levels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub features_per_level: usize,
}

impl HashConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "hash encoding needs at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.max_resolution < self.base_resolution {
            return Err(Error::Config(format!(
                "max resolution {} below base resolution {}",
                self.max_resolution, self.base_resolution
            )));
        }
        Ok(())
    }
}

/// XOR-fold a lattice corner into `[0, table_size)` with wrapping multiplies.
#[inline]
pub fn hash_index(g: [u32; 3], cfg: &HashConfig) -> usize {
    let h = g[0]
        .wrapping_mul(cfg.primes[0])
        ^ g[1].wrapping_mul(cfg.primes[1])
        ^ g[2].wrapping_mul(cfg.primes[2]);
    (h as usize) & (cfg.table_size - 1)
}

/// Per-level lattice resolutions: a geometric progression from the base to the
/// max resolution, rounded half-up, with both endpoints exact.
pub fn level_resolutions(cfg: &HashConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let n_min = cfg.base_resolution as f64;
    let n_max = cfg.max_resolution as f64;
    let growth = ((n_max.ln() - n_min.ln()) / (cfg.levels as f64 - 1.0)).exp();
    let mut out = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let r = if l == 0 {
            cfg.base_resolution
        } else if l == cfg.levels - 1 {
            cfg.max_resolution
        } else {
            (n_min * growth.powi(l as i32)).round() as u32
        };
        out.push(r);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trilinear interpolation
// ---------------------------------------------------------------------------

/// Corner weights for a local coordinate in the unit cell. Corner index packs
/// the axis offsets as `(dx << 2) | (dy << 1) | dz`.
#[inline]
pub fn trilinear_weights<T: Real>(local: [T; 3]) -> [T; 8] {
    let [u, v, w] = local;
    let (nu, nv, nw) = (T::ONE - u, T::ONE - v, T::ONE - w);
    [
        nu * nv * nw,
        nu * nv * w,
        nu * v * nw,
        nu * v * w,
        u * nv * nw,
        u * nv * w,
        u * v * nw,
        u * v * w,
    ]
}

/// Blend eight equally sized corner vectors at a local coordinate in `[0,1]^3`.
pub fn trilinear<T: Real>(corners: &[&[T]; 8], local: [T; 3]) -> Result<Vec<T>> {
    let dim = corners[0].len();
    for c in corners.iter() {
        if c.len() != dim {
            return Err(Error::Shape {
                what: "trilinear corner",
                expected: dim,
                got: c.len(),
            });
        }
    }
    for &v in &local {
        if v < T::ZERO || v > T::ONE {
            return Err(Error::OutOfCell([
                local[0].to_f64(),
                local[1].to_f64(),
                local[2].to_f64(),
            ]));
        }
    }
    let weights = trilinear_weights(local);
    let mut out = vec![T::ZERO; dim];
    for (corner, &w) in corners.iter().zip(&weights) {
        crate::real::axpy(w, corner, &mut out);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Vector-matrix tensor reconstruction
// ---------------------------------------------------------------------------

/// A 3-D tensor factored into per-axis sums of vector (x) matrix outer
/// products. `vectors[a][r]` has the length of axis `a`; `matrices[a][r]` is
/// the row-major plane spanned by the other two axes in ascending order.
#[derive(Debug, Clone)]
pub struct VmComponents<T> {
    pub ranks: (usize, usize, usize),
    pub dims: (usize, usize, usize),
    pub vectors: [Vec<Vec<T>>; 3],
    pub matrices: [Vec<Vec<T>>; 3],
}

impl<T: Real> VmComponents<T> {
    pub fn new(
        ranks: (usize, usize, usize),
        dims: (usize, usize, usize),
        vectors: [Vec<Vec<T>>; 3],
        matrices: [Vec<Vec<T>>; 3],
    ) -> Result<Self> {
        let (i, j, k) = dims;
        let rank_of = |a: usize| match a {
            0 => ranks.0,
            1 => ranks.1,
            _ => ranks.2,
        };
        let vec_len = [i, j, k];
        let mat_len = [j * k, i * k, i * j];
        for a in 0..3 {
            if vectors[a].len() != rank_of(a) || matrices[a].len() != rank_of(a) {
                return Err(Error::Config(format!(
                    "axis {a}: expected {} components, got {} vectors / {} matrices",
                    rank_of(a),
                    vectors[a].len(),
                    matrices[a].len()
                )));
            }
            for v in &vectors[a] {
                if v.len() != vec_len[a] {
                    return Err(Error::Shape {
                        what: "vm vector",
                        expected: vec_len[a],
                        got: v.len(),
                    });
                }
            }
            for m in &matrices[a] {
                if m.len() != mat_len[a] {
                    return Err(Error::Shape {
                        what: "vm matrix",
                        expected: mat_len[a],
                        got: m.len(),
                    });
                }
            }
        }
        Ok(Self {
            ranks,
            dims,
            vectors,
            matrices,
        })
    }
}

/// Evaluate the factored tensor at an integer index.
pub fn vm_reconstruct<T: Real>(comp: &VmComponents<T>, idx: (usize, usize, usize)) -> Result<T> {
    let (i, j, k) = idx;
    let (ni, nj, nk) = comp.dims;
    for (x, n) in [(i, ni), (j, nj), (k, nk)] {
        if x >= n {
            return Err(Error::Range { index: x, extent: n });
        }
    }
    let mut acc = T::ZERO;
    for r in 0..comp.ranks.0 {
        acc += comp.vectors[0][r][i] * comp.matrices[0][r][j * nk + k];
    }
    for r in 0..comp.ranks.1 {
        acc += comp.vectors[1][r][j] * comp.matrices[1][r][i * nk + k];
    }
    for r in 0..comp.ranks.2 {
        acc += comp.vectors[2][r][k] * comp.matrices[2][r][i * nj + j];
    }
    Ok(acc)
}
