//! Dense voxel grid storing one raw density plus degree-2 SH color
//! coefficients per node. The encoder trilinearly interpolates the full
//! 28-value payload; the decoder is parameter-free (identity density, SH
//! color decode).

use super::RadianceSample;
use crate::encodings::{sh_basis_into, sh_basis_len, trilinear_weights};
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::real::{dot, sigmoid, Real};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: [usize; 3],
    pub sh_degree: usize,
    /// Density value written at every node on init.
    pub init_density: f64,
}

impl GridConfig {
    pub fn desk() -> Self {
        GridConfig {
            resolution: [64, 64, 64],
            sh_degree: 2,
            init_density: 0.1,
        }
    }

    pub fn paper() -> Self {
        GridConfig {
            resolution: [128, 128, 128],
            ..Self::desk()
        }
    }
}

/// Vertex-centered cell lookup on one axis: maps `x` in [-1, 1] onto `n`
/// nodes, returning the lower node index (at most `n - 2`) and the local
/// coordinate in [0, 1].
#[inline]
pub(super) fn axis_cell<T: Real>(x: T, n: usize) -> (usize, T) {
    let u = (x + T::ONE) * T::cast(0.5) * T::cast((n - 1) as f64);
    let cell = u.floor().to_f64().max(0.0) as usize;
    let cell = cell.min(n - 2);
    (cell, u - T::cast(cell as f64))
}

#[derive(Debug, Clone)]
pub(super) struct GridRep {
    res: [usize; 3],
    sh_degree: usize,
    n_basis: usize,
    payload: usize,
    init_density: f64,
}

impl GridRep {
    pub fn new(cfg: &GridConfig) -> Result<Self> {
        if cfg.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!(
                "grid resolution must be at least 2 per axis, got {:?}",
                cfg.resolution
            )));
        }
        if cfg.sh_degree > crate::encodings::MAX_SH_DEGREE {
            return Err(Error::UnsupportedDegree(cfg.sh_degree));
        }
        let n_basis = sh_basis_len(cfg.sh_degree);
        Ok(GridRep {
            res: cfg.resolution,
            sh_degree: cfg.sh_degree,
            n_basis,
            payload: 1 + 3 * n_basis,
            init_density: cfg.init_density,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.payload
    }

    pub fn layout(&self) -> Vec<(String, usize, f64)> {
        let nodes = self.res[0] * self.res[1] * self.res[2];
        vec![("grid".to_string(), nodes * self.payload, 1.0)]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, _rng: &mut impl rand::Rng) {
        let density = T::cast(self.init_density);
        let payload = self.payload;
        for (i, v) in store.values_mut().iter_mut().enumerate() {
            *v = if i % payload == 0 { density } else { T::ZERO };
        }
    }

    #[inline]
    fn node_offset(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ((ix * self.res[1] + iy) * self.res[2] + iz) * self.payload
    }

    /// The eight (offset, weight) pairs around a point.
    fn corners<T: Real>(&self, x: [T; 3]) -> ([usize; 8], [T; 8]) {
        let (cx, lx) = axis_cell(x[0], self.res[0]);
        let (cy, ly) = axis_cell(x[1], self.res[1]);
        let (cz, lz) = axis_cell(x[2], self.res[2]);
        let weights = trilinear_weights([lx, ly, lz]);
        let offsets = std::array::from_fn(|c| {
            self.node_offset(cx + (c >> 2 & 1), cy + (c >> 1 & 1), cz + (c & 1))
        });
        (offsets, weights)
    }

    pub fn phi1<T: Real>(&self, params: &[T], x: [T; 3], out: &mut [T]) {
        let (offsets, weights) = self.corners(x);
        out.fill(T::ZERO);
        for (off, w) in offsets.into_iter().zip(weights) {
            crate::real::axpy(w, &params[off..off + self.payload], out);
        }
    }

    pub fn phi2<T: Real>(&self, feat: &[T], d: [T; 3]) -> RadianceSample<T> {
        let mut basis = [T::ZERO; 16];
        sh_basis_into(d, self.sh_degree, &mut basis[..self.n_basis]);
        let mut rgb = [T::ZERO; 3];
        for ch in 0..3 {
            let coeffs = &feat[1 + ch * self.n_basis..1 + (ch + 1) * self.n_basis];
            rgb[ch] = sigmoid(dot(coeffs, &basis[..self.n_basis]));
        }
        RadianceSample {
            sigma: feat[0],
            rgb,
        }
    }

    pub fn phi2_backward<T: Real>(
        &self,
        feat: &[T],
        d: [T; 3],
        d_sigma: T,
        d_rgb: [T; 3],
        dfeat: &mut [T],
    ) {
        let mut basis = [T::ZERO; 16];
        sh_basis_into(d, self.sh_degree, &mut basis[..self.n_basis]);
        dfeat[0] = d_sigma;
        for ch in 0..3 {
            let coeffs = &feat[1 + ch * self.n_basis..1 + (ch + 1) * self.n_basis];
            let s = sigmoid(dot(coeffs, &basis[..self.n_basis]));
            let dlogit = d_rgb[ch] * s * (T::ONE - s);
            for j in 0..self.n_basis {
                dfeat[1 + ch * self.n_basis + j] = dlogit * basis[j];
            }
        }
    }

    pub fn phi1_backward<T: Real>(&self, x: [T; 3], dfeat: &[T], grads: &mut [T]) {
        let (offsets, weights) = self.corners(x);
        for (off, w) in offsets.into_iter().zip(weights) {
            crate::real::axpy(w, dfeat, &mut grads[off..off + self.payload]);
        }
    }
}
