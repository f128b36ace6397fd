//! Low-rank tensor field: three axis pairings, each holding a set of
//! vector (x) matrix outer-product components. Four components per pairing
//! carry density (summed directly into sigma), twelve carry appearance
//! features decoded by a small MLP together with a degree-3 SH encoding of
//! the view direction.

use super::grid::axis_cell;
use super::{init_linear, linear_backward, linear_forward, relu_inplace, RadianceSample};
use crate::encodings::sh_basis_into;
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::real::{sigmoid, Real};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmConfig {
    pub resolution: [usize; 3],
    /// Density components per axis pairing.
    pub density_ranks: usize,
    /// Appearance components per axis pairing.
    pub appearance_ranks: usize,
    pub hidden: usize,
    pub dir_sh_degree: usize,
}

impl VmConfig {
    /// 48 components total: 3 pairings x (4 density + 12 appearance).
    pub fn desk() -> Self {
        VmConfig {
            resolution: [64, 64, 64],
            density_ranks: 4,
            appearance_ranks: 12,
            hidden: 128,
            dir_sh_degree: 3,
        }
    }

    pub fn paper() -> Self {
        VmConfig {
            resolution: [300, 300, 300],
            ..Self::desk()
        }
    }

    pub fn total_components(&self) -> usize {
        3 * (self.density_ranks + self.appearance_ranks)
    }
}

/// Plane axes (rows, cols) paired with vector axis `a`, in ascending order.
#[inline]
fn plane_axes(a: usize) -> (usize, usize) {
    match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
pub(super) struct VmRep {
    res: [usize; 3],
    rd: usize,
    ra: usize,
    hidden: usize,
    dir_deg: usize,
    dir_dim: usize,
    den_vec: [usize; 3],
    den_mat: [usize; 3],
    app_vec: [usize; 3],
    app_mat: [usize; 3],
    w1: Layer,
    rgb: Layer,
}

impl VmRep {
    pub fn new(cfg: &VmConfig) -> Result<Self> {
        if cfg.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!(
                "vm resolution must be at least 2 per axis, got {:?}",
                cfg.resolution
            )));
        }
        if cfg.dir_sh_degree > crate::encodings::MAX_SH_DEGREE {
            return Err(Error::UnsupportedDegree(cfg.dir_sh_degree));
        }
        if cfg.density_ranks == 0 && cfg.appearance_ranks == 0 {
            return Err(Error::Config("vm field needs at least one component".into()));
        }
        let dir_dim = crate::encodings::sh_basis_len(cfg.dir_sh_degree);
        let mut offset = 0;
        let mut den_vec = [0; 3];
        let mut den_mat = [0; 3];
        let mut app_vec = [0; 3];
        let mut app_mat = [0; 3];
        for a in 0..3 {
            let (b, c) = plane_axes(a);
            den_vec[a] = offset;
            offset += cfg.density_ranks * cfg.resolution[a];
            den_mat[a] = offset;
            offset += cfg.density_ranks * cfg.resolution[b] * cfg.resolution[c];
        }
        for a in 0..3 {
            let (b, c) = plane_axes(a);
            app_vec[a] = offset;
            offset += cfg.appearance_ranks * cfg.resolution[a];
            app_mat[a] = offset;
            offset += cfg.appearance_ranks * cfg.resolution[b] * cfg.resolution[c];
        }
        let mut alloc = |rows: usize, cols: usize| {
            let layer = Layer {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            };
            offset += rows * cols + rows;
            layer
        };
        let w1 = alloc(cfg.hidden, 3 * cfg.appearance_ranks + dir_dim);
        let rgb = alloc(3, cfg.hidden);
        Ok(VmRep {
            res: cfg.resolution,
            rd: cfg.density_ranks,
            ra: cfg.appearance_ranks,
            hidden: cfg.hidden,
            dir_deg: cfg.dir_sh_degree,
            dir_dim,
            den_vec,
            den_mat,
            app_vec,
            app_mat,
            w1,
            rgb,
        })
    }

    pub fn feature_dim(&self) -> usize {
        3 * (self.rd + self.ra)
    }

    pub fn layout(&self) -> Vec<(String, usize, f64)> {
        let mut out = Vec::new();
        for a in 0..3 {
            let (b, c) = plane_axes(a);
            out.push((format!("vm_den_vec_{a}"), self.rd * self.res[a], 1.0));
            out.push((
                format!("vm_den_mat_{a}"),
                self.rd * self.res[b] * self.res[c],
                1.0,
            ));
        }
        for a in 0..3 {
            let (b, c) = plane_axes(a);
            out.push((format!("vm_app_vec_{a}"), self.ra * self.res[a], 1.0));
            out.push((
                format!("vm_app_mat_{a}"),
                self.ra * self.res[b] * self.res[c],
                1.0,
            ));
        }
        for (name, l) in [("vm_dec_w1", self.w1), ("vm_dec_rgb", self.rgb)] {
            out.push((format!("{name}_w"), l.rows * l.cols, 0.05));
            out.push((format!("{name}_b"), l.rows, 0.05));
        }
        out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) {
        let normal = rand_distr::Normal::new(0.0f64, 0.1).unwrap();
        for kind in ["den", "app"] {
            for part in ["vec", "mat"] {
                for a in 0..3 {
                    let range = store
                        .segment_range(&format!("vm_{kind}_{part}_{a}"))
                        .unwrap();
                    for slot in &mut store.values_mut()[range] {
                        *slot = T::cast(normal.sample(rng));
                    }
                }
            }
        }
        init_linear(store, "vm_dec_w1_w", self.w1.cols, rng);
        init_linear(store, "vm_dec_rgb_w", self.rgb.cols, rng);
    }

    /// Interpolation state shared by forward and backward.
    fn cells<T: Real>(&self, x: [T; 3]) -> ([usize; 3], [T; 3]) {
        let mut cell = [0; 3];
        let mut frac = [T::ZERO; 3];
        for a in 0..3 {
            let (c, f) = axis_cell(x[a], self.res[a]);
            cell[a] = c;
            frac[a] = f;
        }
        (cell, frac)
    }

    /// Linear interpolation of one component vector along its axis.
    #[inline]
    fn vec_value<T: Real>(&self, params: &[T], off: usize, r: usize, a: usize, cell: &[usize; 3], frac: &[T; 3]) -> T {
        let base = off + r * self.res[a] + cell[a];
        params[base] * (T::ONE - frac[a]) + params[base + 1] * frac[a]
    }

    /// Bilinear interpolation of one component matrix on its plane.
    #[inline]
    fn mat_value<T: Real>(&self, params: &[T], off: usize, r: usize, a: usize, cell: &[usize; 3], frac: &[T; 3]) -> T {
        let (b, c) = plane_axes(a);
        let nc = self.res[c];
        let base = off + r * self.res[b] * nc + cell[b] * nc + cell[c];
        let (fb, fc) = (frac[b], frac[c]);
        let (gb, gc) = (T::ONE - fb, T::ONE - fc);
        params[base] * gb * gc
            + params[base + 1] * gb * fc
            + params[base + nc] * fb * gc
            + params[base + nc + 1] * fb * fc
    }

    pub fn phi1<T: Real>(&self, params: &[T], x: [T; 3], out: &mut [T]) {
        let (cell, frac) = self.cells(x);
        for a in 0..3 {
            for r in 0..self.rd {
                let v = self.vec_value(params, self.den_vec[a], r, a, &cell, &frac);
                let m = self.mat_value(params, self.den_mat[a], r, a, &cell, &frac);
                out[a * self.rd + r] = v * m;
            }
        }
        let app0 = 3 * self.rd;
        for a in 0..3 {
            for r in 0..self.ra {
                let v = self.vec_value(params, self.app_vec[a], r, a, &cell, &frac);
                let m = self.mat_value(params, self.app_mat[a], r, a, &cell, &frac);
                out[app0 + a * self.ra + r] = v * m;
            }
        }
    }

    pub fn phi2<T: Real>(&self, params: &[T], feat: &[T], d: [T; 3]) -> RadianceSample<T> {
        let mut sigma = T::ZERO;
        for &v in &feat[..3 * self.rd] {
            sigma += v;
        }
        let mut cat = feat[3 * self.rd..].to_vec();
        let dir_start = cat.len();
        cat.resize(dir_start + self.dir_dim, T::ZERO);
        sh_basis_into(d, self.dir_deg, &mut cat[dir_start..]);
        let mut h = vec![T::ZERO; self.hidden];
        linear_forward(params, self.w1.w, self.w1.b, &cat, &mut h);
        relu_inplace(&mut h);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &h, &mut logits);
        RadianceSample {
            sigma,
            rgb: [sigmoid(logits[0]), sigmoid(logits[1]), sigmoid(logits[2])],
        }
    }

    pub fn phi2_backward<T: Real>(
        &self,
        params: &[T],
        feat: &[T],
        d: [T; 3],
        d_sigma: T,
        d_rgb: [T; 3],
        grads: &mut [T],
        dfeat: &mut [T],
    ) {
        let mut cat = feat[3 * self.rd..].to_vec();
        let dir_start = cat.len();
        cat.resize(dir_start + self.dir_dim, T::ZERO);
        sh_basis_into(d, self.dir_deg, &mut cat[dir_start..]);
        let mut h = vec![T::ZERO; self.hidden];
        linear_forward(params, self.w1.w, self.w1.b, &cat, &mut h);
        relu_inplace(&mut h);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &h, &mut logits);

        let mut dlogits = [T::ZERO; 3];
        for c in 0..3 {
            let s = sigmoid(logits[c]);
            dlogits[c] = d_rgb[c] * s * (T::ONE - s);
        }
        let mut dh = vec![T::ZERO; self.hidden];
        linear_backward(params, self.rgb.w, self.rgb.b, &h, &dlogits, grads, Some(&mut dh));
        for (g, a) in dh.iter_mut().zip(&h) {
            if *a <= T::ZERO {
                *g = T::ZERO;
            }
        }
        let mut dcat = vec![T::ZERO; cat.len()];
        linear_backward(params, self.w1.w, self.w1.b, &cat, &dh, grads, Some(&mut dcat));

        // Density block is an identity sum into sigma.
        for slot in &mut dfeat[..3 * self.rd] {
            *slot = d_sigma;
        }
        dfeat[3 * self.rd..].copy_from_slice(&dcat[..3 * self.ra]);
    }

    pub fn phi1_backward<T: Real>(&self, params: &[T], x: [T; 3], dfeat: &[T], grads: &mut [T]) {
        let (cell, frac) = self.cells(x);
        let app0 = 3 * self.rd;
        for a in 0..3 {
            for r in 0..self.rd {
                self.component_backward(
                    params,
                    grads,
                    (self.den_vec[a], self.den_mat[a]),
                    r,
                    a,
                    &cell,
                    &frac,
                    dfeat[a * self.rd + r],
                );
            }
            for r in 0..self.ra {
                self.component_backward(
                    params,
                    grads,
                    (self.app_vec[a], self.app_mat[a]),
                    r,
                    a,
                    &cell,
                    &frac,
                    dfeat[app0 + a * self.ra + r],
                );
            }
        }
    }

    /// Product rule through `feature = lerp(vector) * bilerp(matrix)`.
    #[allow(clippy::too_many_arguments)]
    fn component_backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        (vec_off, mat_off): (usize, usize),
        r: usize,
        a: usize,
        cell: &[usize; 3],
        frac: &[T; 3],
        dvalue: T,
    ) {
        let vval = self.vec_value(params, vec_off, r, a, cell, frac);
        let mval = self.mat_value(params, mat_off, r, a, cell, frac);

        let vbase = vec_off + r * self.res[a] + cell[a];
        let dv = dvalue * mval;
        grads[vbase] += dv * (T::ONE - frac[a]);
        grads[vbase + 1] += dv * frac[a];

        let (b, c) = plane_axes(a);
        let nc = self.res[c];
        let mbase = mat_off + r * self.res[b] * nc + cell[b] * nc + cell[c];
        let dm = dvalue * vval;
        let (fb, fc) = (frac[b], frac[c]);
        let (gb, gc) = (T::ONE - fb, T::ONE - fc);
        grads[mbase] += dm * gb * gc;
        grads[mbase + 1] += dm * gb * fc;
        grads[mbase + nc] += dm * fb * gc;
        grads[mbase + nc + 1] += dm * fb * fc;
    }
}
