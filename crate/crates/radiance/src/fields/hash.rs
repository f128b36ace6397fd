//! Multiresolution hash field: per-level feature tables indexed by an
//! XOR-folded lattice hash, trilinearly blended and concatenated into the
//! stage-one feature, decoded by a small two-hidden-layer MLP. The density
//! head reads the first hidden layer so density stays direction-free; the
//! encoded view direction joins before the second hidden layer.

use super::{init_linear, linear_backward, linear_forward, relu_inplace, RadianceSample};
use crate::encodings::{
    encode_into, hash_index, level_resolutions, trilinear_weights, HashConfig, PosEncConfig,
    HASH_PRIMES,
};
use crate::error::Result;
use crate::grad::ParamStore;
use crate::real::{dot, sigmoid, Real};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashFieldConfig {
    pub hash: HashConfig,
    pub hidden: usize,
    pub posenc_d: PosEncConfig,
}

impl HashFieldConfig {
    pub fn desk() -> Self {
        HashFieldConfig {
            hash: HashConfig {
                table_size: 1 << 15,
                primes: HASH_PRIMES,
                levels: 14,
                base_resolution: 16,
                max_resolution: 256,
                features_per_level: 2,
            },
            hidden: 64,
            posenc_d: PosEncConfig::new(4, true),
        }
    }

    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.hash.table_size = 1 << 19;
        cfg.hash.max_resolution = 2048;
        cfg
    }

    /// Miniature variant for unit tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.hash.table_size = 1 << 10;
        cfg.hash.levels = 4;
        cfg.hash.base_resolution = 4;
        cfg.hash.max_resolution = 16;
        cfg.hidden = 16;
        cfg
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
pub(super) struct HashRep {
    cfg: HashFieldConfig,
    resolutions: Vec<u32>,
    feature_dim: usize,
    table_offsets: Vec<usize>,
    w1: Layer,
    sigma: Layer,
    w2: Layer,
    rgb: Layer,
}

impl HashRep {
    pub fn new(cfg: &HashFieldConfig) -> Result<Self> {
        let resolutions = level_resolutions(&cfg.hash)?;
        let feature_dim = cfg.hash.levels * cfg.hash.features_per_level;
        let dir_dim = cfg.posenc_d.output_dim(3);
        let table_len = cfg.hash.table_size * cfg.hash.features_per_level;
        let mut offset = 0;
        let mut table_offsets = Vec::with_capacity(cfg.hash.levels);
        for _ in 0..cfg.hash.levels {
            table_offsets.push(offset);
            offset += table_len;
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
        let w1 = alloc(cfg.hidden, feature_dim);
        let sigma = alloc(1, cfg.hidden);
        let w2 = alloc(cfg.hidden, cfg.hidden + dir_dim);
        let rgb = alloc(3, cfg.hidden);
        Ok(HashRep {
            cfg: cfg.clone(),
            resolutions,
            feature_dim,
            table_offsets,
            w1,
            sigma,
            w2,
            rgb,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layout(&self) -> Vec<(String, usize, f64)> {
        let table_len = self.cfg.hash.table_size * self.cfg.hash.features_per_level;
        let mut out = Vec::new();
        for l in 0..self.cfg.hash.levels {
            out.push((format!("hash_table_l{l:02}"), table_len, 1.0));
        }
        // The decoder trains at 0.001 next to grid-like tables at 0.02.
        for (name, l) in [
            ("hash_dec_w1", self.w1),
            ("hash_dec_sigma", self.sigma),
            ("hash_dec_w2", self.w2),
            ("hash_dec_rgb", self.rgb),
        ] {
            out.push((format!("{name}_w"), l.rows * l.cols, 0.05));
            out.push((format!("{name}_b"), l.rows, 0.05));
        }
        out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) {
        for l in 0..self.cfg.hash.levels {
            let range = store.segment_range(&format!("hash_table_l{l:02}")).unwrap();
            for slot in &mut store.values_mut()[range] {
                *slot = T::cast(rng.gen_range(-1e-4..1e-4));
            }
        }
        init_linear(store, "hash_dec_w1_w", self.w1.cols, rng);
        init_linear(store, "hash_dec_sigma_w", self.sigma.cols, rng);
        init_linear(store, "hash_dec_w2_w", self.w2.cols, rng);
        init_linear(store, "hash_dec_rgb_w", self.rgb.cols, rng);
    }

    /// Eight (table slot, weight) pairs for one level around a point already
    /// mapped into [0, 1]^3.
    #[inline]
    fn level_corners<T: Real>(
        &self,
        p: [T; 3],
        level: usize,
    ) -> ([usize; 8], [T; 8]) {
        let n = self.resolutions[level];
        let scale = T::cast(n as f64);
        let mut cell = [0u32; 3];
        let mut local = [T::ZERO; 3];
        for a in 0..3 {
            let u = p[a] * scale;
            let c = (u.floor().to_f64().max(0.0) as u32).min(n - 1);
            cell[a] = c;
            local[a] = u - T::cast(c as f64);
        }
        let weights = trilinear_weights(local);
        let f = self.cfg.hash.features_per_level;
        let base = self.table_offsets[level];
        let slots = std::array::from_fn(|c| {
            let corner = [
                cell[0] + (c as u32 >> 2 & 1),
                cell[1] + (c as u32 >> 1 & 1),
                cell[2] + (c as u32 & 1),
            ];
            base + hash_index(corner, &self.cfg.hash) * f
        });
        (slots, weights)
    }

    pub fn phi1<T: Real>(&self, params: &[T], x: [T; 3], out: &mut [T]) {
        let half = T::cast(0.5);
        let p = [
            (x[0] + T::ONE) * half,
            (x[1] + T::ONE) * half,
            (x[2] + T::ONE) * half,
        ];
        let f = self.cfg.hash.features_per_level;
        for level in 0..self.cfg.hash.levels {
            let (slots, weights) = self.level_corners(p, level);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(T::ZERO);
            for (slot, w) in slots.into_iter().zip(weights) {
                for k in 0..f {
                    dst[k] += w * params[slot + k];
                }
            }
        }
    }

    pub fn phi2<T: Real>(&self, params: &[T], feat: &[T], d: [T; 3]) -> RadianceSample<T> {
        let mut h1 = vec![T::ZERO; self.cfg.hidden];
        linear_forward(params, self.w1.w, self.w1.b, feat, &mut h1);
        relu_inplace(&mut h1);
        let sigma = dot(&params[self.sigma.w..self.sigma.w + self.cfg.hidden], &h1)
            + params[self.sigma.b];
        let mut cat = h1;
        encode_into(&d, &self.cfg.posenc_d, &mut cat);
        let mut h2 = vec![T::ZERO; self.cfg.hidden];
        linear_forward(params, self.w2.w, self.w2.b, &cat, &mut h2);
        relu_inplace(&mut h2);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &h2, &mut logits);
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
        let mut h1 = vec![T::ZERO; self.cfg.hidden];
        linear_forward(params, self.w1.w, self.w1.b, feat, &mut h1);
        relu_inplace(&mut h1);
        let mut cat = h1.clone();
        encode_into(&d, &self.cfg.posenc_d, &mut cat);
        let mut h2 = vec![T::ZERO; self.cfg.hidden];
        linear_forward(params, self.w2.w, self.w2.b, &cat, &mut h2);
        relu_inplace(&mut h2);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &h2, &mut logits);

        let mut dlogits = [T::ZERO; 3];
        for c in 0..3 {
            let s = sigmoid(logits[c]);
            dlogits[c] = d_rgb[c] * s * (T::ONE - s);
        }
        let mut dh2 = vec![T::ZERO; self.cfg.hidden];
        linear_backward(params, self.rgb.w, self.rgb.b, &h2, &dlogits, grads, Some(&mut dh2));
        for (g, a) in dh2.iter_mut().zip(&h2) {
            if *a <= T::ZERO {
                *g = T::ZERO;
            }
        }
        let mut dcat = vec![T::ZERO; cat.len()];
        linear_backward(params, self.w2.w, self.w2.b, &cat, &dh2, grads, Some(&mut dcat));

        let mut dh1 = dcat[..self.cfg.hidden].to_vec();
        linear_backward(params, self.sigma.w, self.sigma.b, &h1, &[d_sigma], grads, Some(&mut dh1));
        for (g, a) in dh1.iter_mut().zip(&h1) {
            if *a <= T::ZERO {
                *g = T::ZERO;
            }
        }
        dfeat.fill(T::ZERO);
        linear_backward(params, self.w1.w, self.w1.b, feat, &dh1, grads, Some(dfeat));
    }

    pub fn phi1_backward<T: Real>(&self, x: [T; 3], dfeat: &[T], grads: &mut [T]) {
        let half = T::cast(0.5);
        let p = [
            (x[0] + T::ONE) * half,
            (x[1] + T::ONE) * half,
            (x[2] + T::ONE) * half,
        ];
        let f = self.cfg.hash.features_per_level;
        for level in 0..self.cfg.hash.levels {
            let (slots, weights) = self.level_corners(p, level);
            let src = &dfeat[level * f..(level + 1) * f];
            for (slot, w) in slots.into_iter().zip(weights) {
                for k in 0..f {
                    grads[slot + k] += w * src[k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldConfig, FieldPair};

    fn tiny() -> FieldConfig {
        FieldConfig::Hash(HashFieldConfig::tiny())
    }

    #[test]
    fn zeroed_tables_give_zero_feature() {
        let mut field: FieldPair<f64> = FieldPair::init(&tiny(), 0).unwrap();
        for l in 0..4 {
            let range = field
                .params
                .segment_range(&format!("hash_table_l{l:02}"))
                .unwrap();
            field.params.values_mut()[range].fill(0.0);
        }
        let feat = field.eval_phi1([0.3, -0.2, 0.9], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(feat.len(), 8);
        assert!(feat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fresh_feature_magnitudes_bounded_by_init_range() {
        let field: FieldPair<f64> = FieldPair::init(&tiny(), 0).unwrap();
        let mut rng = crate::rng::stream(9, "hash-init");
        use rand::Rng;
        for _ in 0..100 {
            let x = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let feat = field.eval_phi1(x, [0.0, 0.0, 1.0]).unwrap();
            for v in feat {
                assert!(v.abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut field: FieldPair<f64> = FieldPair::init(&tiny(), 11).unwrap();
        // Check at a generic operating point: freshly initialized tables are
        // ~1e-4, which parks every decoder preactivation on the ReLU kink
        // where finite differences are meaningless.
        {
            use rand::Rng;
            let mut rng = crate::rng::stream(11, "gradcheck-tables");
            for l in 0..4 {
                let range = field
                    .params
                    .segment_range(&format!("hash_table_l{l:02}"))
                    .unwrap();
                for slot in &mut field.params.values_mut()[range] {
                    *slot = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let x = [0.4, 0.1, -0.7];
        let d = [0.0, 0.6, 0.8];
        let loss = |f: &FieldPair<f64>| {
            let s = f.eval_field(x, d).unwrap();
            2.0 * s.sigma + s.rgb[0] + s.rgb[1] + s.rgb[2]
        };
        let mut values = field.params.values().to_vec();
        let report = crate::grad::grad_check(
            &mut values,
            |v| {
                let mut f = field.clone();
                f.params.values_mut().copy_from_slice(v);
                loss(&f)
            },
            |v, g| {
                let mut f = field.clone();
                f.params.values_mut().copy_from_slice(v);
                let feat = f.eval_phi1(x, d).unwrap();
                let mut dfeat = vec![0.0; feat.len()];
                f.phi2_backward(&feat, d, 2.0, [1.0, 1.0, 1.0], g, &mut dfeat);
                f.phi1_backward(x, d, &dfeat, g);
                loss(&f)
            },
            120,
            1e-5,
            4,
        );
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
