//! Pure-MLP field: an 8-layer ReLU trunk over the positionally encoded
//! location, a linear density head (no activation, density may go negative)
//! and a direction branch that concatenates the encoded view direction before
//! a final sigmoid color layer.
//!
//! The stage split runs the first `split_k` trunk layers in the encoder and
//! everything else in the decoder, so the feature is the trunk activation at
//! the boundary.

use super::{init_linear, linear_backward, linear_forward, relu_inplace, RadianceSample};
use crate::encodings::{encode_into, PosEncConfig};
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::real::{sigmoid, Real};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    /// Number of trunk layers evaluated by the encoder stage.
    pub split_k: usize,
    pub dir_width: usize,
    pub posenc_x: PosEncConfig,
    pub posenc_d: PosEncConfig,
}

impl MlpConfig {
    pub fn desk() -> Self {
        MlpConfig {
            depth: 8,
            width: 128,
            split_k: 4,
            dir_width: 64,
            posenc_x: PosEncConfig::new(10, true),
            posenc_d: PosEncConfig::new(4, true),
        }
    }

    pub fn paper() -> Self {
        MlpConfig {
            width: 256,
            dir_width: 128,
            ..Self::desk()
        }
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
pub(super) struct MlpRep {
    cfg: MlpConfig,
    in_dim: usize,
    dir_dim: usize,
    trunk: Vec<Layer>,
    sigma: Layer,
    dir: Layer,
    rgb: Layer,
}

impl MlpRep {
    pub fn new(cfg: &MlpConfig) -> Result<Self> {
        if cfg.depth < 2 {
            return Err(Error::Config("mlp depth must be at least 2".into()));
        }
        if cfg.split_k == 0 || cfg.split_k >= cfg.depth {
            return Err(Error::Config(format!(
                "mlp split_k must satisfy 1 <= k < depth, got {}",
                cfg.split_k
            )));
        }
        let in_dim = cfg.posenc_x.output_dim(3);
        let dir_dim = cfg.posenc_d.output_dim(3);
        let mut offset = 0;
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
        let mut trunk = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let cols = if i == 0 { in_dim } else { cfg.width };
            trunk.push(alloc(cfg.width, cols));
        }
        let sigma = alloc(1, cfg.width);
        let dir = alloc(cfg.dir_width, cfg.width + dir_dim);
        let rgb = alloc(3, cfg.dir_width);
        Ok(MlpRep {
            cfg: cfg.clone(),
            in_dim,
            dir_dim,
            trunk,
            sigma,
            dir,
            rgb,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.width
    }

    pub fn layout(&self) -> Vec<(String, usize, f64)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("mlp_l{i}_w"), l.rows * l.cols, 1.0));
            out.push((format!("mlp_l{i}_b"), l.rows, 1.0));
        }
        for (name, l) in [
            ("mlp_sigma", self.sigma),
            ("mlp_dir", self.dir),
            ("mlp_rgb", self.rgb),
        ] {
            out.push((format!("{name}_w"), l.rows * l.cols, 1.0));
            out.push((format!("{name}_b"), l.rows, 1.0));
        }
        out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) {
        for i in 0..self.cfg.depth {
            init_linear(store, &format!("mlp_l{i}_w"), self.trunk[i].cols, rng);
        }
        init_linear(store, "mlp_sigma_w", self.sigma.cols, rng);
        init_linear(store, "mlp_dir_w", self.dir.cols, rng);
        init_linear(store, "mlp_rgb_w", self.rgb.cols, rng);
    }

    fn encode_x<T: Real>(&self, x: [T; 3]) -> Vec<T> {
        let mut enc = Vec::with_capacity(self.in_dim);
        encode_into(&x, &self.cfg.posenc_x, &mut enc);
        enc
    }

    fn encode_d<T: Real>(&self, d: [T; 3]) -> Vec<T> {
        let mut enc = Vec::with_capacity(self.dir_dim);
        encode_into(&d, &self.cfg.posenc_d, &mut enc);
        enc
    }

    /// Trunk activations for layers `range`, starting from `input`.
    fn run_trunk<T: Real>(
        &self,
        params: &[T],
        input: Vec<T>,
        layers: std::ops::Range<usize>,
    ) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(input);
        for i in layers {
            let l = self.trunk[i];
            let mut next = vec![T::ZERO; l.rows];
            linear_forward(params, l.w, l.b, acts.last().unwrap(), &mut next);
            relu_inplace(&mut next);
            acts.push(next);
        }
        acts
    }

    pub fn phi1<T: Real>(&self, params: &[T], x: [T; 3], _d: [T; 3], out: &mut [T]) {
        let acts = self.run_trunk(params, self.encode_x(x), 0..self.cfg.split_k);
        out.copy_from_slice(acts.last().unwrap());
    }

    pub fn phi2<T: Real>(&self, params: &[T], feat: &[T], d: [T; 3]) -> RadianceSample<T> {
        let acts = self.run_trunk(params, feat.to_vec(), self.cfg.split_k..self.cfg.depth);
        let h = acts.last().unwrap();
        let mut sigma = [T::ZERO; 1];
        linear_forward(params, self.sigma.w, self.sigma.b, h, &mut sigma);

        let mut cat = h.clone();
        cat.extend(self.encode_d(d));
        let mut hc = vec![T::ZERO; self.cfg.dir_width];
        linear_forward(params, self.dir.w, self.dir.b, &cat, &mut hc);
        relu_inplace(&mut hc);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &hc, &mut logits);
        RadianceSample {
            sigma: sigma[0],
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
        // Recompute the forward pass to get every activation.
        let acts = self.run_trunk(params, feat.to_vec(), self.cfg.split_k..self.cfg.depth);
        let h = acts.last().unwrap();
        let mut cat = h.clone();
        cat.extend(self.encode_d(d));
        let mut hc = vec![T::ZERO; self.cfg.dir_width];
        linear_forward(params, self.dir.w, self.dir.b, &cat, &mut hc);
        relu_inplace(&mut hc);
        let mut logits = [T::ZERO; 3];
        linear_forward(params, self.rgb.w, self.rgb.b, &hc, &mut logits);

        // Color head.
        let mut dlogits = [T::ZERO; 3];
        for c in 0..3 {
            let s = sigmoid(logits[c]);
            dlogits[c] = d_rgb[c] * s * (T::ONE - s);
        }
        let mut dhc = vec![T::ZERO; self.cfg.dir_width];
        linear_backward(params, self.rgb.w, self.rgb.b, &hc, &dlogits, grads, Some(&mut dhc));
        for (g, a) in dhc.iter_mut().zip(&hc) {
            if *a <= T::ZERO {
                *g = T::ZERO;
            }
        }
        let mut dcat = vec![T::ZERO; cat.len()];
        linear_backward(params, self.dir.w, self.dir.b, &cat, &dhc, grads, Some(&mut dcat));

        // Gradient at the trunk output: direction branch plus density head.
        let mut dh = dcat[..self.cfg.width].to_vec();
        linear_backward(params, self.sigma.w, self.sigma.b, h, &[d_sigma], grads, Some(&mut dh));

        // Decoder-side trunk layers, in reverse.
        for (rev, i) in (self.cfg.split_k..self.cfg.depth).rev().enumerate() {
            let act_idx = acts.len() - 1 - rev;
            for (g, a) in dh.iter_mut().zip(&acts[act_idx]) {
                if *a <= T::ZERO {
                    *g = T::ZERO;
                }
            }
            let l = self.trunk[i];
            let input = &acts[act_idx - 1];
            let mut dprev = vec![T::ZERO; input.len()];
            linear_backward(params, l.w, l.b, input, &dh, grads, Some(&mut dprev));
            dh = dprev;
        }
        dfeat.copy_from_slice(&dh);
    }

    pub fn phi1_backward<T: Real>(
        &self,
        params: &[T],
        x: [T; 3],
        _d: [T; 3],
        dfeat: &[T],
        grads: &mut [T],
    ) {
        let acts = self.run_trunk(params, self.encode_x(x), 0..self.cfg.split_k);
        let mut dh = dfeat.to_vec();
        for i in (0..self.cfg.split_k).rev() {
            for (g, a) in dh.iter_mut().zip(&acts[i + 1]) {
                if *a <= T::ZERO {
                    *g = T::ZERO;
                }
            }
            let l = self.trunk[i];
            let needs_dx = i > 0;
            let mut dprev = vec![T::ZERO; acts[i].len()];
            linear_backward(
                params,
                l.w,
                l.b,
                &acts[i],
                &dh,
                grads,
                needs_dx.then_some(&mut dprev[..]),
            );
            dh = dprev;
        }
    }
}
