use super::store::ParamStore;
use crate::error::Result;
use crate::real::Real;

/// Bias-corrected Adam over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(param_len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![T::ZERO; param_len],
            v: vec![T::ZERO; param_len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Grow the moment buffers when a segment was appended to the store.
    pub fn resize(&mut self, param_len: usize) {
        self.m.resize(param_len, T::ZERO);
        self.v.resize(param_len, T::ZERO);
    }

    pub fn truncate(&mut self, param_len: usize) {
        self.m.truncate(param_len);
        self.v.truncate(param_len);
    }
}

/// One Adam update from the store's gradient buffer; honors per-segment
/// learning-rate multipliers and zeroes the gradients afterwards.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    assert_eq!(state.m.len(), store.len(), "optimizer state length mismatch");
    store.check_finite_grads("before adam step")?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let beta1 = T::cast(state.beta1);
    let beta2 = T::cast(state.beta2);
    let one_minus_b1 = T::ONE - beta1;
    let one_minus_b2 = T::ONE - beta2;
    let corr1 = T::ONE - T::cast(state.beta1).powi(t);
    let corr2 = T::ONE - T::cast(state.beta2).powi(t);
    let eps = T::cast(state.eps);

    let base_lr = state.lr;
    let m = &mut state.m;
    let v = &mut state.v;
    // Update segment by segment so each uses its own effective rate.
    let (values, grads, segments) = store.split_update();
    for seg in segments {
        let lr = T::cast(base_lr * seg.lr_mult);
        for i in seg.offset..seg.offset + seg.len {
            let g = grads[i];
            m[i] = beta1 * m[i] + one_minus_b1 * g;
            v[i] = beta2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Exponential decay to one tenth of the base rate over the full run.
pub fn lr_schedule(step: u64, total: u64, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * 0.1f64.powf(step as f64 / total as f64)
}
