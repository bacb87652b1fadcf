use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam accumulators for a fixed set of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn for_mlp(net: &Mlp) -> Self {
        Self::new(net.num_params())
    }
}

/// One Adam update over parameters given as matching lists of slices.
///
/// Nothing is modified when the shapes disagree or any gradient is
/// non-finite.
pub fn adam_step_slices(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("parameter and gradient groups differ"));
    }
    let mut total = 0;
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::shape(format!(
                "parameter group of {} values paired with {} gradients",
                p.len(),
                g.len()
            )));
        }
        total += p.len();
    }
    if total != state.first_moment.len() || total != state.second_moment.len() {
        return Err(Error::shape(format!("adam state tracks {} parameters, got {total}", state.first_moment.len())));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("non-finite gradient passed to adam"));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut k = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut state.first_moment[k];
            let v = &mut state.second_moment[k];
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            k += 1;
        }
    }
    Ok(())
}

/// Adam over a flat parameter vector.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_slices(&mut [params], &[grads], state, lr)
}

pub fn adam_step_mlp(net: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let g = grads.param_slices();
    let mut p = net.param_slices_mut();
    adam_step_slices(&mut p, &g, state, lr)
}

/// Adaptive gradient clipping settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradClipConfig {
    pub factor: f64,
    pub zero_norm_guard: f64,
}

impl Default for GradClipConfig {
    fn default() -> Self {
        Self { factor: 0.01, zero_norm_guard: 1e-3 }
    }
}

impl GradClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0) || !(self.zero_norm_guard > 0.0) {
            return Err(Error::invalid(format!("clip factor and zero-norm guard must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clips a single unit: if `‖g‖ / max(‖w‖, guard) > factor`, rescales `g` to
/// norm `factor · max(‖w‖, guard)`.
pub fn agc_clip_unit(grad: &mut [f64], weight: &[f64], cfg: &GradClipConfig) {
    let max_norm = cfg.factor * l2(weight).max(cfg.zero_norm_guard);
    let g_norm = l2(grad);
    if g_norm > max_norm {
        let scale = max_norm / g_norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Unit-wise adaptive gradient clipping: each row of a weight matrix (one
/// output unit) and each bias vector as a whole.
pub fn agc_clip(grads: &mut Gradients, params: &Mlp, cfg: &GradClipConfig) -> Result<()> {
    if grads.layers.len() != params.layers().len() {
        return Err(Error::shape("gradients do not match network"));
    }
    for (g, w) in grads.layers.iter_mut().zip(params.layers()) {
        if g.weight.dim() != w.weight.dim() || g.bias.len() != w.bias.len() {
            return Err(Error::shape("gradient layer shape differs from parameter layer"));
        }
        for (mut g_row, w_row) in g.weight.rows_mut().into_iter().zip(w.weight.rows()) {
            let g_slice = g_row.as_slice_mut().expect("standard layout");
            agc_clip_unit(g_slice, w_row.as_slice().expect("standard layout"), cfg);
        }
        agc_clip_unit(g.bias.as_slice_mut().expect("contiguous"), w.bias.as_slice().expect("contiguous"), cfg);
    }
    Ok(())
}
