//! Dense feed-forward networks with explicit reverse-mode gradients, Adam,
//! and unit-wise adaptive gradient clipping.
//!
//! Losses elsewhere in the crate compute their own upstream gradient and
//! push it through [`Mlp::backward`], chaining networks by feeding the
//! returned input gradient into the previous network's backward pass.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{load_mlp, save_mlp, LayerRecord, MlpCheckpoint, CHECKPOINT_FORMAT_VERSION};
pub use mlp::{Activation, Dense, Gradients, Mlp, Trace};
pub use optim::{
    adam_step, adam_step_mlp, adam_step_slices, agc_clip, agc_clip_unit, AdamState, GradClipConfig, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPSILON,
};

pub(crate) use mlp::checksum_values;

/// `input → hidden… → output` layer dims.
pub fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// A network paired with its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainable {
    pub net: Mlp,
    pub adam: AdamState,
}

impl Trainable {
    pub fn new(net: Mlp) -> Self {
        let adam = AdamState::for_mlp(&net);
        Self { net, adam }
    }

    /// Optional clipping followed by one Adam update.
    pub fn apply(&mut self, mut grads: Gradients, lr: f64, clip: Option<&GradClipConfig>) -> crate::Result<()> {
        if let Some(cfg) = clip {
            agc_clip(&mut grads, &self.net, cfg)?;
        }
        adam_step_mlp(&mut self.net, &grads, &mut self.adam, lr)
    }
}
