use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Multiplies `delta` by the derivative, given the post-activation values.
    fn backprop(self, delta: &mut Array2<f64>, activated: &Array2<f64>) {
        if self == Activation::Relu {
            delta.zip_mut_with(activated, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
    }
}

/// One affine layer. `weight` is `(out, in)`, so each row is one output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Feed-forward network: affine layers with a shared hidden activation and a
/// separate output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Activations recorded by [`Mlp::forward_traced`]; `activations[0]` is the
/// input batch and the last entry is the network output.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace has at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("trace has at least the input")
    }
}

/// Parameter-shaped gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::shape(format!("an mlp needs at least input and output dims, got {layer_dims:?}")));
    }
    if layer_dims.contains(&0) {
        return Err(Error::shape(format!("layer dims must be positive, got {layer_dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Rectifier hidden layers and a linear head, weights drawn uniformly in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.input_dim() + layer.output_dim()) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let layers = layer_dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
        })
    }

    /// Builds a network from explicit layers; shapes must chain.
    pub fn from_layers(
        layers: Vec<Dense>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an mlp needs at least one layer"));
        }
        let mut layer_dims = vec![layers[0].input_dim()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() != *layer_dims.last().unwrap() {
                return Err(Error::shape(format!(
                    "layer {i} expects {} inputs but the previous layer emits {}",
                    layer.input_dim(),
                    layer_dims.last().unwrap()
                )));
            }
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(format!(
                    "layer {i} has {} outputs but {} biases",
                    layer.output_dim(),
                    layer.bias.len()
                )));
            }
            layer_dims.push(layer.output_dim());
        }
        check_dims(&layer_dims)?;
        // Owned, standard-layout copies so flat parameter views always exist.
        let layers = layers
            .into_iter()
            .map(|l| Dense { weight: l.weight.as_standard_layout().into_owned(), bias: l.bias })
            .collect();
        Ok(Self { layer_dims, layers, hidden_activation, output_activation })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a `(batch, input_dim)` matrix.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut act = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            self.activation(i).apply(&mut z);
            act = z;
        }
        Ok(act)
    }

    /// Forward pass that keeps every intermediate activation for
    /// [`Mlp::backward`].
    pub fn forward_traced(&self, input: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(input.ncols())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weight.t());
            z += &layer.bias;
            self.activation(i).apply(&mut z);
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape(format!("network expects {} inputs, got {cols}", self.input_dim())));
        }
        Ok(())
    }

    /// Vector-Jacobian product through the network.
    ///
    /// `d_output` is the gradient of a scalar loss with respect to the traced
    /// output and must have the output's shape. Parameter gradients are added
    /// into `grads`; the gradient with respect to the input batch is returned.
    pub fn backward(&self, trace: &Trace, d_output: ArrayView2<f64>, grads: &mut Gradients) -> Result<Array2<f64>> {
        if d_output.dim() != trace.output().dim() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match network output {:?}",
                d_output.dim(),
                trace.output().dim()
            )));
        }
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::shape("trace was recorded by a different network"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("gradient storage does not match network"));
        }
        let mut delta = d_output.to_owned();
        for l in (0..self.layers.len()).rev() {
            self.activation(l).backprop(&mut delta, &trace.activations[l + 1]);
            let g = &mut grads.layers[l];
            g.weight += &delta.t().dot(&trace.activations[l]);
            g.bias += &delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[l].weight);
        }
        Ok(delta)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients { layers: self.layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect() }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters as contiguous slices: each layer's weight (row-major) then
    /// its bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        dense_slices_mut(&mut self.layers)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!("expected {} parameters, got {}", self.num_params(), values.len())));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    /// `self ← tau·other + (1 − tau)·self`, parameter-wise.
    pub fn blend_from(&mut self, other: &Mlp, tau: f64) -> Result<()> {
        if other.layer_dims != self.layer_dims {
            return Err(Error::shape("cannot blend networks of different shapes"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight.zip_mut_with(&src.weight, |d, &s| {
                *d = tau * s + (1.0 - tau) * *d;
            });
            dst.bias.zip_mut_with(&src.bias, |d, &s| {
                *d = tau * s + (1.0 - tau) * *d;
            });
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        checksum_values(self.param_slices().into_iter().flatten().copied())
    }
}

pub(crate) fn checksum_values(values: impl Iterator<Item = f64>) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

fn dense_slices(layers: &[Dense]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        out.push(l.weight.as_slice().expect("standard layout weights"));
        out.push(l.bias.as_slice().expect("contiguous bias"));
    }
    out
}

fn dense_slices_mut(layers: &mut [Dense]) -> Vec<&mut [f64]> {
    let mut out = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        out.push(l.weight.as_slice_mut().expect("standard layout weights"));
        out.push(l.bias.as_slice_mut().expect("contiguous bias"));
    }
    out
}

impl Gradients {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        dense_slices(&self.layers)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        dense_slices_mut(&mut self.layers)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight += &src.weight;
            dst.bias += &src.bias;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.param_slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line forward pass with explicit loops.
    fn loop_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let n = net.layers().len();
        for (li, layer) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.output_dim()];
            for o in 0..layer.output_dim() {
                let mut acc = layer.bias[o];
                for i in 0..layer.input_dim() {
                    acc += layer.weight[[o, i]] * act[i];
                }
                next[o] = if li + 1 < n { acc.max(0.0) } else { acc };
            }
            act = next;
        }
        act
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense { weight: Array2::eye(2), bias: Array1::zeros(2) };
        let net = Mlp::from_layers(vec![layer], Activation::Relu, Activation::Linear).unwrap();
        assert_eq!(net.forward(&[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 4, 2]).unwrap();
        assert_eq!(net.forward(&[0.1, -2.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Mlp::new(&[2, 4, 1], &mut rng).unwrap();
        // Nonzero biases so the bias path is exercised.
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        for _ in 0..20 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let got = net.forward(&x).unwrap();
            let want = loop_forward(&net, &x);
            assert!((got[0] - want[0]).abs() < 1e-14, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(Mlp::zeros(&[3]).is_err());
        assert!(Mlp::zeros(&[3, 0, 1]).is_err());
    }

    #[test]
    fn linear_layer_weight_gradient_is_broadcast_input() {
        // loss = sum(Wx + b) ⇒ dL/dW[o][i] = x[i], dL/db = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 2], &mut rng).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let trace = net.forward_traced(x.view()).unwrap();
        let mut grads = net.zero_gradients();
        let d_in = net.backward(&trace, Array2::ones((1, 2)).view(), &mut grads).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.layers[0].weight[[o, i]], x[[0, i]]);
            }
            assert_eq!(grads.layers[0].bias[o], 1.0);
        }
        // d/dx sum(Wx) = column sums of W.
        for i in 0..3 {
            let col: f64 = net.layers()[0].weight.column(i).sum();
            assert!((d_in[[0, i]] - col).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[2, 8, 3], &mut rng).unwrap();
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        let trace = net.forward_traced(x.view()).unwrap();
        let mut grads = net.zero_gradients();
        net.backward(&trace, Array2::zeros((2, 3)).view(), &mut grads).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_upstream_is_rejected() {
        let net = Mlp::zeros(&[2, 3]).unwrap();
        let trace = net.forward_traced(array![[0.0, 1.0]].view()).unwrap();
        let mut grads = net.zero_gradients();
        let err = net.backward(&trace, Array2::ones((1, 2)).view(), &mut grads);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn flat_parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let flat = net.params_flat();
        assert_eq!(flat.len(), net.num_params());
        let mut other = Mlp::zeros(&[2, 3, 1]).unwrap();
        other.set_params_flat(&flat).unwrap();
        assert_eq!(other, net);
        assert_eq!(other.checksum(), net.checksum());
    }

    #[test]
    fn blend_applies_soft_update_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let online = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let mut target = Mlp::new(&[2, 3, 1], &mut rng).unwrap();
        let before = target.params_flat();
        target.blend_from(&online, 0.005).unwrap();
        for ((t, o), b) in target.params_flat().iter().zip(online.params_flat()).zip(before) {
            assert_eq!(*t, 0.005 * o + (1.0 - 0.005) * b);
        }
    }
}
