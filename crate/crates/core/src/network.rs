//! Rectifier MLP whose outputs are L2-normalized embeddings.
//!
//! Hidden layers apply `max(0, .)`; the last layer is linear and feeds the
//! normalization. The network keeps the activations of its most recent
//! [`EmbeddingNetwork::forward`] so that [`EmbeddingNetwork::backward`] can
//! consume them exactly once. [`EmbeddingNetwork::embed`] is the cache-free
//! inference path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, l2_normalize, l2_normalize_backward, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Multiplier on He-normal initialization. The output is invariant to a
    /// common rescaling of the weights, so this sets the effective step size
    /// of SGD on the sphere (smaller gain, larger effective step).
    pub init_gain: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![64],
            embed_dim: 32,
            activation: Activation::Relu,
            init_gain: 0.3,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("all layer dims must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be >= 2".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::InvalidConfig("init_gain must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to embedding.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.embed_dim);
        w
    }
}

/// One affine layer; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: DenseMatrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(self.weights.row(o), x) + self.bias[o];
        }
    }

    fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Gradients shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<Layer>,
}

impl ParameterGradients {
    pub fn zeros_like(net: &EmbeddingNetwork) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    /// Flattened in the same order as [`EmbeddingNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to each layer, one matrix per layer.
    layer_inputs: Vec<DenseMatrix>,
    /// Final pre-normalization outputs.
    pre_norm: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct EmbeddingNetwork {
    config: EmbeddingConfig,
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for EmbeddingNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.layers == other.layers
    }
}

impl EmbeddingNetwork {
    /// He-normal weights scaled by `init_gain`, zero biases.
    pub fn new<R: Rng + ?Sized>(config: EmbeddingConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = config.init_gain * (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut layer = Layer::zeros(fan_in, fan_out);
            for v in layer.weights.as_mut_slice() {
                *v = normal.sample(rng);
            }
            layers.push(layer);
        }
        Ok(Self { config, layers, cache: None })
    }

    /// Builds a network from explicit layers; shapes must chain.
    pub fn from_layers(config: EmbeddingConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} layers", widths.len() - 1),
                got: format!("{} layers", layers.len()),
            });
        }
        for (i, (layer, w)) in layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.inputs() != w[0] || layer.outputs() != w[1] || layer.bias.len() != w[1] {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i} of shape {}x{}", w[1], w[0]),
                    got: format!("{}x{}", layer.outputs(), layer.inputs()),
                });
            }
        }
        Ok(Self { config, layers, cache: None })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.param_count()),
                got: format!("{}", params.len()),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, inputs: &DenseMatrix) -> Result<()> {
        if inputs.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input columns", self.config.input_dim),
                got: format!("{}", inputs.cols()),
            });
        }
        Ok(())
    }

    /// Runs every layer; returns per-layer inputs and the pre-norm output.
    fn run(&self, inputs: &DenseMatrix, keep: bool) -> (Vec<DenseMatrix>, DenseMatrix) {
        let last = self.layers.len() - 1;
        let mut kept = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut h = inputs.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = DenseMatrix::zeros(h.rows(), layer.outputs());
            for r in 0..h.rows() {
                let row = out.row_mut(r);
                layer.apply(h.row(r), row);
                if li < last {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            if keep {
                kept.push(h);
            }
            h = out;
        }
        (kept, h)
    }

    fn normalize_rows(pre: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(pre.rows(), pre.cols());
        for r in 0..pre.rows() {
            out.row_mut(r).copy_from_slice(&l2_normalize(pre.row(r))?);
        }
        Ok(out)
    }

    /// Training forward pass. Returns `(pre_norm, normalized)` and caches
    /// the activations for the next [`backward`](Self::backward).
    pub fn forward(&mut self, inputs: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        self.check_input(inputs)?;
        self.cache = None;
        let (layer_inputs, pre_norm) = self.run(inputs, true);
        let normalized = Self::normalize_rows(&pre_norm)?;
        self.cache = Some(ForwardCache { layer_inputs, pre_norm: pre_norm.clone() });
        Ok((pre_norm, normalized))
    }

    /// Inference: unit embeddings, no cache.
    pub fn embed(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(inputs)?;
        let (_, pre) = self.run(inputs, false);
        Self::normalize_rows(&pre)
    }

    /// Back-propagates gradients taken with respect to the normalized
    /// outputs of the last forward pass. Consumes the cache.
    pub fn backward(&mut self, grad_wrt_normalized: &DenseMatrix) -> Result<ParameterGradients> {
        let cache = self.cache.take().ok_or(Error::NoCache)?;
        let n = cache.pre_norm.rows();
        if grad_wrt_normalized.rows() != n || grad_wrt_normalized.cols() != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{}", self.config.embed_dim),
                got: format!("{}x{}", grad_wrt_normalized.rows(), grad_wrt_normalized.cols()),
            });
        }
        let mut grads = ParameterGradients::zeros_like(self);

        let mut upstream = DenseMatrix::zeros(n, self.config.embed_dim);
        for r in 0..n {
            let g = l2_normalize_backward(cache.pre_norm.row(r), grad_wrt_normalized.row(r))?;
            upstream.row_mut(r).copy_from_slice(&g);
        }

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.layer_inputs[li];
            let grad = &mut grads.layers[li];
            for r in 0..n {
                let g = upstream.row(r);
                let x = input.row(r);
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, x, grad.weights.row_mut(o));
                        grad.bias[o] += go;
                    }
                }
            }
            if li == 0 {
                break;
            }
            // input to this layer is the rectified output of the previous one
            let mut down = DenseMatrix::zeros(n, layer.inputs());
            for r in 0..n {
                let g = upstream.row(r);
                let d = down.row_mut(r);
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, layer.weights.row(o), d);
                    }
                }
                for (dv, &xv) in d.iter_mut().zip(input.row(r)) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            upstream = down;
        }
        Ok(grads)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, KINKED_EPS};
    use crate::linalg::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn small_config() -> EmbeddingConfig {
        EmbeddingConfig { input_dim: 6, hidden_dims: vec![8, 5], embed_dim: 4, init_gain: 1.0, ..Default::default() }
    }

    #[test]
    fn zero_weights_give_bias_broadcast() {
        let cfg = EmbeddingConfig { input_dim: 3, hidden_dims: vec![], embed_dim: 2, ..Default::default() };
        let mut layer = Layer::zeros(3, 2);
        layer.bias = vec![3.0, 4.0];
        let mut net = EmbeddingNetwork::from_layers(cfg, vec![layer]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0, 5.0], vec![0.0, 0.0, 9.0]], 3).unwrap();
        let (pre, normed) = net.forward(&x).unwrap();
        for r in 0..2 {
            assert_eq!(pre.row(r), &[3.0, 4.0]);
            assert_eq!(normed.row(r), &[0.6, 0.8]);
        }
    }

    #[test]
    fn identity_layer_only_normalizes() {
        let cfg = EmbeddingConfig { input_dim: 3, hidden_dims: vec![], embed_dim: 3, ..Default::default() };
        let mut layer = Layer::zeros(3, 3);
        for i in 0..3 {
            layer.weights.row_mut(i)[i] = 1.0;
        }
        let mut net = EmbeddingNetwork::from_layers(cfg, vec![layer]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.6, 0.8]], 3).unwrap();
        let (_, normed) = net.forward(&x).unwrap();
        assert_eq!(normed.row(0), x.row(0));
    }

    #[test]
    fn random_outputs_are_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = EmbeddingNetwork::new(EmbeddingConfig::default(), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 30, 64);
        let (_, normed) = net.forward(&x).unwrap();
        for row in normed.row_iter() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(net.embed(&x).unwrap(), normed);
    }

    #[test]
    fn shape_mismatch_and_missing_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = EmbeddingNetwork::new(small_config(), &mut rng).unwrap();
        let bad = random_matrix(&mut rng, 2, 5);
        assert!(matches!(net.forward(&bad), Err(Error::ShapeMismatch { .. })));
        let g = DenseMatrix::zeros(2, 4);
        assert!(matches!(net.backward(&g), Err(Error::NoCache)));
        let x = random_matrix(&mut rng, 2, 6);
        net.forward(&x).unwrap();
        net.backward(&g).unwrap();
        // cache consumed
        assert!(matches!(net.backward(&g), Err(Error::NoCache)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = EmbeddingNetwork::new(small_config(), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 6);
        net.forward(&x).unwrap();
        let grads = net.backward(&DenseMatrix::zeros(5, 4)).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn single_linear_layer_symbolic_gradient() {
        // loss = <c, normalize(W x + b)>; dL/dW = (P c) x^T / ||Wx+b||, P = I - u u^T
        let cfg = EmbeddingConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2, ..Default::default() };
        let mut layer = Layer::zeros(2, 2);
        layer.weights = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        layer.bias = vec![0.0, 0.0];
        let mut net = EmbeddingNetwork::from_layers(cfg, vec![layer]).unwrap();
        let x = DenseMatrix::from_vec(1, 2, vec![3.0, 2.0]).unwrap();
        net.forward(&x).unwrap();
        // pre = (3, 4), u = (0.6, 0.8), c = (1, 0): P c = (1 - 0.36, -0.48) = (0.64, -0.48)
        let c = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let g = net.backward(&c).unwrap();
        let pc = [0.64 / 5.0, -0.48 / 5.0];
        let expected_w = [pc[0] * 3.0, pc[0] * 2.0, pc[1] * 3.0, pc[1] * 2.0];
        for (a, e) in g.layers[0].weights.as_slice().iter().zip(expected_w) {
            assert!((a - e).abs() < 1e-15);
        }
        assert!((g.layers[0].bias[0] - pc[0]).abs() < 1e-15);
        assert!((g.layers[0].bias[1] - pc[1]).abs() < 1e-15);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let mut net = EmbeddingNetwork::new(small_config(), &mut rng).unwrap();
            // nonzero biases so the check also covers them
            for layer in net.layers_mut() {
                for b in &mut layer.bias {
                    *b = rng.random_range(-0.1..0.1);
                }
            }
            let x = random_matrix(&mut rng, 4, 6);
            let c = random_matrix(&mut rng, 4, 4);
            net.forward(&x).unwrap();
            let analytic = net.backward(&c).unwrap().flatten();
            let point = net.parameters();
            let probe = net.clone();
            let loss = |p: &[f64]| {
                let mut n = probe.clone();
                n.set_parameters(p).unwrap();
                let e = n.embed(&x).unwrap();
                e.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            };
            let report = gradient_check(loss, &analytic, &point, KINKED_EPS).unwrap();
            assert!(report.max_rel_error < 1e-6, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = EmbeddingNetwork::new(small_config(), &mut rng).unwrap();
        let mut other = EmbeddingNetwork::new(small_config(), &mut rng).unwrap();
        other.set_parameters(&net.parameters()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_parameters(&[0.0]).is_err());
    }
}
