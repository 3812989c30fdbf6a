//! Multilayer perceptron producing the feature vector `f(x)` that drives the
//! forest's split nodes. Forward and backward passes are written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }
}

/// Affine layer; `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as [`BackboneParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and hidden pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch_size: usize,
    /// `inputs[l]` is the batch fed into layer `l`, flattened row-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

impl BackboneParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(
                "flat parameters",
                self.param_count(),
                values.len(),
            ));
        }
        let mut rest = values;
        for layer in &mut self.layers {
            let (w, tail) = rest.split_at(layer.weights.len());
            layer.weights.copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl BackboneGrads {
    pub fn zeros_like(params: &BackboneParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|v| *v *= factor);
        }
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init(config: &BackboneConfig) -> Result<BackboneParams> {
    let dims = config.layer_dims();
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::InvalidConfig(format!(
            "backbone layer width at position {pos} is zero"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = dims
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut layer = Layer::zeros(fan_in, fan_out);
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-bound..=bound));
            layer
        })
        .collect();
    Ok(BackboneParams {
        activation: config.activation,
        layers,
    })
}

/// Affine + activation for every hidden layer; the output layer is affine only.
pub fn forward(x: &[Vec<f64>], params: &BackboneParams) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    let in_dim = params.input_dim();
    let mut input = Vec::with_capacity(x.len() * in_dim);
    for row in x {
        if row.len() != in_dim {
            return Err(Error::shape("backbone input", in_dim, row.len()));
        }
        input.extend_from_slice(row);
    }
    let batch = x.len();
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(last);

    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; batch * layer.out_dim];
        for (xi, zi) in input
            .chunks_exact(layer.in_dim)
            .zip(z.chunks_exact_mut(layer.out_dim))
        {
            layer.affine(xi, zi);
        }
        inputs.push(std::mem::take(&mut input));
        if l < last {
            input = z.iter().map(|&v| params.activation.apply(v)).collect();
            pre.push(z);
        } else {
            input = z;
        }
    }

    let out_dim = params.output_dim();
    let features = input.chunks_exact(out_dim).map(|r| r.to_vec()).collect();
    Ok((
        features,
        ForwardCache {
            batch_size: batch,
            inputs,
            pre,
        },
    ))
}

/// Reverse-mode gradient of `sum_i <features_i, grad_features_i>` with respect
/// to every parameter.
pub fn backward(
    grad_features: &[Vec<f64>],
    cache: &ForwardCache,
    params: &BackboneParams,
) -> Result<BackboneGrads> {
    if grad_features.len() != cache.batch_size {
        return Err(Error::shape(
            "gradient batch",
            cache.batch_size,
            grad_features.len(),
        ));
    }
    if cache.inputs.len() != params.layers.len() {
        return Err(Error::shape(
            "forward cache layers",
            params.layers.len(),
            cache.inputs.len(),
        ));
    }
    for (layer, input) in params.layers.iter().zip(&cache.inputs) {
        if input.len() != cache.batch_size * layer.in_dim {
            return Err(Error::shape(
                "forward cache activations",
                cache.batch_size * layer.in_dim,
                input.len(),
            ));
        }
    }
    let out_dim = params.output_dim();
    let mut delta = Vec::with_capacity(cache.batch_size * out_dim);
    for row in grad_features {
        if row.len() != out_dim {
            return Err(Error::shape("feature gradient", out_dim, row.len()));
        }
        delta.extend_from_slice(row);
    }

    let mut grads = BackboneGrads::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let g = &mut grads.layers[l];
        let input = &cache.inputs[l];
        for (d_row, x_row) in delta
            .chunks_exact(layer.out_dim)
            .zip(input.chunks_exact(layer.in_dim))
        {
            for (o, &d) in d_row.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let gw = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                gw.iter_mut().zip(x_row).for_each(|(w, x)| *w += d * x);
            }
        }
        if l == 0 {
            break;
        }
        // propagate into the previous layer's pre-activations
        let z_prev = &cache.pre[l - 1];
        let mut next = vec![0.0; cache.batch_size * layer.in_dim];
        for ((d_row, n_row), (z_row, a_row)) in delta
            .chunks_exact(layer.out_dim)
            .zip(next.chunks_exact_mut(layer.in_dim))
            .zip(
                z_prev
                    .chunks_exact(layer.in_dim)
                    .zip(input.chunks_exact(layer.in_dim)),
            )
        {
            for (o, &d) in d_row.iter().enumerate() {
                let w_row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                n_row.iter_mut().zip(w_row).for_each(|(n, w)| *n += d * w);
            }
            for ((n, &z), &a) in n_row.iter_mut().zip(z_row).zip(a_row) {
                *n *= params.activation.derivative(z, a);
            }
        }
        delta = next;
    }
    Ok(grads)
}

/// `params += learning_rate * grads`: gradient ascent on the log-likelihood.
pub fn sgd_step(
    params: &mut BackboneParams,
    grads: &BackboneGrads,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if grads.layers.len() != params.layers.len() {
        return Err(Error::shape(
            "gradient layers",
            params.layers.len(),
            grads.layers.len(),
        ));
    }
    for (p, g) in params.layers.iter().zip(&grads.layers) {
        if p.weights.len() != g.weights.len() || p.bias.len() != g.bias.len() {
            return Err(Error::shape(
                "gradient layer",
                p.weights.len() + p.bias.len(),
                g.weights.len() + g.bias.len(),
            ));
        }
        if !g.weights.iter().chain(&g.bias).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
    }
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        p.weights
            .iter_mut()
            .zip(&g.weights)
            .for_each(|(w, d)| *w += learning_rate * d);
        p.bias
            .iter_mut()
            .zip(&g.bias)
            .for_each(|(b, d)| *b += learning_rate * d);
    }
    Ok(())
}

/// Step decay: the rate halves (by `factor`) every `period` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRateSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            factor: 0.5,
            period: 500,
        }
    }
}

impl LearningRateSchedule {
    pub fn rate(&self, step: usize) -> f64 {
        // period 0 disables decay
        let drops = step.checked_div(self.period).unwrap_or(0);
        self.initial * self.factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn config(input: usize, hidden: Vec<usize>, out: usize, seed: u64) -> BackboneConfig {
        BackboneConfig {
            seed,
            ..BackboneConfig::new(input, hidden, out)
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = config(5, vec![8, 4], 6, 42);
        let a = init(&cfg).unwrap();
        let b = init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let c = init(&config(5, vec![8, 4], 6, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_bound() {
        let p = init(&config(64, vec![], 32, 1)).unwrap();
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= 0.125));
        assert!(p.layers[0].weights.iter().any(|w| w.abs() > 0.1));
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(matches!(
            init(&config(3, vec![0], 2, 0)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(init(&config(0, vec![], 2, 0)).is_err());
    }

    #[test]
    fn forward_zero_and_identity() {
        let mut p = init(&config(3, vec![4], 2, 0)).unwrap();
        p.set_flat(&vec![0.0; p.param_count()]).unwrap();
        let (f, _) = forward(&[vec![1.0, -2.0, 3.0]], &p).unwrap();
        assert_eq!(f, vec![vec![0.0, 0.0]]);

        let mut id = init(&config(3, vec![], 3, 0)).unwrap();
        id.layers[0].weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let (f, _) = forward(&[vec![0.5, -1.5, 2.0]], &id).unwrap();
        assert_eq!(f[0], vec![0.5, -1.5, 2.0]);

        assert!(matches!(
            forward(&[vec![1.0]], &id),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_batch_rows_are_independent() {
        let p = init(&config(4, vec![6, 5], 3, 9)).unwrap();
        let a = vec![0.1, -0.4, 0.9, 0.3];
        let b = vec![-0.7, 0.2, 0.0, 1.1];
        let (batch, _) = forward(&[a.clone(), b.clone()], &p).unwrap();
        let (fa, _) = forward(&[a], &p).unwrap();
        let (fb, _) = forward(&[b], &p).unwrap();
        assert_eq!(batch[0], fa[0]);
        assert_eq!(batch[1], fb[0]);
    }

    #[test]
    fn backward_zero_and_linear_cases() {
        let p = init(&config(3, vec![4], 2, 3)).unwrap();
        let x = vec![vec![0.2, 0.5, -0.1]];
        let (_, cache) = forward(&x, &p).unwrap();
        let g = backward(&[vec![0.0, 0.0]], &cache, &p).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        let lin = init(&config(3, vec![], 2, 3)).unwrap();
        let (_, cache) = forward(&x, &lin).unwrap();
        let gf = vec![0.7, -2.0];
        let g = backward(std::slice::from_ref(&gf), &cache, &lin).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_abs_diff_eq!(
                    g.layers[0].weights[o * 3 + i],
                    gf[o] * x[0][i],
                    epsilon = 1e-15
                );
            }
        }
        assert_eq!(g.layers[0].bias, gf);
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let p = init(&config(3, vec![4], 2, 3)).unwrap();
        let (_, cache) = forward(&[vec![0.0; 3], vec![1.0; 3]], &p).unwrap();
        assert!(matches!(
            backward(&[vec![1.0, 1.0]], &cache, &p),
            Err(Error::ShapeMismatch { .. })
        ));
        let other = init(&config(3, vec![5, 4], 2, 3)).unwrap();
        assert!(backward(&[vec![1.0, 1.0], vec![1.0, 1.0]], &cache, &other).is_err());
    }

    fn fd_check(activation: Activation, hidden: Vec<usize>, seed: u64) {
        let mut cfg = config(4, hidden, 3, seed);
        cfg.activation = activation;
        let p = init(&cfg).unwrap();
        let x = vec![vec![0.3, -0.8, 0.5, 0.1], vec![-0.2, 0.4, 0.9, -0.6]];
        let gf = vec![vec![0.5, -1.0, 0.25], vec![1.5, 0.3, -0.7]];
        let objective = |params: &BackboneParams| -> f64 {
            let (f, _) = forward(&x, params).unwrap();
            f.iter()
                .zip(&gf)
                .map(|(fr, gr)| fr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, cache) = forward(&x, &p).unwrap();
        let analytic = backward(&gf, &cache, &p).unwrap().flatten();
        let base = p.flatten();
        let h = 1e-5;
        for j in 0..base.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            let mut v = base.clone();
            v[j] += h;
            hi.set_flat(&v).unwrap();
            v[j] -= 2.0 * h;
            lo.set_flat(&v).unwrap();
            let numeric = (objective(&hi) - objective(&lo)) / (2.0 * h);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {j}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(Activation::Tanh, vec![5, 4], 7);
        fd_check(Activation::Tanh, vec![6], 8);
        fd_check(Activation::Relu, vec![5], 9);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = init(&config(1, vec![], 1, 0)).unwrap();
        p.set_flat(&[1.0, 0.0]).unwrap();
        let mut g = BackboneGrads::zeros_like(&p);
        g.layers[0].weights[0] = 2.0;
        let before = p.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_abs_diff_eq!(p.layers[0].weights[0], 1.2, epsilon = 1e-15);

        g.layers[0].bias[0] = f64::NAN;
        let snapshot = p.clone();
        assert!(matches!(
            sgd_step(&mut p, &g, 0.1),
            Err(Error::NonFiniteGradient)
        ));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn sgd_ascent_increases_concave_objective() {
        // J(w) = -(w - 3)^2, dJ/dw = -2 (w - 3)
        let mut p = init(&config(1, vec![], 1, 0)).unwrap();
        p.set_flat(&[0.0, 0.0]).unwrap();
        let objective = |w: f64| -(w - 3.0).powi(2);
        let mut g = BackboneGrads::zeros_like(&p);
        let w0 = p.layers[0].weights[0];
        g.layers[0].weights[0] = -2.0 * (w0 - 3.0);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!(objective(p.layers[0].weights[0]) > objective(w0));
    }

    #[test]
    fn learning_rate_halves_each_period() {
        let s = LearningRateSchedule {
            initial: 0.2,
            factor: 0.5,
            period: 500,
        };
        assert_eq!(s.rate(0), 0.2);
        assert_eq!(s.rate(499), 0.2);
        assert_eq!(s.rate(500), 0.1);
        assert_eq!(s.rate(1000), 0.05);
    }
}
