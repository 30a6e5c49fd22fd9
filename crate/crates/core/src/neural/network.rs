use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{Activation, MlpSpec};
use super::train::EpochLog;
use crate::cohort::{FeatureMatrix, Scaling};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Whether batch statistics and dropout are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-feature normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self { gamma: vec![1.0; width], beta: vec![0.0; width], running_mean: vec![0.0; width], running_var: vec![1.0; width] }
    }
}

/// Affine map `out = W in + b` with `W` stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNorm>,
}

impl Layer {
    fn init(n_in: usize, n_out: usize, limit: f64, batch_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let weights = (0..n_in * n_out).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { n_in, n_out, weights, bias: vec![0.0; n_out], batch_norm: batch_norm.then(|| BatchNorm::new(n_out)) }
    }

    fn affine(&self, input: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.n_out];
        for r in 0..n {
            let row = &input[r * self.n_in..(r + 1) * self.n_in];
            for o in 0..self.n_out {
                let w = &self.weights[o * self.n_in..(o + 1) * self.n_in];
                out[r * self.n_out + o] = self.bias[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

/// Gradients with the same tensor layout as [`MlpSurvModel::parameters_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

struct HiddenCache {
    input: Vec<f64>,
    /// Normalized pre-activations (only with batch norm).
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Input to the activation function.
    pre_act: Vec<f64>,
    /// Dropout multipliers, empty when dropout is inactive.
    mask: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct ForwardCache {
    n: usize,
    mode: Mode,
    hidden: Vec<HiddenCache>,
    last_input: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Feedforward network with a scalar log-hazard output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSurvModel {
    pub spec: MlpSpec,
    pub n_inputs: usize,
    pub hidden: Vec<Layer>,
    pub output: Layer,
    pub column_names: Vec<String>,
    pub scaling: Vec<Scaling>,
    #[serde(default)]
    pub training_log: Vec<EpochLog>,
    /// Epoch whose weights were kept, counted from 1.
    #[serde(default)]
    pub best_epoch: Option<usize>,
}

impl MlpSurvModel {
    /// Randomly initialized network for `n_inputs` features.
    pub fn new(n_inputs: usize, spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if n_inputs == 0 {
            return Err(Error::Config("network needs at least one input feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(spec.hidden_layers.len());
        let mut fan_in = n_inputs;
        for &width in &spec.hidden_layers {
            hidden.push(Layer::init(fan_in, width, spec.activation.init_limit(fan_in), spec.batch_norm, &mut rng));
            fan_in = width;
        }
        let output = Layer::init(fan_in, 1, Activation::Selu.init_limit(fan_in), false, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            n_inputs,
            hidden,
            output,
            column_names: (0..n_inputs).map(|j| format!("x{j}")).collect(),
            scaling: vec![Scaling::Identity; n_inputs],
            training_log: Vec::new(),
            best_epoch: None,
        })
    }

    /// Forward pass over `n` row-major inputs. Dropout is applied only in
    /// train mode and only when `dropout_rng` is supplied.
    pub fn forward_batch(&self, x: &[f64], n: usize, mode: Mode, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<ForwardCache> {
        if x.len() != n * self.n_inputs {
            return Err(Error::Shape { expected: n * self.n_inputs, got: x.len() });
        }
        let act = self.spec.activation;
        let p = self.spec.dropout_rate;
        let mut current = x.to_vec();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let w = layer.n_out;
            let mut z = layer.affine(&current, n);
            let (mut xhat, mut inv_std, mut batch_mean, mut batch_var) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            if let Some(bn) = &layer.batch_norm {
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&z, n, w),
                    Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                xhat = z.clone();
                for r in 0..n {
                    for o in 0..w {
                        let k = r * w + o;
                        xhat[k] = (z[k] - mean[o]) * inv_std[o];
                        z[k] = bn.gamma[o] * xhat[k] + bn.beta[o];
                    }
                }
                if mode == Mode::Train {
                    batch_mean = mean;
                    batch_var = var;
                }
            }
            let mut out: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            let mut mask = Vec::new();
            if mode == Mode::Train && p > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 / (1.0 - p);
                    mask = (0..out.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                    out.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                }
            }
            caches.push(HiddenCache { input: current, xhat, inv_std, pre_act: z, mask, batch_mean, batch_var });
            current = out;
        }
        let scores = self.output.affine(&current, n);
        Ok(ForwardCache { n, mode, hidden: caches, last_input: current, scores })
    }

    /// Scalar log-hazard for a single standardized feature vector.
    pub fn forward(&self, x: &[f64], mode: Mode, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
        Ok(self.forward_batch(x, 1, mode, dropout_rng)?.scores[0])
    }

    /// Inference-mode scores for every row of an already-scaled matrix.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.n_inputs {
            return Err(Error::Shape { expected: self.n_inputs, got: x.n_cols() });
        }
        Ok(self.forward_batch(x.values(), x.n_rows(), Mode::Infer, None)?.scores)
    }

    /// Inference-mode score for a raw-unit feature vector.
    pub fn predict_raw(&self, x_raw: &[f64]) -> Result<f64> {
        if x_raw.len() != self.n_inputs {
            return Err(Error::Shape { expected: self.n_inputs, got: x_raw.len() });
        }
        let scaled: Vec<f64> = x_raw.iter().zip(&self.scaling).map(|(&v, s)| s.apply(v)).collect();
        self.forward(&scaled, Mode::Infer, None)
    }

    pub fn check_columns(&self, names: &[String]) -> Result<()> {
        if names != self.column_names.as_slice() {
            return Err(Error::Schema(format!(
                "feature columns do not match the model (model has {} columns, data has {})",
                self.column_names.len(),
                names.len()
            )));
        }
        Ok(())
    }

    /// Gradient of a loss with respect to every parameter, given its
    /// gradient with respect to the scores of `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_scores: &[f64]) -> Gradients {
        let n = cache.n;
        assert_eq!(d_scores.len(), n);
        let mut grads = Vec::new();
        let (dw, db, mut delta) = affine_backward(&self.output, &cache.last_input, d_scores, n);
        let mut output_grads = vec![dw, db];

        for (layer, hc) in self.hidden.iter().zip(&cache.hidden).rev() {
            let w = layer.n_out;
            if !hc.mask.is_empty() {
                delta.iter_mut().zip(&hc.mask).for_each(|(d, m)| *d *= m);
            }
            for (d, &z) in delta.iter_mut().zip(&hc.pre_act) {
                *d *= self.spec.activation.derivative(z);
            }
            let mut layer_grads = Vec::with_capacity(4);
            let d_affine = match &layer.batch_norm {
                None => delta,
                Some(bn) => {
                    let mut dgamma = vec![0.0; w];
                    let mut dbeta = vec![0.0; w];
                    for r in 0..n {
                        for o in 0..w {
                            dgamma[o] += delta[r * w + o] * hc.xhat[r * w + o];
                            dbeta[o] += delta[r * w + o];
                        }
                    }
                    let mut dz = vec![0.0; n * w];
                    match cache.mode {
                        Mode::Infer => {
                            for r in 0..n {
                                for o in 0..w {
                                    dz[r * w + o] = delta[r * w + o] * bn.gamma[o] * hc.inv_std[o];
                                }
                            }
                        }
                        Mode::Train => {
                            // dxhat = delta * gamma; sum_dxhat = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
                            let nf = n as f64;
                            for r in 0..n {
                                for o in 0..w {
                                    let k = r * w + o;
                                    let dxhat = delta[k] * bn.gamma[o];
                                    dz[k] = hc.inv_std[o] / nf
                                        * (nf * dxhat - bn.gamma[o] * dbeta[o] - hc.xhat[k] * bn.gamma[o] * dgamma[o]);
                                }
                            }
                        }
                    }
                    layer_grads.push(dgamma);
                    layer_grads.push(dbeta);
                    dz
                }
            };
            let (dw, db, d_input) = affine_backward(layer, &hc.input, &d_affine, n);
            layer_grads.insert(0, db);
            layer_grads.insert(0, dw);
            grads.push(layer_grads);
            delta = d_input;
        }
        let mut tensors: Vec<Vec<f64>> = grads.into_iter().rev().flatten().collect();
        tensors.append(&mut output_grads);
        Gradients { tensors }
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        for (layer, hc) in self.hidden.iter_mut().zip(&cache.hidden) {
            if let Some(bn) = &mut layer.batch_norm {
                for o in 0..layer.n_out {
                    bn.running_mean[o] = BN_MOMENTUM * bn.running_mean[o] + (1.0 - BN_MOMENTUM) * hc.batch_mean[o];
                    bn.running_var[o] = BN_MOMENTUM * bn.running_var[o] + (1.0 - BN_MOMENTUM) * hc.batch_var[o];
                }
            }
        }
    }

    /// Every trainable tensor paired with whether it is a weight matrix.
    /// Order: per hidden layer weights, bias, then gamma and beta when batch
    /// norm is on; finally the output weights and bias.
    pub fn parameters_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        let mut out = Vec::new();
        for layer in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            out.push((&mut layer.weights, true));
            out.push((&mut layer.bias, false));
            if let Some(bn) = &mut layer.batch_norm {
                out.push((&mut bn.gamma, false));
                out.push((&mut bn.beta, false));
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.push(&layer.weights);
            out.push(&layer.bias);
            if let Some(bn) = &layer.batch_norm {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.spec.validate()?;
        if model.column_names.len() != model.n_inputs || model.scaling.len() != model.n_inputs {
            return Err(Error::Schema("network metadata does not match its input width".into()));
        }
        Ok(model)
    }
}

fn column_moments(z: &[f64], n: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; w];
    for r in 0..n {
        for o in 0..w {
            mean[o] += z[r * w + o];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; w];
    for r in 0..n {
        for o in 0..w {
            let d = z[r * w + o] - mean[o];
            var[o] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

/// Returns (dW, db, d_input) for `out = W in + b`.
fn affine_backward(layer: &Layer, input: &[f64], d_out: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ni, no) = (layer.n_in, layer.n_out);
    let mut dw = vec![0.0; ni * no];
    let mut db = vec![0.0; no];
    let mut d_in = vec![0.0; n * ni];
    for r in 0..n {
        let row = &input[r * ni..(r + 1) * ni];
        let d_row = &mut d_in[r * ni..(r + 1) * ni];
        for o in 0..no {
            let g = d_out[r * no + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wrow = &layer.weights[o * ni..(o + 1) * ni];
            let dwrow = &mut dw[o * ni..(o + 1) * ni];
            for i in 0..ni {
                dwrow[i] += g * row[i];
                d_row[i] += g * wrow[i];
            }
        }
    }
    (dw, db, d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::SurvivalOutcome;
    use crate::neural::cox_batch_loss;

    fn spec(hidden: Vec<usize>, act: Activation, bn: bool, dropout: f64) -> MlpSpec {
        MlpSpec { hidden_layers: hidden, activation: act, batch_norm: bn, dropout_rate: dropout, ..MlpSpec::default() }
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let mut m = MlpSurvModel::new(3, &spec(vec![], Activation::Relu, false, 0.0), 1).unwrap();
        m.output.weights = vec![0.5, -1.0, 2.0];
        m.output.bias = vec![0.25];
        let out = m.forward(&[1.0, 2.0, 3.0], Mode::Infer, None).unwrap();
        assert_eq!(out, 0.5 - 2.0 + 6.0 + 0.25);
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let m = MlpSurvModel::new(3, &MlpSpec::default(), 1).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0], Mode::Infer, None), Err(Error::Shape { expected: 3, got: 2 })));
    }

    #[test]
    fn inference_ignores_dropout() {
        let m = MlpSurvModel::new(4, &spec(vec![8, 8], Activation::Relu, true, 0.5), 3).unwrap();
        let x = inputs(5, 4, 9);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = m.forward_batch(&x, 5, Mode::Infer, Some(&mut r1)).unwrap().scores;
        let b = m.forward_batch(&x, 5, Mode::Infer, Some(&mut r2)).unwrap().scores;
        let c = m.forward_batch(&x, 5, Mode::Infer, None).unwrap().scores;
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_mode_dropout_varies_with_rng() {
        let m = MlpSurvModel::new(4, &spec(vec![16], Activation::Relu, false, 0.5), 3).unwrap();
        let x = inputs(6, 4, 9);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = m.forward_batch(&x, 6, Mode::Train, Some(&mut r1)).unwrap().scores;
        let b = m.forward_batch(&x, 6, Mode::Train, Some(&mut r2)).unwrap().scores;
        assert_ne!(a, b);
    }

    #[test]
    fn relu_network_is_positively_homogeneous_in_active_region() {
        // With zero biases and every pre-activation positive, the network is
        // linear in its input, so doubling x doubles the output.
        let mut m = MlpSurvModel::new(2, &spec(vec![3, 2], Activation::Relu, false, 0.0), 5).unwrap();
        for layer in m.hidden.iter_mut() {
            layer.weights.iter_mut().for_each(|w| *w = w.abs() + 0.1);
        }
        let x = [0.7, 1.3];
        let x2 = [1.4, 2.6];
        let direct = |x: &[f64]| {
            let h1: Vec<f64> = (0..3).map(|o| (0..2).map(|i| m.hidden[0].weights[o * 2 + i] * x[i]).sum::<f64>().max(0.0)).collect();
            let h2: Vec<f64> = (0..2).map(|o| (0..3).map(|i| m.hidden[1].weights[o * 3 + i] * h1[i]).sum::<f64>().max(0.0)).collect();
            m.output.weights[0] * h2[0] + m.output.weights[1] * h2[1]
        };
        let a = m.forward(&x, Mode::Infer, None).unwrap();
        let b = m.forward(&x2, Mode::Infer, None).unwrap();
        assert!((a - direct(&x)).abs() < 1e-12);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let m = MlpSurvModel::new(3, &MlpSpec::default(), 11).unwrap();
        let back = MlpSurvModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    fn outcomes(n: usize, seed: u64) -> Vec<SurvivalOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| SurvivalOutcome::new(rng.random_range(0.1..5.0), i % 3 != 1)).collect()
    }

    fn total_loss(m: &MlpSurvModel, x: &[f64], y: &[SurvivalOutcome], mode: Mode) -> f64 {
        let s = m.forward_batch(x, y.len(), mode, None).unwrap().scores;
        cox_batch_loss(&s, y).unwrap().0
    }

    /// Central differences of the batch loss against every parameter.
    fn check_gradients(mut m: MlpSurvModel, mode: Mode, seed: u64) {
        let n = 12;
        let x = inputs(n, m.n_inputs, seed);
        let y = outcomes(n, seed + 1);
        let cache = m.forward_batch(&x, n, mode, None).unwrap();
        let (_, ds) = cox_batch_loss(&cache.scores, &y).unwrap();
        let grads = m.backward(&cache, &ds);
        let h = 1e-4;
        let n_tensors = m.parameters().len();
        assert_eq!(grads.tensors.len(), n_tensors);
        let mut worst: f64 = 0.0;
        for t in 0..n_tensors {
            for k in 0..grads.tensors[t].len() {
                let orig = m.parameters()[t][k];
                m.parameters_mut()[t].0[k] = orig + h;
                let up = total_loss(&m, &x, &y, mode);
                m.parameters_mut()[t].0[k] = orig - h;
                let down = total_loss(&m, &x, &y, mode);
                m.parameters_mut()[t].0[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.tensors[t][k];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_check_train_mode_batch_norm() {
        for (i, act) in [Activation::Selu, Activation::LeakyRelu, Activation::Relu].into_iter().enumerate() {
            let m = MlpSurvModel::new(3, &spec(vec![8, 6], act, true, 0.0), 20 + i as u64).unwrap();
            check_gradients(m, Mode::Train, 40 + i as u64);
        }
    }

    #[test]
    fn gradient_check_frozen_batch_norm() {
        let mut m = MlpSurvModel::new(4, &spec(vec![8, 8], Activation::Selu, true, 0.0), 7).unwrap();
        for (j, layer) in m.hidden.iter_mut().enumerate() {
            let bn = layer.batch_norm.as_mut().unwrap();
            for o in 0..bn.gamma.len() {
                bn.running_mean[o] = 0.1 * (o as f64 - 3.0);
                bn.running_var[o] = 0.5 + 0.1 * (o + j) as f64;
                bn.gamma[o] = 0.8 + 0.05 * o as f64;
                bn.beta[o] = -0.1 * j as f64;
            }
        }
        check_gradients(m, Mode::Infer, 3);
    }

    #[test]
    fn gradient_check_without_batch_norm() {
        for hidden in [vec![], vec![5], vec![8, 4]] {
            let m = MlpSurvModel::new(3, &spec(hidden, Activation::Selu, false, 0.0), 13).unwrap();
            check_gradients(m, Mode::Train, 14);
        }
    }

    #[test]
    fn dropout_gradient_matches_fixed_mask() {
        // Replaying the same dropout stream reproduces the mask, so the
        // finite-difference oracle sees the same sub-network.
        let mut m = MlpSurvModel::new(3, &spec(vec![6], Activation::Selu, false, 0.3), 2).unwrap();
        let n = 10;
        let x = inputs(n, 3, 5);
        let y = outcomes(n, 6);
        let loss = |m: &MlpSurvModel| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let s = m.forward_batch(&x, n, Mode::Train, Some(&mut rng)).unwrap().scores;
            cox_batch_loss(&s, &y).unwrap().0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cache = m.forward_batch(&x, n, Mode::Train, Some(&mut rng)).unwrap();
        let (_, ds) = cox_batch_loss(&cache.scores, &y).unwrap();
        let grads = m.backward(&cache, &ds);
        let h = 1e-5;
        for k in 0..m.hidden[0].weights.len() {
            let orig = m.hidden[0].weights[k];
            m.hidden[0].weights[k] = orig + h;
            let up = loss(&m);
            m.hidden[0].weights[k] = orig - h;
            let down = loss(&m);
            m.hidden[0].weights[k] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = grads.tensors[0][k];
            assert!((ana - num).abs() <= 1e-6 * ana.abs().max(1.0), "{ana} vs {num}");
        }
    }
}
