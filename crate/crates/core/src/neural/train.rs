use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::cox_batch_loss;
use super::network::{Gradients, MlpSurvModel, Mode};
use super::spec::{MlpSpec, OptimizerKind};
use crate::cohort::{FeatureMatrix, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::metrics::concordance;

const ADAM_EPS: f64 = 1e-8;
/// Smoothing factor of the exponential moving average used by the
/// learning-rate range estimate.
const LR_SMOOTHING: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss; `None` when every batch lacked events.
    pub train_loss: Option<f64>,
    pub validation_c: Option<f64>,
    pub skipped_batches: usize,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    fn new(spec: &MlpSpec, model: &MlpSurvModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            kind: spec.optimizer,
            lr: spec.learning_rate,
            momentum: spec.momentum,
            beta1: spec.beta1,
            beta2: spec.beta2,
            weight_decay: spec.weight_decay,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    fn step(&mut self, model: &mut MlpSurvModel, grads: &Gradients) {
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps);
        let bias2 = 1.0 - self.beta2.powi(self.steps);
        for (t, (param, is_weight)) in model.parameters_mut().into_iter().enumerate() {
            let g = &grads.tensors[t];
            let m = &mut self.first[t];
            let v = &mut self.second[t];
            for k in 0..param.len() {
                let update = match self.kind {
                    OptimizerKind::SgdMomentum => {
                        m[k] = self.momentum * m[k] + g[k];
                        m[k]
                    }
                    OptimizerKind::Adam => {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        (m[k] / bias1) / ((v[k] / bias2).sqrt() + ADAM_EPS)
                    }
                };
                if is_weight {
                    param[k] -= self.lr * self.weight_decay * param[k];
                }
                param[k] -= self.lr * update;
            }
        }
    }
}

fn gather(x: &FeatureMatrix, y: &[SurvivalOutcome], idx: &[usize]) -> (Vec<f64>, Vec<SurvivalOutcome>) {
    let mut xb = Vec::with_capacity(idx.len() * x.n_cols());
    for &i in idx {
        xb.extend_from_slice(x.row(i));
    }
    (xb, idx.iter().map(|&i| y[i]).collect())
}

fn all_finite(model: &MlpSurvModel) -> bool {
    model.parameters().iter().all(|t| t.iter().all(|v| v.is_finite()))
}

/// One pass over the shuffled training rows. Returns the mean batch loss and
/// the number of skipped (event-free) batches; `after_step` runs after every
/// parameter update.
fn run_epoch(
    model: &mut MlpSurvModel,
    opt: &mut Optimizer,
    x: &FeatureMatrix,
    y: &[SurvivalOutcome],
    rng: &mut ChaCha8Rng,
    mut after_step: impl FnMut(&MlpSurvModel),
) -> Result<(Option<f64>, usize)> {
    let mut order: Vec<usize> = (0..x.n_rows()).collect();
    order.shuffle(rng);
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for chunk in order.chunks(model.spec.batch_size) {
        let (xb, yb) = gather(x, y, chunk);
        let cache = model.forward_batch(&xb, chunk.len(), Mode::Train, Some(rng))?;
        let Some((loss, d_scores)) = cox_batch_loss(&cache.scores, &yb) else {
            skipped += 1;
            continue;
        };
        sum += loss;
        used += 1;
        let grads = model.backward(&cache, &d_scores);
        opt.step(model, &grads);
        model.update_running_stats(&cache);
        after_step(model);
    }
    Ok(((used > 0).then(|| sum / used as f64), skipped))
}

fn check_inputs(x: &FeatureMatrix, y: &[SurvivalOutcome]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(Error::Shape { expected: x.n_rows(), got: y.len() });
    }
    if x.n_rows() == 0 {
        return Err(Error::EmptyCohort);
    }
    Ok(())
}

/// Trains a network by minibatch descent on the Cox batch loss, keeping the
/// weights of the epoch with the best validation concordance.
pub fn train(
    x_train: &FeatureMatrix,
    y_train: &[SurvivalOutcome],
    x_val: &FeatureMatrix,
    y_val: &[SurvivalOutcome],
    spec: &MlpSpec,
    seed: u64,
) -> Result<MlpSurvModel> {
    check_inputs(x_train, y_train)?;
    if x_val.n_rows() != y_val.len() {
        return Err(Error::Shape { expected: x_val.n_rows(), got: y_val.len() });
    }
    if x_val.n_cols() != x_train.n_cols() {
        return Err(Error::Shape { expected: x_train.n_cols(), got: x_val.n_cols() });
    }
    if !y_train.iter().any(|o| o.event) {
        return Err(Error::NoEvents);
    }
    let mut model = MlpSurvModel::new(x_train.n_cols(), spec, seed)?;
    model.column_names = x_train.column_names.clone();
    model.scaling = x_train.scaling.clone();
    let mut opt = Optimizer::new(spec, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, MlpSurvModel)> = None;
    let mut last_finite = None;
    for epoch in 1..=spec.max_epochs {
        let (train_loss, skipped) = run_epoch(&mut model, &mut opt, x_train, y_train, &mut rng, |_| {})?;
        if train_loss.is_some_and(|l| !l.is_finite()) || !all_finite(&model) {
            return Err(Error::Divergence { epoch, last_finite_epoch: last_finite });
        }
        last_finite = Some(epoch);
        let validation_c = if x_val.n_rows() > 0 {
            concordance(&model.predict(x_val)?, y_val).ok().map(|c| c.c_index)
        } else {
            None
        };
        log.push(EpochLog { epoch, train_loss, validation_c, skipped_batches: skipped });

        // without a defined validation concordance, fall back to the training loss
        let score = validation_c.or(train_loss.map(|l| -l)).unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
        } else if spec.early_stop_patience > 0 && epoch - best.as_ref().map_or(0, |b| b.1) >= spec.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, mut chosen) = best.expect("at least one epoch runs");
    chosen.training_log = log;
    chosen.best_epoch = Some(best_epoch);
    Ok(chosen)
}

/// Full-data loss in train mode without dropout, used to track progress
/// during the range test.
fn probe_loss(model: &MlpSurvModel, x: &FeatureMatrix, y: &[SurvivalOutcome]) -> f64 {
    match model.forward_batch(x.values(), x.n_rows(), Mode::Train, None) {
        Ok(cache) => cox_batch_loss(&cache.scores, y).map_or(f64::NAN, |(v, _)| v),
        Err(_) => f64::NAN,
    }
}

/// Whether the smoothed loss sequence never rises and ends below its start.
fn smoothly_decreasing(losses: &[f64]) -> bool {
    if losses.len() < 2 || losses.iter().any(|l| !l.is_finite()) {
        return false;
    }
    let mut smoothed = losses[0];
    let start = smoothed;
    for &l in &losses[1..] {
        let next = LR_SMOOTHING * smoothed + (1.0 - LR_SMOOTHING) * l;
        if next > smoothed {
            return false;
        }
        smoothed = next;
    }
    smoothed < start
}

/// Learning-rate range test: one epoch per candidate from the same
/// initialization, keeping the largest rate whose smoothed full-data loss
/// decreased monotonically.
pub fn lr_range_estimate(x: &FeatureMatrix, y: &[SurvivalOutcome], spec: &MlpSpec, lr_grid: &[f64], seed: u64) -> Result<f64> {
    check_inputs(x, y)?;
    if lr_grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    if let Some(bad) = lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
        return Err(Error::Config(format!("learning-rate grid values must be positive, got {bad}")));
    }
    if !y.iter().any(|o| o.event) {
        return Err(Error::NoEvents);
    }
    let mut chosen: Option<f64> = None;
    for &lr in lr_grid {
        let trial_spec = MlpSpec { learning_rate: lr, ..spec.clone() };
        let mut model = MlpSurvModel::new(x.n_cols(), &trial_spec, seed)?;
        let mut opt = Optimizer::new(&trial_spec, &model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut losses = vec![probe_loss(&model, x, y)];
        run_epoch(&mut model, &mut opt, x, y, &mut rng, |m| losses.push(probe_loss(m, x, y)))?;
        if smoothly_decreasing(&losses) && chosen.is_none_or(|c| lr > c) {
            chosen = Some(lr);
        }
    }
    chosen.ok_or_else(|| {
        Error::LrEstimation("no learning rate in the grid decreased the loss; try a smaller grid floor".into())
    })
}
