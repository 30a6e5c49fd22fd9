//! Hyperparameter search over [`MlpSpec`] with a Tree-structured Parzen
//! Estimator and k-fold cross-validated concordance as the objective.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{FeatureMatrix, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::metrics::concordance;
use crate::neural::{train, Activation, MlpSpec, OptimizerKind, MAX_HIDDEN_LAYERS};

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_CANDIDATES: usize = 24;
pub const DEFAULT_STARTUP_TRIALS: usize = 10;

/// Prior distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Int { lo: i64, hi: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

pub type Params = BTreeMap<String, ParamValue>;

/// Hyperparameters the search can vary. `n_layers` and `width` together set
/// `hidden_layers` (every hidden layer gets the same width); `batch_norm`
/// takes the choices `"true"` and `"false"`.
pub const TUNABLE: [&str; 12] = [
    "n_layers",
    "width",
    "activation",
    "dropout_rate",
    "batch_norm",
    "weight_decay",
    "optimizer",
    "learning_rate",
    "momentum",
    "batch_size",
    "max_epochs",
    "early_stop_patience",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, Distribution>,
    /// Values for everything the search does not vary.
    #[serde(default)]
    pub base: MlpSpec,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let cat = |c: &[&str]| Distribution::Categorical { choices: c.iter().map(|s| s.to_string()).collect() };
        let params = BTreeMap::from([
            ("n_layers".to_string(), Distribution::Int { lo: 1, hi: 3 }),
            ("width".to_string(), Distribution::Int { lo: 8, hi: 128 }),
            ("activation".to_string(), cat(&["relu", "leaky_relu", "selu"])),
            ("dropout_rate".to_string(), Distribution::Uniform { lo: 0.0, hi: 0.5 }),
            ("batch_norm".to_string(), cat(&["true", "false"])),
            ("weight_decay".to_string(), Distribution::LogUniform { lo: 1e-6, hi: 1e-2 }),
            ("optimizer".to_string(), cat(&["adam", "sgd_momentum"])),
            ("learning_rate".to_string(), Distribution::LogUniform { lo: 1e-4, hi: 1e-1 }),
            ("batch_size".to_string(), Distribution::Int { lo: 256, hi: 1024 }),
        ]);
        Self { params, base: MlpSpec::default() }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("search space is empty".into()));
        }
        for (name, dist) in &self.params {
            if !TUNABLE.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown hyperparameter `{name}`; expected one of {}", TUNABLE.join(", "))));
            }
            let ok = match dist {
                Distribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
                Distribution::LogUniform { lo, hi } => hi.is_finite() && *lo > 0.0 && lo < hi,
                Distribution::Int { lo, hi } => lo < hi,
                Distribution::Categorical { choices } => !choices.is_empty(),
            };
            if !ok {
                return Err(Error::Config(format!("invalid range for `{name}`")));
            }
            if let Distribution::Categorical { choices } = dist {
                for c in choices {
                    apply_one(&mut self.base.clone(), &mut None, &mut None, name, &ParamValue::Choice(c.clone()))?;
                }
            }
        }
        self.base.validate()
    }

    /// Builds the spec for a parameter assignment.
    pub fn to_spec(&self, params: &Params) -> Result<MlpSpec> {
        let mut spec = self.base.clone();
        let (mut n_layers, mut width) = (None, None);
        for (name, value) in params {
            apply_one(&mut spec, &mut n_layers, &mut width, name, value)?;
        }
        if n_layers.is_some() || width.is_some() {
            let n = n_layers.unwrap_or(spec.hidden_layers.len());
            let w = width.unwrap_or_else(|| spec.hidden_layers.first().copied().unwrap_or(32));
            spec.hidden_layers = vec![w; n];
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn apply_one(
    spec: &mut MlpSpec,
    n_layers: &mut Option<usize>,
    width: &mut Option<usize>,
    name: &str,
    value: &ParamValue,
) -> Result<()> {
    let bad = || Error::Config(format!("value {value:?} does not fit hyperparameter `{name}`"));
    let float = || match value {
        ParamValue::Float(v) => Ok(*v),
        ParamValue::Int(v) => Ok(*v as f64),
        ParamValue::Choice(_) => Err(bad()),
    };
    let count = || match value {
        ParamValue::Int(v) if *v >= 0 => Ok(*v as usize),
        _ => Err(bad()),
    };
    let choice = || match value {
        ParamValue::Choice(c) => Ok(c.as_str()),
        _ => Err(bad()),
    };
    match name {
        "n_layers" => {
            let n = count()?;
            if n > MAX_HIDDEN_LAYERS {
                return Err(bad());
            }
            *n_layers = Some(n);
        }
        "width" => *width = Some(count()?),
        "activation" => {
            spec.activation = match choice()? {
                "relu" => Activation::Relu,
                "leaky_relu" => Activation::LeakyRelu,
                "selu" => Activation::Selu,
                _ => return Err(bad()),
            }
        }
        "optimizer" => {
            spec.optimizer = match choice()? {
                "adam" => OptimizerKind::Adam,
                "sgd_momentum" => OptimizerKind::SgdMomentum,
                _ => return Err(bad()),
            }
        }
        "batch_norm" => {
            spec.batch_norm = match choice()? {
                "true" => true,
                "false" => false,
                _ => return Err(bad()),
            }
        }
        "dropout_rate" => spec.dropout_rate = float()?,
        "weight_decay" => spec.weight_decay = float()?,
        "learning_rate" => spec.learning_rate = float()?,
        "momentum" => spec.momentum = float()?,
        "batch_size" => spec.batch_size = count()?,
        "max_epochs" => spec.max_epochs = count()?,
        "early_stop_patience" => spec.early_stop_patience = count()?,
        _ => return Err(Error::Config(format!("unknown hyperparameter `{name}`"))),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub params: Params,
    pub spec: MlpSpec,
    pub fold_c: Vec<f64>,
    pub mean_c: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl TrialRecord {
    fn ok_score(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Ok => self.mean_c,
            TrialStatus::Failed => None,
        }
    }
}

/// Numeric parameters live in a transformed space where the prior is
/// uniform on `[lo, hi]`.
fn numeric_bounds(dist: &Distribution) -> Option<(f64, f64)> {
    match *dist {
        Distribution::Uniform { lo, hi } => Some((lo, hi)),
        Distribution::LogUniform { lo, hi } => Some((lo.ln(), hi.ln())),
        Distribution::Int { lo, hi } => Some((lo as f64 - 0.5, hi as f64 + 0.5)),
        Distribution::Categorical { .. } => None,
    }
}

fn to_internal(dist: &Distribution, value: &ParamValue) -> Option<f64> {
    let v = match value {
        ParamValue::Float(v) => *v,
        ParamValue::Int(v) => *v as f64,
        ParamValue::Choice(_) => return None,
    };
    Some(if matches!(dist, Distribution::LogUniform { .. }) { v.ln() } else { v })
}

fn from_internal(dist: &Distribution, u: f64) -> ParamValue {
    match *dist {
        Distribution::Uniform { lo, hi } => ParamValue::Float(u.clamp(lo, hi)),
        Distribution::LogUniform { lo, hi } => ParamValue::Float(u.exp().clamp(lo, hi)),
        Distribution::Int { lo, hi } => ParamValue::Int((u.round() as i64).clamp(lo, hi)),
        Distribution::Categorical { .. } => unreachable!("categorical values are not numeric"),
    }
}

fn sample_prior(dist: &Distribution, rng: &mut ChaCha8Rng) -> ParamValue {
    match dist {
        Distribution::Uniform { lo, hi } => ParamValue::Float(rng.random_range(*lo..=*hi)),
        Distribution::LogUniform { lo, hi } => ParamValue::Float(rng.random_range(lo.ln()..=hi.ln()).exp().clamp(*lo, *hi)),
        Distribution::Int { lo, hi } => ParamValue::Int(rng.random_range(*lo..=*hi)),
        Distribution::Categorical { choices } => ParamValue::Choice(choices[rng.random_range(0..choices.len())].clone()),
    }
}

pub fn sample_prior_params(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Params {
    space.params.iter().map(|(name, dist)| (name.clone(), sample_prior(dist, rng))).collect()
}

/// Mixture of truncated Gaussians on `[lo, hi]`: one per observation plus a
/// broad prior component.
struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Parzen {
    fn fit(obs: &[f64], lo: f64, hi: f64) -> Self {
        let range = hi - lo;
        let mut mus = obs.to_vec();
        mus.push(0.5 * (lo + hi));
        mus.sort_by(f64::total_cmp);
        let min_sigma = range / (mus.len() as f64).min(100.0);
        let sigmas = (0..mus.len())
            .map(|i| {
                let left = if i == 0 { mus[i] - lo } else { mus[i] - mus[i - 1] };
                let right = if i + 1 == mus.len() { hi - mus[i] } else { mus[i + 1] - mus[i] };
                left.max(right).clamp(min_sigma, range)
            })
            .collect();
        let mut p = Self { lo, hi, mus, sigmas };
        // the prior component keeps its full width
        if let Some(i) = p.mus.iter().position(|&m| m == 0.5 * (lo + hi)) {
            p.sigmas[i] = range;
        }
        p
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.random_range(0..self.mus.len());
        let normal = Normal::new(self.mus[k], self.sigmas[k]).expect("positive bandwidth");
        let (a, b) = (normal.cdf(self.lo), normal.cdf(self.hi));
        let u = a + (b - a) * rng.random::<f64>();
        normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16)).clamp(self.lo, self.hi)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let total: f64 = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .map(|(&mu, &s)| {
                let normal = Normal::new(mu, s).expect("positive bandwidth");
                let mass = (normal.cdf(self.hi) - normal.cdf(self.lo)).max(1e-300);
                let z = (x - mu) / s;
                (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()) / mass
            })
            .sum();
        (total / self.mus.len() as f64).max(1e-300).ln()
    }
}

fn categorical_weights(obs: &[&str], choices: &[String]) -> Vec<f64> {
    let mut w: Vec<f64> = choices.iter().map(|c| 1.0 + obs.iter().filter(|&&o| o == c).count() as f64).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// TPE tuning constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_candidates: usize,
    pub n_startup: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, n_candidates: DEFAULT_CANDIDATES, n_startup: DEFAULT_STARTUP_TRIALS }
    }
}

/// Proposes the next parameter assignment. With fewer than `n_startup`
/// successful trials this is a prior draw; afterwards it is the candidate
/// drawn from the good-trial density that maximizes `l(x) / g(x)`.
pub fn tpe_sample(history: &[TrialRecord], space: &SearchSpace, cfg: &TpeConfig, seed: u64) -> Result<Params> {
    space.validate()?;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.n_candidates == 0 {
        return Err(Error::Config("TPE needs gamma in (0,1) and at least one candidate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done: Vec<(&TrialRecord, f64)> = history.iter().filter_map(|t| t.ok_score().map(|c| (t, c))).collect();
    if done.len() < cfg.n_startup.max(2) {
        return Ok(sample_prior_params(space, &mut rng));
    }
    done.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.trial_id.cmp(&b.0.trial_id)));
    let n_good = ((cfg.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, bad) = done.split_at(n_good);

    let mut candidates: Vec<Params> = vec![Params::new(); cfg.n_candidates];
    let mut scores = vec![0.0; cfg.n_candidates];
    for (name, dist) in &space.params {
        match (dist, numeric_bounds(dist)) {
            (_, Some((lo, hi))) => {
                let values = |set: &[(&TrialRecord, f64)]| -> Vec<f64> {
                    set.iter().filter_map(|(t, _)| t.params.get(name).and_then(|v| to_internal(dist, v))).collect()
                };
                let l = Parzen::fit(&values(good), lo, hi);
                let g = Parzen::fit(&values(bad), lo, hi);
                for (cand, score) in candidates.iter_mut().zip(scores.iter_mut()) {
                    let u = l.sample(&mut rng);
                    let value = from_internal(dist, u);
                    let u = to_internal(dist, &value).expect("numeric");
                    *score += l.log_pdf(u) - g.log_pdf(u);
                    cand.insert(name.clone(), value);
                }
            }
            (Distribution::Categorical { choices }, None) => {
                let labels = |set: &[(&TrialRecord, f64)]| -> Vec<String> {
                    set.iter()
                        .filter_map(|(t, _)| match t.params.get(name) {
                            Some(ParamValue::Choice(c)) => Some(c.clone()),
                            _ => None,
                        })
                        .collect()
                };
                let good_labels = labels(good);
                let bad_labels = labels(bad);
                let l = categorical_weights(&good_labels.iter().map(String::as_str).collect::<Vec<_>>(), choices);
                let g = categorical_weights(&bad_labels.iter().map(String::as_str).collect::<Vec<_>>(), choices);
                for (cand, score) in candidates.iter_mut().zip(scores.iter_mut()) {
                    let mut u = rng.random::<f64>();
                    let mut k = 0;
                    while k + 1 < choices.len() && u >= l[k] {
                        u -= l[k];
                        k += 1;
                    }
                    *score += l[k].ln() - g[k].ln();
                    cand.insert(name.clone(), ParamValue::Choice(choices[k].clone()));
                }
            }
            (_, None) => unreachable!("only categorical parameters lack numeric bounds"),
        }
    }
    let best = (0..cfg.n_candidates).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok(candidates.swap_remove(best))
}

/// Splits rows into `k` folds, dealing shuffled events and then shuffled
/// non-events round robin so every fold gets its proportional share.
pub fn stratified_folds(y: &[SurvivalOutcome], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    if y.len() < k {
        return Err(Error::Config(format!("{} rows cannot fill {k} folds", y.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut events, mut others): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| y[i].event);
    if events.len() < k || others.len() < k {
        return Err(Error::Stratification(format!(
            "{} events and {} non-events cannot be spread over {k} folds",
            events.len(),
            others.len()
        )));
    }
    events.shuffle(&mut rng);
    others.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in events.into_iter().chain(others).enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// k-fold cross-validated concordance of one spec. Each held-out fold serves
/// as the early-stopping set of the model trained on the other folds.
pub fn cross_validate(spec: &MlpSpec, x: &FeatureMatrix, y: &[SurvivalOutcome], k: usize, seed: u64) -> Result<TrialRecord> {
    if x.n_rows() != y.len() {
        return Err(Error::Shape { expected: x.n_rows(), got: y.len() });
    }
    let folds = stratified_folds(y, k, seed)?;
    let mut record = TrialRecord {
        trial_id: 0,
        params: Params::new(),
        spec: spec.clone(),
        fold_c: Vec::with_capacity(k),
        mean_c: None,
        status: TrialStatus::Ok,
        message: None,
    };
    for (f, held_out) in folds.iter().enumerate() {
        let train_rows: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, rows)| rows.iter().copied()).collect();
        let pick = |rows: &[usize]| (x.select_rows(rows), rows.iter().map(|&i| y[i]).collect::<Vec<_>>());
        let (xt, yt) = pick(&train_rows);
        let (xv, yv) = pick(held_out);
        let outcome = train(&xt, &yt, &xv, &yv, spec, seed.wrapping_add(f as u64))
            .and_then(|model| model.predict(&xv))
            .and_then(|scores| concordance(&scores, &yv));
        match outcome {
            Ok(c) => record.fold_c.push(c.c_index),
            Err(e) => {
                record.status = TrialStatus::Failed;
                record.message = Some(format!("fold {}: {e}", f + 1));
                return Ok(record);
            }
        }
    }
    record.mean_c = Some(record.fold_c.iter().sum::<f64>() / k as f64);
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Tpe,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of new trials to run.
    pub budget: usize,
    pub k: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub tpe: TpeConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 200, k: 3, seed: 0, sampler: Sampler::Tpe, tpe: TpeConfig::default() }
    }
}

/// Seed of the sampler for a given trial, so a trial's draw depends only on
/// the master seed, its id and the history before it.
pub fn trial_seed(seed: u64, trial_id: usize) -> u64 {
    let mut z = seed ^ (trial_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `cfg.budget` trials after those already in `history`, calling
/// `on_trial` as each one completes. Returns the best successful trial and
/// the full history.
pub fn search(
    space: &SearchSpace,
    x: &FeatureMatrix,
    y: &[SurvivalOutcome],
    cfg: &SearchConfig,
    mut history: Vec<TrialRecord>,
    mut on_trial: impl FnMut(&TrialRecord) -> Result<()>,
) -> Result<(TrialRecord, Vec<TrialRecord>)> {
    space.validate()?;
    if cfg.budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    for (i, t) in history.iter().enumerate() {
        if t.trial_id != i {
            return Err(Error::Config(format!("trial history is out of order at line {}", i + 1)));
        }
    }
    let start = history.len();
    for trial_id in start..start + cfg.budget {
        let sample_seed = trial_seed(cfg.seed, trial_id);
        let params = match cfg.sampler {
            Sampler::Tpe => tpe_sample(&history, space, &cfg.tpe, sample_seed)?,
            Sampler::Random => sample_prior_params(space, &mut ChaCha8Rng::seed_from_u64(sample_seed)),
        };
        let mut record = match space.to_spec(&params) {
            Ok(spec) => cross_validate(&spec, x, y, cfg.k, cfg.seed)?,
            Err(e) => TrialRecord {
                trial_id,
                params: Params::new(),
                spec: space.base.clone(),
                fold_c: Vec::new(),
                mean_c: None,
                status: TrialStatus::Failed,
                message: Some(e.to_string()),
            },
        };
        record.trial_id = trial_id;
        record.params = params;
        on_trial(&record)?;
        history.push(record);
    }
    let best = history
        .iter()
        .filter(|t| t.ok_score().is_some())
        .fold(None::<&TrialRecord>, |b, t| match b {
            Some(b) if b.mean_c >= t.mean_c => Some(b),
            _ => Some(t),
        })
        .cloned();
    match best {
        Some(best) => Ok((best, history)),
        None => Err(Error::SearchFailed(history.len())),
    }
}

pub fn write_trial<W: Write>(mut writer: W, trial: &TrialRecord) -> Result<()> {
    serde_json::to_writer(&mut writer, trial)?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Reads a JSON-lines trial history, ignoring blank lines.
pub fn read_history<R: BufRead>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
