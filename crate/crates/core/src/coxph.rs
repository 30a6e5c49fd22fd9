//! Cox proportional-hazards regression.
//!
//! The negative log partial likelihood is evaluated in one pass over
//! subjects sorted by descending time, accumulating risk-set sums of
//! `w = exp(eta - max eta)`, `w x` and `w x x^T`. Tied event times use the
//! Efron or Breslow correction. Fitting is Newton-Raphson with step halving,
//! a ridge fallback for singular Hessians and a monotone-likelihood check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::cohort::{FeatureMatrix, Scaling, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::stepfn::StepFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    Breslow,
    #[default]
    Efron,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxFitConfig {
    pub ties: Ties,
    pub max_iterations: usize,
    /// Convergence threshold on the change of the negative log partial likelihood.
    pub tolerance: f64,
    pub ridge: f64,
    pub step_halving_max: usize,
}

impl Default for CoxFitConfig {
    fn default() -> Self {
        Self { ties: Ties::Efron, max_iterations: 100, tolerance: 1e-7, ridge: 0.0, step_halving_max: 10 }
    }
}

impl CoxFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Ridge added when the Hessian cannot be factorized.
pub const FALLBACK_RIDGE: f64 = 1e-6;
/// `max |beta_j|` beyond which the likelihood is treated as monotone.
pub const SEPARATION_THRESHOLD: f64 = 50.0;

/// Value, gradient and Hessian of the negative log partial likelihood.
#[derive(Debug, Clone)]
pub struct NllEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Subjects in descending-time order, grouped by identical duration.
pub(crate) struct RiskOrder {
    order: Vec<usize>,
    /// `[start, end)` ranges into `order` sharing one duration.
    groups: Vec<(usize, usize)>,
}

impl RiskOrder {
    pub(crate) fn new(y: &[SurvivalOutcome]) -> Self {
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.sort_by(|&a, &b| y[b].duration.total_cmp(&y[a].duration).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=order.len() {
            if k == order.len() || y[order[k]].duration != y[order[start]].duration {
                groups.push((start, k));
                start = k;
            }
        }
        Self { order, groups }
    }
}

fn check_inputs(beta: &[f64], x: &FeatureMatrix, y: &[SurvivalOutcome]) -> Result<()> {
    if x.n_cols() != beta.len() {
        return Err(Error::Shape { expected: x.n_cols(), got: beta.len() });
    }
    if x.n_rows() != y.len() {
        return Err(Error::Shape { expected: x.n_rows(), got: y.len() });
    }
    if !y.iter().any(|o| o.event) {
        return Err(Error::NoEvents);
    }
    Ok(())
}

pub fn linear_predictor(beta: &[f64], x: &FeatureMatrix) -> Vec<f64> {
    (0..x.n_rows()).map(|i| dot(x.row(i), beta)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Negative log partial likelihood with exact gradient and Hessian, plus
/// `0.5 * ridge * |beta|^2` when `ridge > 0`.
pub fn neg_log_partial_likelihood(
    beta: &[f64],
    x: &FeatureMatrix,
    y: &[SurvivalOutcome],
    ties: Ties,
    ridge: f64,
) -> Result<NllEval> {
    check_inputs(beta, x, y)?;
    evaluate(beta, x, y, &RiskOrder::new(y), ties, ridge)
}

fn evaluate(
    beta: &[f64],
    x: &FeatureMatrix,
    y: &[SurvivalOutcome],
    risk: &RiskOrder,
    ties: Ties,
    ridge: f64,
) -> Result<NllEval> {
    let d = beta.len();
    let eta = linear_predictor(beta, x);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut value = 0.0;
    let mut grad = vec![0.0; d];
    // Upper triangle only; mirrored at the end.
    let mut hess = vec![0.0; d * d];

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d * d];
    let mut e1 = vec![0.0; d];
    let mut e2 = vec![0.0; d * d];
    let mut mean = vec![0.0; d];

    for &(start, end) in &risk.groups {
        let mut e0 = 0.0;
        let mut n_events = 0usize;
        e1.iter_mut().for_each(|v| *v = 0.0);
        e2.iter_mut().for_each(|v| *v = 0.0);

        for &i in &risk.order[start..end] {
            let w = (eta[i] - shift).exp();
            let xi = x.row(i);
            s0 += w;
            add_outer(&mut s1, &mut s2, xi, w);
            if y[i].event {
                n_events += 1;
                value -= eta[i];
                for (g, xv) in grad.iter_mut().zip(xi) {
                    *g -= xv;
                }
                if ties == Ties::Efron {
                    e0 += w;
                    add_outer(&mut e1, &mut e2, xi, w);
                }
            }
        }
        if n_events == 0 {
            continue;
        }

        for l in 0..n_events {
            let f = match ties {
                Ties::Breslow => 0.0,
                Ties::Efron => l as f64 / n_events as f64,
            };
            let d0 = s0 - f * e0;
            if !(d0 > 0.0) {
                return Err(Error::Numeric("empty risk-set denominator".into()));
            }
            value += d0.ln() + shift;
            for j in 0..d {
                mean[j] = (s1[j] - f * e1[j]) / d0;
                grad[j] += mean[j];
            }
            for j in 0..d {
                for k in j..d {
                    hess[j * d + k] += (s2[j * d + k] - f * e2[j * d + k]) / d0 - mean[j] * mean[k];
                }
            }
        }
    }

    if ridge > 0.0 {
        for j in 0..d {
            value += 0.5 * ridge * beta[j] * beta[j];
            grad[j] += ridge * beta[j];
            hess[j * d + j] += ridge;
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite partial likelihood".into()));
    }

    let hessian = DMatrix::from_fn(d, d, |r, c| if r <= c { hess[r * d + c] } else { hess[c * d + r] });
    Ok(NllEval { value, gradient: DVector::from_vec(grad), hessian })
}

fn add_outer(s1: &mut [f64], s2: &mut [f64], x: &[f64], w: f64) {
    let d = x.len();
    for j in 0..d {
        let wx = w * x[j];
        s1[j] += wx;
        let row = &mut s2[j * d..(j + 1) * d];
        for k in j..d {
            row[k] += wx * x[k];
        }
    }
}

/// A fitted Cox model. `beta` is on the scale of the (standardized) design
/// matrix; `scaling` maps raw inputs onto that scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub baseline_cumhaz: StepFunction,
    pub column_names: Vec<String>,
    pub scaling: Vec<Scaling>,
    pub config: CoxFitConfig,
    pub converged: bool,
    pub iterations: usize,
    pub final_nll: f64,
    /// Ridge actually used, including any fallback.
    pub effective_ridge: f64,
    pub ridge_fallback: bool,
    /// Largest follow-up time seen in training.
    pub max_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Squared ratio of the smallest to the largest Cholesky pivot below which
/// the Hessian is treated as singular. Exact collinearity (such as a full
/// one-hot group, which sums to a constant) leaves a pivot at rounding level
/// instead of failing the factorization outright.
const PIVOT_RATIO_FLOOR: f64 = 1e-12;

fn cholesky_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let chol = h.clone().cholesky()?;
    let pivots = chol.l_dirty().diagonal();
    let (lo, hi) = pivots.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p.abs()), hi.max(p.abs())));
    if hi == 0.0 || (lo / hi).powi(2) < PIVOT_RATIO_FLOOR {
        return None;
    }
    let step = chol.solve(g);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Fits a Cox model by Newton-Raphson starting from `beta = 0`.
pub fn fit(x: &FeatureMatrix, y: &[SurvivalOutcome], cfg: &CoxFitConfig) -> Result<CoxModel> {
    cfg.validate()?;
    let d = x.n_cols();
    check_inputs(&vec![0.0; d], x, y)?;
    if x.n_rows() <= d {
        return Err(Error::Config(format!("need more subjects ({}) than features ({d})", x.n_rows())));
    }

    let risk = RiskOrder::new(y);
    let mut ridge = cfg.ridge;
    let mut ridge_fallback = false;
    let mut warnings = Vec::new();
    let mut beta = DVector::zeros(d);
    let mut current = evaluate(beta.as_slice(), x, y, &risk, cfg.ties, ridge)?;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let step = match cholesky_solve(&current.hessian, &current.gradient) {
            Some(step) => step,
            None if !ridge_fallback => {
                ridge_fallback = true;
                ridge = ridge.max(FALLBACK_RIDGE);
                warnings.push(format!("singular hessian; refitting with ridge {ridge}"));
                current = evaluate(beta.as_slice(), x, y, &risk, cfg.ties, ridge)?;
                continue;
            }
            None => return Err(Error::Singular),
        };

        let mut scale = 1.0;
        let mut halvings = 0;
        let (candidate, trial) = loop {
            let candidate = &beta - &step * scale;
            let trial = evaluate(candidate.as_slice(), x, y, &risk, cfg.ties, ridge).ok();
            match trial {
                Some(t) if t.value <= current.value => break (candidate, Some(t)),
                _ if halvings >= cfg.step_halving_max => break (candidate, None),
                _ => {
                    scale *= 0.5;
                    halvings += 1;
                }
            }
        };
        let Some(trial) = trial else {
            // No descent along the Newton direction: numerically at the optimum.
            converged = true;
            break;
        };

        let decrease = current.value - trial.value;
        beta = candidate;
        current = trial;

        if beta.amax() > SEPARATION_THRESHOLD {
            warnings.push(format!(
                "monotone likelihood: |beta| exceeded {SEPARATION_THRESHOLD} with the likelihood still improving"
            ));
            break;
        }
        if decrease < cfg.tolerance {
            // An infinite coefficient can stall the likelihood while the Newton
            // step stays large.
            let remaining = cholesky_solve(&current.hessian, &current.gradient);
            let diverging = remaining
                .iter()
                .flat_map(|r| r.iter().zip(beta.iter()))
                .any(|(s, b)| s.abs() > 1e-3 * b.abs().max(1.0));
            if diverging {
                warnings.push("monotone likelihood: coefficient may be infinite".into());
            } else {
                converged = true;
            }
            break;
        }
    }
    if iterations >= cfg.max_iterations && !converged && warnings.is_empty() {
        warnings.push(format!("no convergence within {} iterations", cfg.max_iterations));
    }

    let covariance = match current.hessian.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => current.hessian.clone().try_inverse().ok_or(Error::Singular)?,
    };
    let beta: Vec<f64> = beta.iter().copied().collect();
    let baseline_cumhaz = baseline_cumhaz(&beta, x, y)?;
    Ok(CoxModel {
        covariance: (0..d).map(|r| (0..d).map(|c| 0.5 * (covariance[(r, c)] + covariance[(c, r)])).collect()).collect(),
        beta,
        baseline_cumhaz,
        column_names: x.column_names.clone(),
        scaling: x.scaling.clone(),
        config: *cfg,
        converged,
        iterations,
        final_nll: current.value,
        effective_ridge: ridge,
        ridge_fallback,
        max_time: y.iter().map(|o| o.duration).fold(0.0, f64::max),
        warnings,
    })
}

/// Breslow estimate of the baseline cumulative hazard at `beta`: at each
/// event time the increment is `events / sum_{risk set} exp(x . beta)`.
pub fn baseline_cumhaz(beta: &[f64], x: &FeatureMatrix, y: &[SurvivalOutcome]) -> Result<StepFunction> {
    check_inputs(beta, x, y)?;
    Ok(breslow_from_scores(&linear_predictor(beta, x), y))
}

/// Breslow baseline for arbitrary log-hazard scores.
pub fn breslow_from_scores(scores: &[f64], y: &[SurvivalOutcome]) -> StepFunction {
    let risk = RiskOrder::new(y);
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut increments = Vec::new();
    for &(start, end) in &risk.groups {
        let mut events = 0usize;
        for &i in &risk.order[start..end] {
            denom += (scores[i] - shift).exp();
            events += usize::from(y[i].event);
        }
        if events > 0 {
            let t = y[risk.order[start]].duration;
            increments.push((t, events as f64 * (-shift).exp() / denom));
        }
    }
    increments.reverse();
    let mut cum = 0.0;
    let steps = increments
        .into_iter()
        .map(|(t, inc)| {
            cum += inc;
            (t, cum)
        })
        .collect();
    StepFunction::new(0.0, steps)
}

/// Per-coefficient Wald statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub feature: String,
    pub beta: f64,
    pub standard_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldStats {
    pub alpha: f64,
    pub rows: Vec<WaldRow>,
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn wald_stats(model: &CoxModel, alpha: f64) -> Result<WaldStats> {
    if !model.converged {
        return Err(Error::InferenceRefused("model did not converge".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1), got {alpha}")));
    }
    let z_crit = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let rows = model
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| wald_row(&model.column_names[j], b, model.covariance[j][j].max(0.0).sqrt(), z_crit))
        .collect();
    Ok(WaldStats { alpha, rows })
}

fn wald_row(feature: &str, beta: f64, se: f64, z_crit: f64) -> WaldRow {
    let z = beta / se;
    WaldRow {
        feature: feature.to_string(),
        beta,
        standard_error: se,
        z,
        p_value: if z.is_nan() { 1.0 } else { two_sided_p(z) },
        ci_low: beta - z_crit * se,
        ci_high: beta + z_crit * se,
    }
}

impl CoxModel {
    /// Linear predictor for rows of an already-scaled design matrix.
    pub fn linear_predictor(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_columns(&x.column_names)?;
        Ok(linear_predictor(&self.beta, x))
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

    fn check_horizon(&self, horizon: f64) -> Result<()> {
        if !(horizon >= 0.0) || horizon > self.max_time {
            return Err(Error::Extrapolation { horizon, max_time: self.max_time });
        }
        Ok(())
    }

    /// `1 - exp(-H0(horizon) * exp(x . beta))` for a raw-unit feature vector.
    pub fn predict_risk(&self, x_raw: &[f64], horizon: f64) -> Result<f64> {
        if x_raw.len() != self.beta.len() {
            return Err(Error::Shape { expected: self.beta.len(), got: x_raw.len() });
        }
        self.check_horizon(horizon)?;
        let lp: f64 = x_raw
            .iter()
            .zip(&self.scaling)
            .zip(&self.beta)
            .map(|((&v, s), b)| s.apply(v) * b)
            .sum();
        Ok(risk_from_lp(self.baseline_cumhaz.eval(horizon), lp))
    }

    /// Horizon risks for every row of an already-scaled design matrix.
    pub fn predict_risk_scaled(&self, x: &FeatureMatrix, horizon: f64) -> Result<Vec<f64>> {
        self.check_horizon(horizon)?;
        let h0 = self.baseline_cumhaz.eval(horizon);
        Ok(self.linear_predictor(x)?.into_iter().map(|lp| risk_from_lp(h0, lp)).collect())
    }
}

pub(crate) fn risk_from_lp(cumhaz: f64, lp: f64) -> f64 {
    (-(-cumhaz * lp.exp()).exp_m1()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        let d = rows[0].len();
        FeatureMatrix::from_rows((0..d).map(|j| format!("f{j}")).collect(), rows).unwrap()
    }

    fn random_instance(n: usize, d: usize, tied: bool, seed: u64) -> (FeatureMatrix, Vec<SurvivalOutcome>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let y = (0..n)
            .map(|_| {
                let t = if tied { rng.random_range(1..6) as f64 } else { rng.random_range(0.1..10.0) };
                SurvivalOutcome::new(t, rng.random::<f64>() < 0.7)
            })
            .collect();
        let beta = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (matrix(&rows), y, beta)
    }

    /// Independent reference: direct risk-set sums without shifting.
    fn reference_breslow_nll(beta: &[f64], x: &FeatureMatrix, y: &[SurvivalOutcome]) -> f64 {
        let eta = linear_predictor(beta, x);
        let mut nll = 0.0;
        for i in 0..y.len() {
            if y[i].event {
                let denom: f64 = (0..y.len()).filter(|&j| y[j].duration >= y[i].duration).map(|j| eta[j].exp()).sum();
                nll -= eta[i] - denom.ln();
            }
        }
        nll
    }

    #[test]
    fn three_distinct_events_at_zero() {
        let x = matrix(&[vec![0.3], vec![-1.0], vec![2.0]]);
        let y = [SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(2.0, true), SurvivalOutcome::new(3.0, true)];
        for ties in [Ties::Breslow, Ties::Efron] {
            let e = neg_log_partial_likelihood(&[0.0], &x, &y, ties, 0.0).unwrap();
            assert!((e.value - (3.0f64.ln() + 2.0f64.ln())).abs() < 1e-12);
            assert!((e.value - 1.791759).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_reference_breslow() {
        let (x, y, beta) = random_instance(40, 3, true, 1);
        let e = neg_log_partial_likelihood(&beta, &x, &y, Ties::Breslow, 0.0).unwrap();
        assert!((e.value - reference_breslow_nll(&beta, &x, &y)).abs() < 1e-10);
    }

    #[test]
    fn efron_hand_computed_tie() {
        // Two tied events at t=1 among three subjects, beta=0:
        // Efron denominators 3 and 3 - 0.5*2 = 2 -> ln3 + ln2; then ln1 for the last.
        let x = matrix(&[vec![1.0], vec![0.0], vec![0.5]]);
        let y = [SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(2.0, true)];
        let efron = neg_log_partial_likelihood(&[0.0], &x, &y, Ties::Efron, 0.0).unwrap();
        assert!((efron.value - (3.0f64.ln() + 2.0f64.ln())).abs() < 1e-12);
        let breslow = neg_log_partial_likelihood(&[0.0], &x, &y, Ties::Breslow, 0.0).unwrap();
        assert!((breslow.value - 2.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn breslow_equals_efron_without_ties() {
        let (x, y, beta) = random_instance(30, 4, false, 2);
        let a = neg_log_partial_likelihood(&beta, &x, &y, Ties::Breslow, 0.0).unwrap();
        let b = neg_log_partial_likelihood(&beta, &x, &y, Ties::Efron, 0.0).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.hessian, b.hessian);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for (seed, ties, tied) in [(3, Ties::Breslow, false), (4, Ties::Efron, true), (5, Ties::Breslow, true), (6, Ties::Efron, false)] {
            let (x, y, beta) = random_instance(20, 4, tied, seed);
            let at = neg_log_partial_likelihood(&beta, &x, &y, ties, 0.3).unwrap();
            for j in 0..4 {
                let mut up = beta.clone();
                let mut down = beta.clone();
                up[j] += h;
                down[j] -= h;
                let fu = neg_log_partial_likelihood(&up, &x, &y, ties, 0.3).unwrap();
                let fd = neg_log_partial_likelihood(&down, &x, &y, ties, 0.3).unwrap();
                let num_grad = (fu.value - fd.value) / (2.0 * h);
                assert!(rel_err(at.gradient[j], num_grad) < 1e-5, "grad {j}: {} vs {num_grad}", at.gradient[j]);
                for k in 0..4 {
                    let num_hess = (fu.gradient[k] - fd.gradient[k]) / (2.0 * h);
                    assert!(rel_err(at.hessian[(j, k)], num_hess) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_events_is_an_error() {
        let x = matrix(&[vec![1.0], vec![2.0]]);
        let y = [SurvivalOutcome::new(1.0, false), SurvivalOutcome::new(2.0, false)];
        assert!(matches!(neg_log_partial_likelihood(&[0.0], &x, &y, Ties::Efron, 0.0), Err(Error::NoEvents)));
    }

    #[test]
    fn large_linear_predictors_do_not_overflow() {
        let x = matrix(&[vec![800.0], vec![790.0], vec![-5.0]]);
        let y = [SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(2.0, true), SurvivalOutcome::new(3.0, false)];
        let e = neg_log_partial_likelihood(&[1.0], &x, &y, Ties::Efron, 0.0).unwrap();
        assert!(e.value.is_finite());
    }

    #[test]
    fn one_covariate_fit_matches_grid_search() {
        let x = matrix(&[vec![1.0], vec![0.0], vec![1.0], vec![0.0]]);
        let y = [
            SurvivalOutcome::new(1.0, true),
            SurvivalOutcome::new(2.0, true),
            SurvivalOutcome::new(3.0, true),
            SurvivalOutcome::new(4.0, false),
        ];
        // grid over [-5, 5] with step 1e-3 using the reference likelihood
        let (mut best_b, mut best_v) = (0.0, f64::INFINITY);
        for k in 0..=10_000 {
            let b = -5.0 + k as f64 * 1e-3;
            let v = reference_breslow_nll(&[b], &x, &y);
            if v < best_v {
                best_v = v;
                best_b = b;
            }
        }
        let cfg = CoxFitConfig { ties: Ties::Breslow, ..Default::default() };
        let model = fit(&x, &y, &cfg).unwrap();
        assert!(model.converged);
        assert!((model.beta[0] - best_b).abs() < 1e-3, "{} vs grid {best_b}", model.beta[0]);
    }

    #[test]
    fn separation_is_flagged() {
        // covariate equals the event indicator and all events come first
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![if i < 5 { 1.0 } else { 0.0 }]).collect();
        let y: Vec<_> = (0..10).map(|i| SurvivalOutcome::new(i as f64 + 1.0, i < 5)).collect();
        let model = fit(&matrix(&rows), &y, &CoxFitConfig::default()).unwrap();
        assert!(!model.converged);
        assert!(model.warnings.iter().any(|w| w.contains("monotone")));
        assert!(wald_stats(&model, 0.05).is_err());
    }

    #[test]
    fn collinear_columns_trigger_ridge_fallback() {
        let (x, y, _) = random_instance(60, 2, false, 8);
        let rows: Vec<Vec<f64>> = (0..x.n_rows()).map(|i| vec![x.get(i, 0), x.get(i, 1), x.get(i, 0)]).collect();
        let model = fit(&matrix(&rows), &y, &CoxFitConfig::default()).unwrap();
        assert!(model.ridge_fallback);
        assert_eq!(model.effective_ridge, FALLBACK_RIDGE);
        assert!(model.converged);
        assert!((model.beta[0] - model.beta[2]).abs() < 1e-6);
    }

    #[test]
    fn wald_formulae() {
        let row = wald_row("f", 0.0, 1.0, 1.959963984540054);
        assert_eq!(row.p_value, 1.0);
        assert!((row.ci_low + 1.96).abs() < 1e-3 && (row.ci_high - 1.96).abs() < 1e-3);
        assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-6);

        let model = CoxModel {
            beta: vec![1.0],
            covariance: vec![vec![4.0]],
            baseline_cumhaz: StepFunction::new(0.0, vec![]),
            column_names: vec!["f".into()],
            scaling: vec![Scaling::Identity],
            config: CoxFitConfig::default(),
            converged: true,
            iterations: 1,
            final_nll: 0.0,
            effective_ridge: 0.0,
            ridge_fallback: false,
            max_time: 1.0,
            warnings: vec![],
        };
        let w = wald_stats(&model, 0.05).unwrap();
        assert_eq!(w.rows[0].standard_error, 2.0);
        assert!(w.rows[0].ci_low <= 1.0 && 1.0 <= w.rows[0].ci_high);
    }

    #[test]
    fn nelson_aalen_at_zero_beta() {
        let x = matrix(&[vec![1.0], vec![2.0], vec![3.0]]);
        let y = [SurvivalOutcome::new(1.0, true), SurvivalOutcome::new(2.0, true), SurvivalOutcome::new(3.0, true)];
        let h0 = baseline_cumhaz(&[0.0], &x, &y).unwrap();
        assert_eq!(h0.eval(0.0), 0.0);
        assert!((h0.eval(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((h0.eval(2.0) - (1.0 / 3.0 + 0.5)).abs() < 1e-15);
        assert!((h0.eval(3.0) - (1.0 / 3.0 + 0.5 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn baseline_is_nondecreasing_on_random_cohorts() {
        for seed in 0..100 {
            let (x, y, beta) = random_instance(25, 2, seed % 2 == 0, 100 + seed);
            if !y.iter().any(|o| o.event) {
                continue;
            }
            let h0 = baseline_cumhaz(&beta, &x, &y).unwrap();
            assert_eq!(h0.eval(0.0), 0.0);
            assert!(h0.steps.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
        }
    }

    fn fitted_model(seed: u64) -> (CoxModel, FeatureMatrix, Vec<SurvivalOutcome>) {
        let (x, y, _) = random_instance(80, 2, false, seed);
        (fit(&x, &y, &CoxFitConfig::default()).unwrap(), x, y)
    }

    #[test]
    fn predict_risk_contract() {
        let (mut model, x, _) = fitted_model(9);
        let horizon = model.max_time * 0.8;
        let r = model.predict_risk(x.row(0), horizon).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(matches!(model.predict_risk(x.row(0), model.max_time + 1.0), Err(Error::Extrapolation { .. })));
        assert!(matches!(model.predict_risk(&[1.0], horizon), Err(Error::Shape { .. })));

        // monotone in exp(x.beta)
        let j = if model.beta[0].abs() > 0.0 { 0 } else { 1 };
        let mut hi = x.row(0).to_vec();
        hi[j] += model.beta[j].signum();
        assert!(model.predict_risk(&hi, horizon).unwrap() > r);

        // null model: same risk for all subjects
        model.beta = vec![0.0, 0.0];
        let expected = 1.0 - (-model.baseline_cumhaz.eval(horizon)).exp();
        for i in 0..5 {
            assert!((model.predict_risk(x.row(i), horizon).unwrap() - expected).abs() < 1e-15);
        }
        model.baseline_cumhaz = StepFunction::new(0.0, vec![]);
        assert_eq!(model.predict_risk(x.row(0), horizon).unwrap(), 0.0);
    }

    #[test]
    fn scale_equivariance() {
        let (x, y, _) = random_instance(120, 3, true, 12);
        let cfg = CoxFitConfig { tolerance: 1e-12, ..Default::default() };
        let base = fit(&x, &y, &cfg).unwrap();
        let mut scaled = x.clone();
        scaled.scale_column(1, -2.5);
        let other = fit(&scaled, &y, &cfg).unwrap();
        assert!((other.beta[1] * -2.5 - base.beta[1]).abs() < 1e-8);
        let lp_a = base.linear_predictor(&x).unwrap();
        let lp_b = other.linear_predictor(&scaled).unwrap();
        for (a, b) in lp_a.iter().zip(&lp_b) {
            assert!((a - b).abs() < 1e-8);
        }
        let h = base.max_time * 0.5;
        let ra = base.predict_risk_scaled(&x, h).unwrap();
        let rb = other.predict_risk_scaled(&scaled, h).unwrap();
        for (a, b) in ra.iter().zip(&rb) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn hessian_is_psd(seed in any::<u64>(), efron in any::<bool>(), ridge in 0.0f64..0.5) {
            let ties = if efron { Ties::Efron } else { Ties::Breslow };
            let (x, y, _) = random_instance(30, 4, true, seed);
            prop_assume!(y.iter().any(|o| o.event));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..25 {
                let beta: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                let e = neg_log_partial_likelihood(&beta, &x, &y, ties, ridge).unwrap();
                let min_eig = e.hessian.symmetric_eigenvalues().min();
                prop_assert!(min_eig > -1e-8, "min eigenvalue {}", min_eig);
            }
        }

        #[test]
        fn predicted_risk_is_a_probability_nondecreasing_in_horizon(seed in 0u64..50, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (model, x, _) = fitted_model(seed);
            let (h1, h2) = (a.min(b) * model.max_time, a.max(b) * model.max_time);
            for i in 0..x.n_rows().min(10) {
                let r1 = model.predict_risk(x.row(i), h1).unwrap();
                let r2 = model.predict_risk(x.row(i), h2).unwrap();
                prop_assert!((0.0..=1.0).contains(&r1) && r1 <= r2);
            }
        }
    }
}
