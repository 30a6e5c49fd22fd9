use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CohortTable, ColumnData, ColumnSpec, DAYS_PER_YEAR};
use crate::error::{Error, Result};

/// Weibull baseline hazard `H0(t) = (t / scale)^shape`. Without a scale the
/// generator solves for the one that hits the target prevalence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullBaseline {
    pub shape: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// One standard-normal feature `x{j}` is generated per entry.
    pub true_log_hr: Vec<f64>,
    /// Coefficient on the product `x0 * x1` (0 keeps the model linear).
    #[serde(default)]
    pub interaction_log_hr: f64,
    pub baseline: WeibullBaseline,
    pub max_followup_years: f64,
    /// Years over which assessments are staggered before follow-up ends.
    #[serde(default = "default_stagger")]
    pub entry_stagger_years: f64,
    pub target_prevalence: f64,
    /// Probability that any single predictor cell is blanked.
    pub missing_rate: f64,
    /// Fraction of subjects given an outcome dated before assessment.
    #[serde(default)]
    pub preexisting_rate: f64,
    /// Adds a categorical, an ordinal and an event-date column, none of
    /// which affect the hazard.
    #[serde(default)]
    pub auxiliary_columns: bool,
    pub seed: u64,
}

fn default_stagger() -> f64 {
    2.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10_000,
            true_log_hr: vec![0.8, -0.5, 0.3, 0.0, 0.0],
            interaction_log_hr: 0.0,
            baseline: WeibullBaseline { shape: 1.2, scale: None },
            max_followup_years: 13.8,
            entry_stagger_years: default_stagger(),
            target_prevalence: 0.0323,
            missing_rate: 0.0,
            preexisting_rate: 0.0,
            auxiliary_columns: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return bad(format!("target_prevalence must be in (0,1), got {}", self.target_prevalence));
        }
        if !(self.max_followup_years > 0.0 && self.max_followup_years.is_finite()) {
            return bad(format!("max_followup_years must be positive, got {}", self.max_followup_years));
        }
        if !(self.entry_stagger_years >= 0.0 && self.entry_stagger_years < self.max_followup_years) {
            return bad("entry_stagger_years must be in [0, max_followup_years)".into());
        }
        if !(self.baseline.shape > 0.0 && self.baseline.shape.is_finite()) {
            return bad("weibull shape must be positive".into());
        }
        if let Some(scale) = self.baseline.scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad("weibull scale must be positive".into());
            }
        }
        for (name, p) in [("missing_rate", self.missing_rate), ("preexisting_rate", self.preexisting_rate)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0,1), got {p}"));
            }
        }
        if self.true_log_hr.iter().any(|b| !b.is_finite()) || !self.interaction_log_hr.is_finite() {
            return bad("log hazard ratios must be finite".into());
        }
        if self.interaction_log_hr != 0.0 && self.true_log_hr.len() < 2 {
            return bad("an interaction needs at least two features".into());
        }
        Ok(())
    }
}

/// What the generator knows that the data alone does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub feature_names: Vec<String>,
    pub log_hr: Vec<f64>,
    pub interaction_log_hr: f64,
    pub weibull_shape: f64,
    /// Scale actually used (solved for when not configured).
    pub weibull_scale: f64,
    /// Expected event fraction under the administrative censoring.
    pub expected_prevalence: f64,
}

const REGIONS: [&str; 5] = ["north", "south", "east", "west", "island"];
const REGION_WEIGHTS: [f64; 5] = [0.35, 0.30, 0.20, 0.1495, 0.0005];
const ACTIVITY: [&str; 3] = ["low", "medium", "high"];

fn recruitment_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2006, 3, 13).expect("valid date")
}

fn days(years: f64) -> i64 {
    (years * DAYS_PER_YEAR).round() as i64
}

/// Draws a cohort from a Weibull proportional-hazards model with linear
/// predictor `x . true_log_hr` (+ optional `x0 * x1` interaction).
///
/// Assessments are staggered uniformly over `entry_stagger_years` and every
/// subject is censored at a single extraction date `max_followup_years`
/// after the first possible assessment.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(CohortTable, GroundTruth)> {
    cfg.validate()?;
    let n = cfg.n_subjects;
    let d = cfg.true_log_hr.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut features = vec![vec![0.0; n]; d];
    let mut stagger = Vec::with_capacity(n);
    let mut uniforms = Vec::with_capacity(n);
    for i in 0..n {
        for col in features.iter_mut() {
            col[i] = rng.sample(StandardNormal);
        }
        stagger.push(rng.random::<f64>() * cfg.entry_stagger_years);
        uniforms.push(1.0 - rng.random::<f64>());
    }
    let linear_predictor: Vec<f64> = (0..n)
        .map(|i| {
            let lin: f64 = (0..d).map(|j| features[j][i] * cfg.true_log_hr[j]).sum();
            if cfg.interaction_log_hr != 0.0 {
                lin + cfg.interaction_log_hr * features[0][i] * features[1][i]
            } else {
                lin
            }
        })
        .collect();

    let start = recruitment_start();
    let extraction = start + Duration::days(days(cfg.max_followup_years));
    let assessment: Vec<NaiveDate> = stagger.iter().map(|&s| start + Duration::days(days(s))).collect();
    let followup: Vec<f64> = assessment
        .iter()
        .map(|&a| (extraction - a).num_days() as f64 / DAYS_PER_YEAR)
        .collect();

    let shape = cfg.baseline.shape;
    let expected = |scale: f64| -> f64 {
        followup
            .iter()
            .zip(&linear_predictor)
            .map(|(&c, &lp)| -(-(c / scale).powf(shape) * lp.exp()).exp_m1())
            .sum::<f64>()
            / n as f64
    };
    let scale = match cfg.baseline.scale {
        Some(scale) => {
            let p = expected(scale);
            if (p / cfg.target_prevalence - 1.0).abs() > 0.2 {
                return Err(Error::Config(format!(
                    "weibull scale {scale} yields expected prevalence {p:.4}, not within 20% of target {}",
                    cfg.target_prevalence
                )));
            }
            scale
        }
        None => solve_scale(&expected, cfg.target_prevalence)?,
    };
    let expected_prevalence = expected(scale);

    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        // inverse of S(t) = exp(-(t/scale)^shape * exp(lp))
        let t = scale * (-uniforms[i].ln() / linear_predictor[i].exp()).powf(1.0 / shape);
        let event_days = ((t * DAYS_PER_YEAR).ceil() as i64).max(1);
        let date = assessment[i].checked_add_signed(Duration::days(event_days.min(1_000_000)));
        outcome.push(date.filter(|&dt| dt <= extraction));
    }

    let mut schema: Vec<ColumnSpec> = (0..d).map(|j| ColumnSpec::continuous(format!("x{j}"))).collect();
    let mut columns: Vec<ColumnData> = features
        .iter()
        .map(|col| {
            ColumnData::Numeric(col.iter().map(|&v| keep_cell(&mut rng, cfg.missing_rate).then_some(v)).collect())
        })
        .collect();

    if cfg.auxiliary_columns {
        let region = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let cat = pick_weighted(&REGION_WEIGHTS, u);
                keep_cell(&mut rng, cfg.missing_rate).then_some(cat)
            })
            .collect();
        let activity = (0..n)
            .map(|_| {
                let level = rng.random_range(0..ACTIVITY.len()) as f64;
                keep_cell(&mut rng, cfg.missing_rate).then_some(level)
            })
            .collect();
        let history = (0..n)
            .map(|i| {
                let present = rng.random::<f64>() < 0.1;
                let offset = rng.random_range(-days(5.0)..=days(5.0));
                present.then(|| assessment[i] + Duration::days(offset))
            })
            .collect();
        schema.push(ColumnSpec::categorical("region", &REGIONS));
        schema.push(ColumnSpec::ordinal("activity", &ACTIVITY));
        schema.push(ColumnSpec::event_date("prior_condition_date"));
        columns.push(ColumnData::Categorical(region));
        columns.push(ColumnData::Numeric(activity));
        columns.push(ColumnData::Date(history));
    }

    if cfg.preexisting_rate > 0.0 {
        for (i, out) in outcome.iter_mut().enumerate() {
            if rng.random::<f64>() < cfg.preexisting_rate {
                *out = Some(assessment[i] - Duration::days(rng.random_range(1..=3650)));
            }
        }
    }

    let table = CohortTable::new(schema, columns, assessment, outcome, vec![extraction; n])?;
    let truth = GroundTruth {
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        log_hr: cfg.true_log_hr.clone(),
        interaction_log_hr: cfg.interaction_log_hr,
        weibull_shape: shape,
        weibull_scale: scale,
        expected_prevalence,
    };
    Ok((table, truth))
}

/// False when the cell should be blanked.
fn keep_cell(rng: &mut ChaCha8Rng, rate: f64) -> bool {
    rate == 0.0 || rng.random::<f64>() >= rate
}

fn pick_weighted(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Bisection on log-scale for the Weibull scale giving the target expected
/// prevalence (expected prevalence decreases in the scale).
fn solve_scale(expected: &dyn Fn(f64) -> f64, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (1e-6f64.ln(), 1e9f64.ln());
    if !(expected(lo.exp()) > target && expected(hi.exp()) < target) {
        return Err(Error::Config(format!("prevalence {target} is unreachable under this censoring")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = (0.5 * (lo + hi)).exp();
    if (expected(scale) / target - 1.0).abs() > 1e-3 {
        return Err(Error::Config(format!("could not calibrate baseline to prevalence {target}")));
    }
    Ok(scale)
}
