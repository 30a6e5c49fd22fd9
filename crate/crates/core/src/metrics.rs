//! Discrimination and calibration metrics for right-censored outcomes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::SurvivalOutcome;
use crate::error::{Error, Result};
use crate::stepfn::StepFunction;

/// Harrell's C with the pair counts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceResult {
    pub c_index: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub tied_risk: u64,
    pub comparable_pairs: u64,
}

/// Fenwick tree of counts over score ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(size: usize) -> Self {
        Self { tree: vec![0; size + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

/// Harrell's concordance index; higher scores mean higher risk.
///
/// A pair `(i, j)` is comparable when `t_i < t_j` and subject `i` had the
/// event. Tied scores count one half; tied times are never comparable.
/// Runs in `O(n log n)`.
pub fn concordance(scores: &[f64], y: &[SurvivalOutcome]) -> Result<ConcordanceResult> {
    if scores.len() != y.len() {
        return Err(Error::Shape { expected: y.len(), got: scores.len() });
    }
    if y.len() < 2 {
        return Err(Error::UndefinedConcordance);
    }
    if !y.iter().any(|o| o.event) {
        return Err(Error::NoEvents);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN risk score".into()));
    }

    let mut sorted_scores = scores.to_vec();
    sorted_scores.sort_by(f64::total_cmp);
    sorted_scores.dedup();
    let rank = |s: f64| sorted_scores.partition_point(|&v| v < s);

    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[b].duration.total_cmp(&y[a].duration));

    let mut counter = RankCounter::new(sorted_scores.len());
    let mut inserted = 0u64;
    let (mut concordant, mut discordant, mut tied) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let t = y[order[start]].duration;
        let end = start + order[start..].iter().take_while(|&&i| y[i].duration == t).count();
        // `counter` holds exactly the subjects with a strictly later time.
        for &i in &order[start..end] {
            if y[i].event {
                let r = rank(scores[i]);
                let lower = counter.below(r);
                let not_higher = counter.below(r + 1);
                concordant += lower;
                tied += not_higher - lower;
                discordant += inserted - not_higher;
            }
        }
        for &i in &order[start..end] {
            counter.add(rank(scores[i]));
            inserted += 1;
        }
        start = end;
    }

    let comparable = concordant + discordant + tied;
    if comparable == 0 {
        return Err(Error::UndefinedConcordance);
    }
    Ok(ConcordanceResult {
        c_index: (concordant as f64 + 0.5 * tied as f64) / comparable as f64,
        concordant,
        discordant,
        tied_risk: tied,
        comparable_pairs: comparable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub rounds: usize,
    pub level: f64,
}

/// Consecutive failed resamples tolerated within one round.
pub const MAX_RESAMPLE_RETRIES: usize = 10;

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over `n` observations.
///
/// `metric` receives the resampled row indices; an `Err` marks a degenerate
/// resample (for example one without events) and triggers a redraw. Round
/// `r` draws from its own generator seeded with `seed + r`.
pub fn bootstrap_ci<F>(n: usize, metric: F, rounds: usize, level: f64, seed: u64) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if rounds == 0 {
        return Err(Error::Config("bootstrap needs at least one round".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level must be in (0,1), got {level}")));
    }
    if n == 0 {
        return Err(Error::Bootstrap("no observations".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;

    let mut values = Vec::with_capacity(rounds);
    let mut sample = vec![0usize; n];
    for round in 0..rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(round as u64));
        let mut failures = 0;
        loop {
            sample.iter_mut().for_each(|s| *s = rng.random_range(0..n));
            match metric(&sample) {
                Ok(v) if v.is_finite() => {
                    values.push(v);
                    break;
                }
                _ => {
                    failures += 1;
                    if failures >= MAX_RESAMPLE_RETRIES {
                        return Err(Error::Bootstrap(format!(
                            "{MAX_RESAMPLE_RETRIES} consecutive degenerate resamples in round {round}"
                        )));
                    }
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapCI { point, low: percentile(&values, tail), high: percentile(&values, 1.0 - tail), rounds, level })
}

/// Bootstrap CI of the concordance index.
pub fn concordance_ci(scores: &[f64], y: &[SurvivalOutcome], rounds: usize, level: f64, seed: u64) -> Result<BootstrapCI> {
    if scores.len() != y.len() {
        return Err(Error::Shape { expected: y.len(), got: scores.len() });
    }
    bootstrap_ci(
        y.len(),
        |idx| {
            let (s, o): (Vec<f64>, Vec<SurvivalOutcome>) = idx.iter().map(|&i| (scores[i], y[i])).unzip();
            Ok(concordance(&s, &o)?.c_index)
        },
        rounds,
        level,
        seed,
    )
}

/// Product-limit estimate of the survival function. Censorings tied with an
/// event time count as still at risk at that time.
pub fn kaplan_meier(y: &[SurvivalOutcome]) -> StepFunction {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].duration.total_cmp(&y[b].duration));
    let mut at_risk = y.len();
    let mut surv = 1.0;
    let mut steps = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = y[order[start]].duration;
        let group = order[start..].iter().take_while(|&&i| y[i].duration == t).count();
        let events = order[start..start + group].iter().filter(|&&i| y[i].event).count();
        if events > 0 {
            surv *= 1.0 - events as f64 / at_risk as f64;
            steps.push((t, surv));
        }
        at_risk -= group;
        start += group;
    }
    StepFunction::new(1.0, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_index: usize,
    pub mean_predicted: f64,
    /// `1 - KM(horizon)` within the bin.
    pub km_observed: f64,
    pub subject_count: usize,
    pub at_risk_at_horizon: usize,
    /// Set when the bin's KM curve ends before the horizon; such bins are
    /// left out of the ICI.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub horizon: f64,
    pub bins: Vec<CalibrationBin>,
    pub ici: f64,
    pub mean_predicted_overall: f64,
    pub mean_observed_overall: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Quantile-binned calibration at `horizon`.
///
/// Subjects are sorted by predicted risk into `n_bins` equal-count bins. The
/// integrated calibration index is the subject-weighted mean of
/// `|mean predicted - KM observed risk|` over bins.
pub fn calibration(predicted: &[f64], y: &[SurvivalOutcome], horizon: f64, n_bins: usize) -> Result<CalibrationReport> {
    let n = y.len();
    if predicted.len() != n {
        return Err(Error::Shape { expected: n, got: predicted.len() });
    }
    if n_bins == 0 || n_bins > n {
        return Err(Error::Config(format!("n_bins must be in 1..={n}, got {n_bins}")));
    }
    if predicted.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("predicted risks must lie in [0,1]".into()));
    }
    let max_time = y.iter().map(|o| o.duration).fold(0.0, f64::max);
    if !(horizon > 0.0) || horizon > max_time {
        return Err(Error::Extrapolation { horizon, max_time });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]).then(a.cmp(&b)));

    let mut bins = Vec::with_capacity(n_bins);
    let mut warnings = Vec::new();
    let mut ici = 0.0;
    for b in 0..n_bins {
        let members = &order[b * n / n_bins..(b + 1) * n / n_bins];
        let outcomes: Vec<SurvivalOutcome> = members.iter().map(|&i| y[i]).collect();
        let mean_predicted = members.iter().map(|&i| predicted[i]).sum::<f64>() / members.len() as f64;
        let km = kaplan_meier(&outcomes);
        let at_risk = outcomes.iter().filter(|o| o.duration >= horizon).count();
        let surv = km.eval(horizon);
        let flagged = at_risk == 0 && surv > 0.0;
        let km_observed = 1.0 - surv;
        if flagged {
            warnings.push(format!("bin {b}: no subjects at risk at horizon {horizon}; excluded from ICI"));
        } else {
            ici += members.len() as f64 / n as f64 * (mean_predicted - km_observed).abs();
        }
        bins.push(CalibrationBin {
            bin_index: b,
            mean_predicted,
            km_observed,
            subject_count: members.len(),
            at_risk_at_horizon: at_risk,
            flagged,
        });
    }

    Ok(CalibrationReport {
        horizon,
        bins,
        ici,
        mean_predicted_overall: predicted.iter().sum::<f64>() / n as f64,
        mean_observed_overall: 1.0 - kaplan_meier(y).eval(horizon),
        warnings,
    })
}

impl CalibrationReport {
    /// Plot data: one row per bin.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["bin_index", "mean_predicted", "km_observed", "count"])?;
        for b in &self.bins {
            wtr.write_record([
                b.bin_index.to_string(),
                b.mean_predicted.to_string(),
                b.km_observed.to_string(),
                b.subject_count.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
