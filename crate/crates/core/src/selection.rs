//! Feature selection: univariate Cox screening and backward elimination
//! guided by validation concordance.

use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureMatrix, SurvivalOutcome};
use crate::coxph::{fit, wald_stats, CoxFitConfig, CoxModel};
use crate::error::{Error, Result};
use crate::metrics::concordance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub feature: String,
    /// Wald p-value of the single-covariate fit; absent when the fit failed.
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResult {
    pub alpha: f64,
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedFeature>,
}

/// Fits one single-covariate Cox model per feature and keeps those with
/// Wald `p <= alpha`. Features whose fit fails or does not converge are
/// dropped with the reason recorded.
pub fn univariate_screen(
    x: &FeatureMatrix,
    y: &[SurvivalOutcome],
    alpha: f64,
    cfg: &CoxFitConfig,
) -> Result<ScreenResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0,1], got {alpha}")));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..x.n_cols() {
        let name = x.column_names[j].clone();
        let single = x.select_columns(&[j]);
        let outcome = fit(&single, y, cfg).and_then(|m| wald_stats(&m, 0.05).map(|w| w.rows[0].p_value));
        match outcome {
            Ok(p) if p <= alpha => kept.push(name),
            Ok(p) => dropped.push(DroppedFeature { feature: name, p_value: Some(p), failure: None }),
            Err(e) => dropped.push(DroppedFeature { feature: name, p_value: None, failure: Some(e.to_string()) }),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyScreen);
    }
    Ok(ScreenResult { alpha, kept, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationRound {
    pub round: usize,
    pub batch_size: usize,
    pub candidate_set_removed: Vec<String>,
    pub accepted: bool,
    pub validation_c_before: f64,
    /// Absent when the refit failed.
    pub validation_c_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationTrace {
    pub initial_features: Vec<String>,
    pub initial_c: f64,
    pub drop_tolerance: f64,
    pub rounds: Vec<EliminationRound>,
    pub surviving_features: Vec<String>,
    pub final_c: f64,
}

/// Batch sizes tried by backward elimination: start at
/// `max(1, ceil(d / 8))` and halve after each rejection down to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    /// Initial batch is `ceil(d / divisor)`.
    pub divisor: usize,
}

impl Default for BatchSchedule {
    fn default() -> Self {
        Self { divisor: 8 }
    }
}

impl BatchSchedule {
    pub fn initial(&self, d: usize) -> usize {
        d.div_ceil(self.divisor.max(1)).max(1)
    }

    /// All distinct sizes the ladder can visit for `d` features.
    pub fn sizes(&self, d: usize) -> Vec<usize> {
        let mut k = self.initial(d);
        let mut out = vec![k];
        while k > 1 {
            k /= 2;
            out.push(k.max(1));
        }
        out.dedup();
        out
    }
}

struct Fitted {
    features: Vec<String>,
    model: CoxModel,
    c_val: f64,
}

fn fit_subset(
    features: &[String],
    x_train: &FeatureMatrix,
    y_train: &[SurvivalOutcome],
    x_val: &FeatureMatrix,
    y_val: &[SurvivalOutcome],
    cfg: &CoxFitConfig,
) -> Result<Fitted> {
    let model = fit(&x_train.select_named(features)?, y_train, cfg)?;
    if !model.converged {
        return Err(Error::Numeric(model.warnings.join("; ")));
    }
    let scores = model.linear_predictor(&x_val.select_named(features)?)?;
    let c_val = concordance(&scores, y_val)?.c_index;
    Ok(Fitted { features: features.to_vec(), model, c_val })
}

/// Validation concordance of a Cox model refitted on `features`.
pub fn validation_concordance(
    features: &[String],
    x_train: &FeatureMatrix,
    y_train: &[SurvivalOutcome],
    x_val: &FeatureMatrix,
    y_val: &[SurvivalOutcome],
    cfg: &CoxFitConfig,
) -> Result<f64> {
    Ok(fit_subset(features, x_train, y_train, x_val, y_val, cfg)?.c_val)
}

/// Features of `fitted` ordered by Wald p-value, largest first; equal
/// p-values are ordered by name.
fn rank_by_p(fitted: &Fitted, exclude: &[String]) -> Result<Vec<String>> {
    let wald = wald_stats(&fitted.model, 0.05)?;
    let mut ranked: Vec<(f64, &str)> = wald
        .rows
        .iter()
        .filter(|r| !exclude.contains(&r.feature))
        .map(|r| (r.p_value, r.feature.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().map(|(_, f)| f.to_string()).collect())
}

/// Backward elimination. Each round refits without the `k` features with
/// the largest p-values; the removal is accepted unless validation
/// concordance drops by more than `drop_tolerance`. A rejection halves `k`.
/// At `k = 1` each remaining feature is tried on its own and kept for good
/// once its removal is rejected. At least one feature always remains.
pub fn backward_eliminate(
    x_train: &FeatureMatrix,
    y_train: &[SurvivalOutcome],
    x_val: &FeatureMatrix,
    y_val: &[SurvivalOutcome],
    drop_tolerance: f64,
    schedule: BatchSchedule,
    cfg: &CoxFitConfig,
) -> Result<EliminationTrace> {
    if drop_tolerance.is_nan() {
        return Err(Error::Config("drop_tolerance must not be NaN".into()));
    }
    if x_train.column_names != x_val.column_names {
        return Err(Error::Schema("train and validation columns differ".into()));
    }
    let initial_features = x_train.column_names.clone();
    if initial_features.is_empty() {
        return Err(Error::Config("no features to eliminate".into()));
    }
    let mut current = fit_subset(&initial_features, x_train, y_train, x_val, y_val, cfg)?;
    let initial_c = current.c_val;
    let mut k = schedule.initial(initial_features.len());
    let mut permanent: Vec<String> = Vec::new();
    let mut rounds = Vec::new();

    loop {
        let candidates = rank_by_p(&current, &permanent)?;
        let removable = current.features.len() - 1;
        if candidates.is_empty() || removable == 0 {
            break;
        }
        let size = k.min(candidates.len()).min(removable);
        let batch: Vec<String> = candidates[..size].to_vec();
        let remaining: Vec<String> = current.features.iter().filter(|f| !batch.contains(f)).cloned().collect();

        let mut round = EliminationRound {
            round: rounds.len() + 1,
            batch_size: size,
            candidate_set_removed: batch.clone(),
            accepted: false,
            validation_c_before: current.c_val,
            validation_c_after: None,
            note: None,
        };
        match fit_subset(&remaining, x_train, y_train, x_val, y_val, cfg) {
            Ok(refit) => {
                round.validation_c_after = Some(refit.c_val);
                if current.c_val - refit.c_val <= drop_tolerance {
                    round.accepted = true;
                    current = refit;
                }
            }
            Err(e) => round.note = Some(format!("refit failed: {e}")),
        }
        if !round.accepted {
            if size == 1 {
                permanent.push(batch[0].clone());
            } else {
                k = (size / 2).max(1);
            }
        }
        rounds.push(round);
    }

    Ok(EliminationTrace {
        initial_features,
        initial_c,
        drop_tolerance,
        rounds,
        surviving_features: current.features,
        final_c: current.c_val,
    })
}
