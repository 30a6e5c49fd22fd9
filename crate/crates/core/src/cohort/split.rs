use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SurvivalOutcome;
use crate::error::{Error, Result};

/// Row indices of a train/validation/test partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Train and validation rows together, sorted.
    pub fn train_and_validation(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        rows.sort_unstable();
        rows
    }
}

/// Size of the set-aside part when `fraction` of `n` rows is held out: the
/// retained part gets `floor(n * (1 - fraction))` rows.
pub(crate) fn set_aside_size(n: usize, fraction: f64) -> usize {
    let retained = ((n as f64) * (1.0 - fraction) + 1e-9).floor() as usize;
    n - retained.min(n)
}

/// Event-stratified three-way split. `test_fraction` of all rows goes to the
/// test set, then `validation_fraction` of the remainder to validation.
pub fn stratified_split(
    outcomes: &[SurvivalOutcome],
    test_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    for (name, f) in [("test_fraction", test_fraction), ("validation_fraction", validation_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} must be in (0,1), got {f}")));
        }
    }
    let n = outcomes.len();
    if n < 8 {
        return Err(Error::Stratification(format!("need at least 8 subjects, got {n}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<usize> = (0..n).filter(|&i| outcomes[i].event).collect();
    let mut censored: Vec<usize> = (0..n).filter(|&i| !outcomes[i].event).collect();
    if events.is_empty() || censored.is_empty() {
        return Err(Error::Stratification("both event classes must be present".into()));
    }
    events.shuffle(&mut rng);
    censored.shuffle(&mut rng);

    let n_test = set_aside_size(n, test_fraction);
    let test = take_stratified(&mut events, &mut censored, n, n_test, "test")?;
    let rest = events.len() + censored.len();
    let n_val = set_aside_size(rest, validation_fraction);
    let validation = take_stratified(&mut events, &mut censored, rest, n_val, "validation")?;
    if events.is_empty() || censored.is_empty() {
        return Err(Error::Stratification("train split lacks one event class".into()));
    }
    let mut train: Vec<usize> = events.into_iter().chain(censored).collect();
    train.sort_unstable();

    Ok(SplitIndices { train, validation, test })
}

/// Moves `size` rows out of the pools with the event share rounded to the
/// nearest integer of the proportional ideal.
fn take_stratified(
    events: &mut Vec<usize>,
    censored: &mut Vec<usize>,
    total: usize,
    size: usize,
    label: &str,
) -> Result<Vec<usize>> {
    let ideal = events.len() as f64 * size as f64 / total as f64;
    let n_events = (ideal.round() as usize).min(events.len());
    let n_censored = size - n_events;
    if n_events == 0 || n_censored == 0 || n_censored > censored.len() {
        return Err(Error::Stratification(format!(
            "{label} split of {size} rows cannot hold both event classes ({} events available)",
            events.len()
        )));
    }
    let mut part: Vec<usize> = events.drain(..n_events).chain(censored.drain(..n_censored)).collect();
    part.sort_unstable();
    Ok(part)
}
