//! Right-continuous step functions over time.

use serde::{Deserialize, Serialize};

/// A right-continuous step function: `initial` before the first knot, then
/// the value of the last knot at or before `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub initial: f64,
    /// `(time, value)` knots, strictly increasing in time.
    pub steps: Vec<(f64, f64)>,
}

impl StepFunction {
    pub fn new(initial: f64, steps: Vec<(f64, f64)>) -> Self {
        debug_assert!(steps.windows(2).all(|w| w[0].0 < w[1].0));
        Self { initial, steps }
    }

    pub fn eval(&self, t: f64) -> f64 {
        // number of knots with time <= t
        let k = self.steps.partition_point(|&(time, _)| time <= t);
        if k == 0 {
            self.initial
        } else {
            self.steps[k - 1].1
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.0)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.steps.last().map(|s| s.0)
    }
}
