use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survrisk::cohort::{FeatureMatrix, Scaling};
use survrisk::coxph::{breslow_from_scores, CoxModel};
use survrisk::neural::MlpSurvModel;
use survrisk::stepfn::StepFunction;
use survrisk::{Error, Result};

use crate::config::RunConfig;

/// Bumped whenever an artifact layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// A network together with the Breslow baseline of its training scores,
/// which turns scores into horizon risks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralRiskModel {
    pub network: MlpSurvModel,
    pub baseline_cumhaz: StepFunction,
    pub max_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Model {
    Cox(CoxModel),
    Neural(NeuralRiskModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub model: Model,
}

impl NeuralRiskModel {
    pub fn new(network: MlpSurvModel, x_train: &FeatureMatrix, y_train: &[survrisk::cohort::SurvivalOutcome]) -> Result<Self> {
        let scores = network.predict(x_train)?;
        Ok(Self {
            baseline_cumhaz: breslow_from_scores(&scores, y_train),
            max_time: y_train.iter().map(|o| o.duration).fold(0.0, f64::max),
            network,
        })
    }
}

impl ModelArtifact {
    pub fn new(config: &RunConfig, model: Model) -> Self {
        Self { version: FORMAT_VERSION, tool_version: env!("CARGO_PKG_VERSION").to_string(), config: config.clone(), model }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let artifact: Self = serde_json::from_str(&text)?;
        if artifact.version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "{} has artifact version {}, expected {FORMAT_VERSION}",
                path.display(),
                artifact.version
            )));
        }
        Ok(artifact)
    }

    pub fn column_names(&self) -> &[String] {
        match &self.model {
            Model::Cox(m) => &m.column_names,
            Model::Neural(m) => &m.network.column_names,
        }
    }

    fn scaling(&self) -> &[Scaling] {
        match &self.model {
            Model::Cox(m) => &m.scaling,
            Model::Neural(m) => &m.network.scaling,
        }
    }

    /// Picks the model's columns out of a preprocessed matrix and re-expresses
    /// them in the model's own scaling, so a model is applied consistently to
    /// any cohort.
    pub fn align(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let names = self.column_names();
        let missing: Vec<&str> = names.iter().filter(|n| x.column_index(n).is_none()).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!("data lacks model feature(s): {}", missing.join(", "))));
        }
        let mut aligned = x.select_named(names)?;
        let rows: Vec<Vec<f64>> = (0..aligned.n_rows())
            .map(|i| {
                aligned
                    .row(i)
                    .iter()
                    .zip(&aligned.scaling)
                    .zip(self.scaling())
                    .map(|((&v, from), to)| to.apply(unscale(from, v)))
                    .collect()
            })
            .collect();
        let mut out = FeatureMatrix::from_rows(names.to_vec(), &rows)?;
        out.scaling = self.scaling().to_vec();
        out.sources = std::mem::take(&mut aligned.sources);
        Ok(out)
    }

    /// Risk scores (log-hazards) for an aligned matrix.
    pub fn scores(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        match &self.model {
            Model::Cox(m) => m.linear_predictor(x),
            Model::Neural(m) => m.network.predict(x),
        }
    }

    fn baseline(&self) -> (&StepFunction, f64) {
        match &self.model {
            Model::Cox(m) => (&m.baseline_cumhaz, m.max_time),
            Model::Neural(m) => (&m.baseline_cumhaz, m.max_time),
        }
    }

    fn check_horizon(&self, horizon: f64) -> Result<f64> {
        let (h0, max_time) = self.baseline();
        if !(horizon >= 0.0) || horizon > max_time {
            return Err(Error::Extrapolation { horizon, max_time });
        }
        Ok(h0.eval(horizon))
    }

    /// Horizon risks `1 - exp(-H0(h) exp(score))` for an aligned matrix.
    pub fn risks(&self, x: &FeatureMatrix, horizon: f64) -> Result<Vec<f64>> {
        let h0 = self.check_horizon(horizon)?;
        Ok(self.scores(x)?.into_iter().map(|s| risk(h0, s)).collect())
    }

    /// Horizon risk for one subject given in raw units.
    pub fn risk_raw(&self, x_raw: &[f64], horizon: f64) -> Result<f64> {
        match &self.model {
            Model::Cox(m) => m.predict_risk(x_raw, horizon),
            Model::Neural(m) => {
                let h0 = self.check_horizon(horizon)?;
                Ok(risk(h0, m.network.predict_raw(x_raw)?))
            }
        }
    }
}

fn unscale(scaling: &Scaling, v: f64) -> f64 {
    match *scaling {
        Scaling::Standardized { mean, sd } => v * sd + mean,
        Scaling::Identity => v,
    }
}

fn risk(cumhaz: f64, score: f64) -> f64 {
    (-(-cumhaz * score.exp()).exp_m1()).clamp(0.0, 1.0)
}

/// Files written by the current command, removed again if it fails.
#[derive(Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.text(path, &text)
    }

    pub fn text(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        fs::write(&path, contents)?;
        self.written.push(path);
        Ok(())
    }

    pub fn remove_all(&mut self) {
        for path in self.written.drain(..) {
            let _ = fs::remove_file(path);
        }
    }
}
