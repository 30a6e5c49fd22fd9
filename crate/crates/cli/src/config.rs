use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survrisk::cohort::SynthConfig;
use survrisk::coxph::CoxFitConfig;
use survrisk::tuning::{SearchSpace, TpeConfig};
use survrisk::{Error, Result};

/// Everything a pipeline run depends on. Loaded from a JSON file when one is
/// given; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to `<output_dir>/cohort.csv`.
    pub cohort: Option<PathBuf>,
    /// Defaults to `<output_dir>/schema.json`.
    pub schema: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub rare_threshold: f64,
    pub cox: CoxFitConfig,
    pub alpha: f64,
    pub drop_tolerance: f64,
    pub search_space: SearchSpace,
    pub tpe: TpeConfig,
    pub budget: usize,
    pub k: usize,
    pub horizon: f64,
    pub bootstrap_rounds: usize,
    pub confidence_level: f64,
    pub n_bins: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort: None,
            schema: None,
            output_dir: PathBuf::from("."),
            seed: 0,
            test_fraction: 0.25,
            validation_fraction: 0.25,
            rare_threshold: 0.001,
            cox: CoxFitConfig::default(),
            alpha: 0.1,
            drop_tolerance: 0.001,
            search_space: SearchSpace::default(),
            tpe: TpeConfig::default(),
            budget: 200,
            k: 3,
            horizon: 10.0,
            bootstrap_rounds: 50,
            confidence_level: 0.95,
            n_bins: 10,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let file = File::open(p).map_err(|e| Error::Config(format!("cannot open config {}: {e}", p.display())))?;
                serde_json::from_reader(file).map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.cohort.clone().unwrap_or_else(|| self.output_dir.join("cohort.csv"))
    }

    pub fn schema_path(&self) -> PathBuf {
        self.schema.clone().unwrap_or_else(|| self.output_dir.join("schema.json"))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0,1), got {v}")))
            }
        };
        unit("test_fraction", self.test_fraction)?;
        unit("validation_fraction", self.validation_fraction)?;
        unit("confidence_level", self.confidence_level)?;
        if !(0.0..1.0).contains(&self.rare_threshold) {
            return Err(Error::Config(format!("rare_threshold must be in [0,1), got {}", self.rare_threshold)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.bootstrap_rounds == 0 || self.n_bins == 0 {
            return Err(Error::Config("bootstrap_rounds and n_bins must be positive".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        self.cox.validate()
    }
}
