use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Selu,
}

const LEAKY_SLOPE: f64 = 0.01;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
        }
    }

    /// Half-width of the uniform initializer for a layer with `fan_in` inputs.
    pub(crate) fn init_limit(self, fan_in: usize) -> f64 {
        let gain = match self {
            Activation::Relu | Activation::LeakyRelu => 6.0,
            Activation::Selu => 3.0,
        };
        (gain / fan_in as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    /// Widths of up to three hidden layers; empty means a linear model.
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub batch_norm: bool,
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-concordance improvement before stopping;
    /// 0 trains for all `max_epochs`.
    pub early_stop_patience: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            hidden_layers: vec![32, 32],
            activation: Activation::Relu,
            dropout_rate: 0.1,
            batch_norm: true,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            early_stop_patience: 10,
        }
    }
}

pub const MAX_HIDDEN_LAYERS: usize = 3;

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_layers.len() > MAX_HIDDEN_LAYERS {
            return bad(format!("at most {MAX_HIDDEN_LAYERS} hidden layers, got {}", self.hidden_layers.len()));
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0".into());
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1), got {v}"));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }
}
