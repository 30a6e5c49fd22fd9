//! Feedforward neural Cox model.
//!
//! A multilayer perceptron maps a standardized feature vector to a scalar
//! log-hazard and is trained on the negative Cox partial likelihood computed
//! over the risk sets inside each minibatch.

mod loss;
mod network;
mod spec;
mod train;

pub use loss::cox_batch_loss;
pub use network::{BatchNorm, Gradients, Layer, Mode, MlpSurvModel};
pub use spec::{Activation, MlpSpec, OptimizerKind, MAX_HIDDEN_LAYERS};
pub use train::{lr_range_estimate, train, EpochLog};
