//! Survival risk modeling toolkit.
//!
//! The crate covers the full pipeline for building a time-to-event risk
//! score from a tabular cohort:
//!
//! - [`cohort`]: CSV ingestion, a synthetic Weibull proportional-hazards
//!   generator with known ground truth, preprocessing and stratified splits.
//! - [`coxph`]: Cox regression (Breslow/Efron ties) fitted by safeguarded
//!   Newton-Raphson, Wald inference, Breslow baseline hazard and horizon risk.
//! - [`selection`]: univariate screening and backward elimination driven by
//!   validation concordance.
//! - [`neural`]: a feedforward network trained on the negative Cox partial
//!   likelihood, with dropout, batch normalization, SGD/Adam.
//! - [`tuning`]: Tree-structured Parzen Estimator search over network specs
//!   scored by stratified k-fold concordance.
//! - [`metrics`]: Harrell's concordance, percentile bootstrap, Kaplan-Meier
//!   and binned calibration with the integrated calibration index.

pub mod cohort;
pub mod coxph;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod selection;
pub mod stepfn;
pub mod tuning;

pub use error::{Error, Result};
