//! Fairness-vs-privacy auditing for binary classifiers.
//!
//! The crate trains biased and fairness-enhanced MLP classifiers on
//! subgroup-skewed data, attacks both with membership and attribute
//! inference attacks (including discrepancy-based variants that consume
//! paired predictions from the biased/fair model pair), and measures
//! defenses such as DP-SGD and prediction-interface restrictions.
//!
//! Core numeric code (`nn`, `dataset`, `metrics`) is generic over the
//! scalar type through [`scalar::Scalar`]; the pipeline layers work with
//! the `f64` aliases exported at the crate root.




pub mod artifacts;
pub mod attacks;
pub mod config;
pub mod dataset;
pub mod defenses;
pub mod experiment;
pub mod fairness;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;

mod error;

pub use error::{Error, Result};

/// Scalar type used by the experiment pipeline. All acceptance margins
/// are calibrated for 64-bit floats.
pub type Real = f64;

pub type LabeledDataset = dataset::LabeledDataset<Real>;
pub type MlpModel = nn::MlpModel<Real>;
pub type ForwardRecord = nn::ForwardRecord<Real>;
pub type Gradients = nn::Gradients<Real>;
pub type RocCurve = metrics::RocCurve<Real>;
