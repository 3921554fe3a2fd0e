//! Estimation of the average treatment effect with a binary instrument and a
//! binary treatment: bounded, inverse-weighted, g- and multiply robust
//! estimators, with diagnostics, bootstrap inference and a simulation harness.

mod error;
mod linalg;

pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod inference;
pub mod mestimate;
pub mod nuisance;
pub mod param;
pub mod simulate;

pub use data::{ColumnMap, Dataset, Design, LoadOptions, ObservedSample, OutcomeKind};
pub use error::{Error, ErrorKind, Result};
pub use estimators::{EstimateReport, Estimator, EstimatorConfig, Fitter};
pub use param::{CellProbs, Link, WaldParams};
