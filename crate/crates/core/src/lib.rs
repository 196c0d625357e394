//! Pooled analysis of categorized biomarkers from matched and nested
//! case-control studies whose local laboratories disagree.
//!
//! Each study's local measurements are calibrated to reference-laboratory
//! categories with a multinomial logit fitted on a calibration subset.
//! The association with disease is then estimated from a conditional
//! logistic pseudo-likelihood that averages over the uncertain categories,
//! with a sandwich covariance that carries the calibration uncertainty.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod calibration;
pub mod data;
pub mod error;
pub mod inference;
pub mod likelihood;
pub mod numeric;
pub mod simulation;

pub use calibration::{
    fit_calibration, fit_linear_calibration, predict_category_probs, CalibrationModel,
    LinearCalibrationModel, StudyCalibration,
};
pub use data::{categorize, indicator_vector, CategoryScheme, Participant, PooledDataset, Stratum, Study};
pub use error::{Error, Result};
pub use inference::{
    clr_fit, fit_pooled, linear_calibration_fit, naive_fit, sandwich_covariance, FitMethod, FitResult,
};
pub use likelihood::{
    build_prob_tables, clr_stratum_loglik, pooled_logpseudolik, pooled_score, pseudo_stratum_loglik, Beta,
    CalibrationMethod, StratumProbTable,
};
pub use simulation::{run_simulation, simulate_dataset, ScenarioConfig, SimulationReport};
