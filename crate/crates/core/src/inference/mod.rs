//! Estimation of the biomarker-disease association.
//!
//! The calibrated estimators are two-step: calibration models are fitted
//! per study, then the pooled pseudo-likelihood is maximized in beta with
//! the calibration held fixed. Their covariance comes from the stacked
//! sandwich. The comparators (known exposure, naive, linear calibration)
//! are ordinary conditional logistic fits with model-based covariance.

mod optimize;
mod sandwich;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::calibration::{
    fit_all_calibrations, fit_all_linear_calibrations, CalibrationModel, LinearCalibrationModel,
};
use crate::data::{CategoryScheme, PooledDataset};
use crate::error::{Error, Result};
use crate::likelihood::{
    build_prob_tables, pooled_logpseudolik, pooled_score, stratum_evaluate, Beta, CalibrationMethod,
    Derivatives, StratumProbTable,
};
use crate::numeric::{inf_norm, symmetrize};

pub use optimize::{bfgs_maximize, newton_maximize, Optimum};
pub use sandwich::{sandwich_covariance, stacked_sandwich, StackedSandwich, STATIONARITY_TOLERANCE};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

/// |beta_x| above which control-only calibration is flagged.
pub const CONTROL_ONLY_WARNING: f64 = core::f64::consts::LN_2;

/// Magnitude beyond which a conditional logistic estimate is treated as
/// diverging.
const DIVERGENCE_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FitMethod {
    #[cfg_attr(feature = "serde", serde(rename = "full"))]
    Full,
    #[cfg_attr(feature = "serde", serde(rename = "internalized"))]
    Internalized,
    #[cfg_attr(feature = "serde", serde(rename = "naive"))]
    Naive,
    #[cfg_attr(feature = "serde", serde(rename = "linear"))]
    LinearCalibration,
    #[cfg_attr(feature = "serde", serde(rename = "clr-known-x"))]
    ClrKnownX,
}

impl FitMethod {
    pub const ALL: [FitMethod; 5] = [
        FitMethod::Full,
        FitMethod::Internalized,
        FitMethod::Naive,
        FitMethod::LinearCalibration,
        FitMethod::ClrKnownX,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FitMethod::Full => "full",
            FitMethod::Internalized => "internalized",
            FitMethod::Naive => "naive",
            FitMethod::LinearCalibration => "linear",
            FitMethod::ClrKnownX => "clr-known-x",
        }
    }

    /// Display name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            FitMethod::Full => "Full Calibration",
            FitMethod::Internalized => "Internalized",
            FitMethod::Naive => "Naive",
            FitMethod::LinearCalibration => "Linear Calibration",
            FitMethod::ClrKnownX => "Known X (CLR)",
        }
    }

    pub fn calibration_method(self) -> Option<CalibrationMethod> {
        match self {
            FitMethod::Full => Some(CalibrationMethod::Full),
            FitMethod::Internalized => Some(CalibrationMethod::Internalized),
            _ => None,
        }
    }
}

impl core::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(FitMethod::Full),
            "internalized" | "internal" => Ok(FitMethod::Internalized),
            "naive" => Ok(FitMethod::Naive),
            "linear" | "linear-calibration" => Ok(FitMethod::LinearCalibration),
            "clr" | "clr-known-x" | "known-x" => Ok(FitMethod::ClrKnownX),
            other => Err(Error::Input(format!("unknown method {other:?}"))),
        }
    }
}

impl core::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

/// One row of the coefficient table.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    /// `exp(estimate)`; only for exposure levels.
    pub rr: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub rr_ci_lo: Option<f64>,
    pub rr_ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: FitMethod,
    pub beta: Beta,
    /// Covariance of `[beta_x.., beta_z..]`.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    pub calibration: Option<CalibrationModel>,
    pub linear_calibration: Option<LinearCalibrationModel>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.covariance.nrows())
            .map(|i| libm::sqrt(self.covariance[(i, i)]))
            .collect()
    }

    /// Wald intervals `estimate +/- 1.959964 SE`.
    pub fn wald_ci_95(&self) -> Vec<(f64, f64)> {
        self.beta
            .to_flat()
            .iter()
            .zip(self.standard_errors())
            .map(|(b, se)| (b - Z_95 * se, b + Z_95 * se))
            .collect()
    }

    pub fn relative_risks(&self) -> Vec<f64> {
        self.beta.x.iter().map(|b| libm::exp(*b)).collect()
    }

    pub fn coefficients(&self) -> Vec<Coefficient> {
        let m = self.beta.x.len();
        let ses = self.standard_errors();
        self.beta
            .to_flat()
            .iter()
            .zip(ses)
            .zip(self.wald_ci_95())
            .enumerate()
            .map(|(i, ((est, se), (lo, hi)))| {
                let exposure = i < m;
                Coefficient {
                    name: if exposure {
                        format!("x_cat{}", i + 2)
                    } else {
                        format!("z{}", i - m + 1)
                    },
                    estimate: *est,
                    se,
                    rr: exposure.then(|| libm::exp(*est)),
                    ci_lo: lo,
                    ci_hi: hi,
                    rr_ci_lo: exposure.then(|| libm::exp(lo)),
                    rr_ci_hi: exposure.then(|| libm::exp(hi)),
                }
            })
            .collect()
    }
}

/// Two-step calibrated fit: calibration per study, then pseudo-MLE.
pub fn fit_pooled(dataset: &PooledDataset, method: CalibrationMethod) -> Result<FitResult> {
    fit_pooled_with(dataset, method, &FitOptions::default())
}

pub fn fit_pooled_with(
    dataset: &PooledDataset,
    method: CalibrationMethod,
    options: &FitOptions,
) -> Result<FitResult> {
    let calibration = fit_all_calibrations(dataset)?;
    fit_with_calibration(dataset, calibration, method, options)
}

/// Second step only, with a previously fitted calibration.
pub fn fit_with_calibration(
    dataset: &PooledDataset,
    calibration: CalibrationModel,
    method: CalibrationMethod,
    options: &FitOptions,
) -> Result<FitResult> {
    let tables = build_prob_tables(dataset, &calibration, method)?;
    let p = dataset.category_count();
    let start = Beta::zeros(p, dataset.covariate_count());
    let initial = pooled_logpseudolik(&start, dataset, &tables)
        .map_err(|e| Error::NonFinite(format!("objective at the starting point: {e}")))?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }

    let optimum = bfgs_maximize(
        &start.to_flat(),
        |flat| {
            let b = Beta::from_flat(flat, p);
            Ok((
                pooled_logpseudolik(&b, dataset, &tables)?,
                pooled_score(&b, dataset, &tables)?,
            ))
        },
        |flat| {
            pooled_hessian(&Beta::from_flat(flat, p), dataset, &tables)
                .ok()
                .map(|h| -h)
        },
        options.gradient_tolerance,
        options.max_iterations,
    )?;
    let beta = Beta::from_flat(&optimum.x, p);

    let mut warnings = Vec::new();
    if !optimum.converged {
        warnings.push(format!(
            "pseudo-likelihood maximization stopped after {} iterations with gradient norm {:.3e}",
            optimum.iterations,
            inf_norm(&optimum.gradient)
        ));
    }
    if calibration.control_only() && beta.x.iter().any(|b| libm::fabs(*b) > CONTROL_ONLY_WARNING) {
        warnings.push(
            "control-only calibration assumes small exposure effects, but |beta_x| exceeds log(2)"
                .to_string(),
        );
    }
    let covariance = match stacked_sandwich(&beta, &calibration, dataset, method, false) {
        Ok(s) => s.beta_block(),
        Err(e) => {
            warnings.push(format!("sandwich covariance unavailable: {e}"));
            nan_matrix(beta.dim())
        }
    };
    Ok(FitResult {
        method: match method {
            CalibrationMethod::Full => FitMethod::Full,
            CalibrationMethod::Internalized => FitMethod::Internalized,
        },
        beta,
        covariance,
        converged: optimum.converged,
        iterations: optimum.iterations,
        gradient_norm: inf_norm(&optimum.gradient),
        log_likelihood: optimum.value,
        calibration: Some(calibration),
        linear_calibration: None,
        warnings,
    })
}

/// Analytic Hessian of the pooled log pseudo-likelihood in beta.
pub fn pooled_hessian(
    beta: &Beta,
    dataset: &PooledDataset,
    tables: &[StratumProbTable],
) -> Result<DMatrix<f64>> {
    let d = beta.dim();
    let mut h = DMatrix::zeros(d, d);
    for ((_, stratum), table) in dataset.strata().zip(tables) {
        let covs: Vec<&[f64]> = stratum
            .participants
            .iter()
            .map(|p| p.covariates.as_slice())
            .collect();
        let eval = stratum_evaluate(beta, table.rows(), &covs, Derivatives::Hessian, None)?;
        h += eval.hessian.expect("requested");
    }
    Ok(h)
}

fn nan_matrix(d: usize) -> DMatrix<f64> {
    DMatrix::from_element(d, d, f64::NAN)
}

/// Conditional logistic regression with every participant's category
/// known (all participants must be calibration members).
pub fn clr_fit(dataset: &PooledDataset) -> Result<FitResult> {
    let mut categories = Vec::with_capacity(dataset.stratum_count());
    for (_, stratum) in dataset.strata() {
        let cats = stratum
            .participants
            .iter()
            .map(|p| {
                p.ref_category.ok_or_else(|| {
                    Error::Input(format!(
                        "stratum {}: clr_fit needs a known category for every participant",
                        stratum.id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        categories.push(cats);
    }
    clr_fit_categories(dataset, &categories, FitMethod::ClrKnownX, &FitOptions::default())
}

/// Naive pooling: categorize the local values with the reference cut points.
pub fn naive_fit(dataset: &PooledDataset, scheme: &CategoryScheme) -> Result<FitResult> {
    check_scheme(dataset, scheme)?;
    let categories = dataset
        .strata()
        .map(|(_, stratum)| {
            stratum
                .participants
                .iter()
                .map(|p| scheme.categorize(p.local_value))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    clr_fit_categories(dataset, &categories, FitMethod::Naive, &FitOptions::default())
}

/// Linear regression calibration: impute the continuous reference value
/// from the study's least-squares line, categorize it, fit CLR.
pub fn linear_calibration_fit(dataset: &PooledDataset, scheme: &CategoryScheme) -> Result<FitResult> {
    check_scheme(dataset, scheme)?;
    let model = fit_all_linear_calibrations(dataset)?;
    let mut categories = Vec::with_capacity(dataset.stratum_count());
    for (s, stratum) in dataset.strata() {
        let line = model
            .study(&dataset.studies()[s].id)
            .expect("fitted for every study");
        categories.push(
            stratum
                .participants
                .iter()
                .map(|p| scheme.categorize(line.intercept + line.slope * p.local_value))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut fit = clr_fit_categories(
        dataset,
        &categories,
        FitMethod::LinearCalibration,
        &FitOptions::default(),
    )?;
    fit.linear_calibration = Some(model);
    Ok(fit)
}

fn check_scheme(dataset: &PooledDataset, scheme: &CategoryScheme) -> Result<()> {
    if !scheme.is_cut_point_mode() {
        return Err(Error::Input("this method needs cut points".into()));
    }
    if scheme.category_count() != dataset.category_count() {
        return Err(Error::Input(format!(
            "scheme has {} categories, dataset has {}",
            scheme.category_count(),
            dataset.category_count()
        )));
    }
    Ok(())
}

/// Newton-fitted conditional logistic regression on explicit categories,
/// one vector per stratum in dataset order.
///
/// Levels that nobody occupies cannot be estimated: their coefficient is
/// held at zero, reported with undefined variance, and the fit is marked
/// not converged.
pub fn clr_fit_categories(
    dataset: &PooledDataset,
    categories: &[Vec<usize>],
    method: FitMethod,
    options: &FitOptions,
) -> Result<FitResult> {
    let p = dataset.category_count();
    let k = dataset.covariate_count();
    let d = p - 1 + k;
    if categories.len() != dataset.stratum_count() {
        return Err(Error::Input("one category vector per stratum is required".into()));
    }
    let tables = dataset
        .strata()
        .zip(categories)
        .map(|((_, stratum), cats)| {
            if cats.len() != stratum.len() {
                return Err(Error::Input(format!(
                    "stratum {}: {} categories for {} participants",
                    stratum.id,
                    cats.len(),
                    stratum.len()
                )));
            }
            StratumProbTable::one_hot(cats, p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut occupied = vec![false; p];
    for c in categories.iter().flatten() {
        occupied[c - 1] = true;
    }
    let mut warnings = Vec::new();
    // Free parameters: occupied exposure levels and every covariate.
    let free: Vec<usize> = (0..d).filter(|&i| i >= p - 1 || occupied[i + 1]).collect();
    for level in 2..=p {
        if !occupied[level - 1] {
            warnings.push(format!(
                "exposure level {level} is empty across all strata; its coefficient is not estimable"
            ));
        }
    }
    let expand = |sub: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; d];
        for (v, &i) in sub.iter().zip(&free) {
            full[i] = *v;
        }
        full
    };

    let optimum = newton_maximize(
        &vec![0.0; free.len()],
        |sub| {
            let beta = Beta::from_flat(&expand(sub), p);
            let h = pooled_hessian(&beta, dataset, &tables)?;
            let g = pooled_score(&beta, dataset, &tables)?;
            let value = pooled_logpseudolik(&beta, dataset, &tables)?;
            let hs = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let gs = free.iter().map(|&i| g[i]).collect();
            Ok((value, gs, hs))
        },
        options.gradient_tolerance,
        options.max_iterations,
    )?;

    let beta = Beta::from_flat(&expand(&optimum.x), p);
    let mut converged = optimum.converged && free.len() == d;
    if beta.to_flat().iter().any(|b| libm::fabs(*b) > DIVERGENCE_BOUND) {
        converged = false;
        warnings.push("coefficient diverging; the data are likely separated".to_string());
    }
    if !optimum.converged {
        warnings.push(format!(
            "Newton iteration stopped after {} iterations with gradient norm {:.3e}",
            optimum.iterations,
            inf_norm(&optimum.gradient)
        ));
    }

    let h = pooled_hessian(&beta, dataset, &tables)?;
    let hs = DMatrix::from_fn(free.len(), free.len(), |a, b| -h[(free[a], free[b])]);
    let mut covariance = nan_matrix(d);
    match hs.try_inverse() {
        Some(inv) => {
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    covariance[(i, j)] = inv[(a, b)];
                }
            }
            symmetrize(&mut covariance);
        }
        None => {
            converged = false;
            warnings.push("observed information is singular".to_string());
        }
    }
    Ok(FitResult {
        method,
        beta,
        covariance,
        converged,
        iterations: optimum.iterations,
        gradient_norm: inf_norm(&optimum.gradient),
        log_likelihood: optimum.value,
        calibration: None,
        linear_calibration: None,
        warnings,
    })
}

/// Dispatches on a method label.
pub fn fit_method(dataset: &PooledDataset, scheme: &CategoryScheme, method: FitMethod) -> Result<FitResult> {
    match method {
        FitMethod::Full => fit_pooled(dataset, CalibrationMethod::Full),
        FitMethod::Internalized => fit_pooled(dataset, CalibrationMethod::Internalized),
        FitMethod::Naive => naive_fit(dataset, scheme),
        FitMethod::LinearCalibration => linear_calibration_fit(dataset, scheme),
        FitMethod::ClrKnownX => clr_fit(dataset),
    }
}
