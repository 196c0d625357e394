//! Study-specific calibration of local-laboratory measurements.
//!
//! The categorical model is a baseline-category multinomial logit in the
//! local value `w`: `log P(level p | w) / P(level 1 | w) = a_p + b_p w`
//! for `p = 2..P`. It never conditions on covariates.
//!
//! Per-study parameters are laid out as `[a_2, .., a_P, b_2, .., b_P]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, inf_norm, log_sum_exp};

/// Newton stops once the score's largest component is at most this.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
/// Coefficient magnitude (on standardized `w`) treated as separation.
pub const SEPARATION_BOUND: f64 = 50.0;
/// Largest standardized Newton step still counted as converged.
const NEWTON_STEP_TOLERANCE: f64 = 1e-6;

/// One calibration observation: local value and reference category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub w: f64,
    pub category: usize,
}

/// Fitted multinomial calibration for a single study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCalibration {
    pub study_id: String,
    /// `a_2..a_P`
    pub intercepts: Vec<f64>,
    /// `b_2..b_P`
    pub slopes: Vec<f64>,
    pub n_calibration: usize,
    /// Every calibration member was a control.
    pub control_only: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl StudyCalibration {
    pub fn category_count(&self) -> usize {
        self.intercepts.len() + 1
    }

    /// Parameters in the `[a.., b..]` layout.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.intercepts.clone();
        out.extend_from_slice(&self.slopes);
        out
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        let m = self.intercepts.len();
        Self {
            intercepts: params[..m].to_vec(),
            slopes: params[m..2 * m].to_vec(),
            ..self.clone()
        }
    }

    pub fn probs(&self, w: f64) -> Vec<f64> {
        category_probs(&self.intercepts, &self.slopes, w)
    }
}

/// Calibration models for every study of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    studies: Vec<StudyCalibration>,
}

impl CalibrationModel {
    pub fn new(studies: Vec<StudyCalibration>) -> Result<Self> {
        let Some(first) = studies.first() else {
            return Err(Error::Input("calibration model has no studies".into()));
        };
        let p = first.category_count();
        for s in &studies {
            if s.intercepts.len() != s.slopes.len() || s.category_count() != p {
                return Err(Error::Input(format!(
                    "study {}: expected {} intercept/slope pairs",
                    s.study_id,
                    p - 1
                )));
            }
            if s.intercepts.iter().chain(&s.slopes).any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "study {}: non-finite calibration coefficient",
                    s.study_id
                )));
            }
        }
        Ok(Self { studies })
    }

    pub fn studies(&self) -> &[StudyCalibration] {
        &self.studies
    }

    pub fn category_count(&self) -> usize {
        self.studies[0].category_count()
    }

    pub fn study(&self, id: &str) -> Option<&StudyCalibration> {
        self.studies.iter().find(|s| s.study_id == id)
    }

    pub fn control_only(&self) -> bool {
        self.studies.iter().all(|s| s.control_only)
    }

    /// Checks that every study of `dataset` has a compatible block.
    pub fn check_covers(&self, dataset: &PooledDataset) -> Result<()> {
        if self.category_count() != dataset.category_count() {
            return Err(Error::Input(format!(
                "calibration has {} categories, dataset has {}",
                self.category_count(),
                dataset.category_count()
            )));
        }
        for study in dataset.studies() {
            if self.study(&study.id).is_none() {
                return Err(Error::Input(format!(
                    "calibration model has no block for study {}",
                    study.id
                )));
            }
        }
        Ok(())
    }
}

/// Estimated category probabilities for a local value `w` in `study`.
pub fn predict_category_probs(model: &CalibrationModel, study: &str, w: f64) -> Result<Vec<f64>> {
    let block = model
        .study(study)
        .ok_or_else(|| Error::Input(format!("calibration model has no study {study}")))?;
    if !w.is_finite() {
        return Err(Error::Input(format!("local value {w} is not finite")));
    }
    Ok(block.probs(w))
}

/// Baseline-category logit probabilities, normalized via log-sum-exp.
pub fn category_probs(intercepts: &[f64], slopes: &[f64], w: f64) -> Vec<f64> {
    let mut eta = Vec::with_capacity(intercepts.len() + 1);
    eta.push(0.0);
    eta.extend(intercepts.iter().zip(slopes).map(|(a, b)| a + b * w));
    let lse = log_sum_exp(&eta);
    eta.iter().map(|e| libm::exp(e - lse)).collect()
}

/// Multinomial log-likelihood of the calibration points.
pub fn multinomial_loglik(intercepts: &[f64], slopes: &[f64], points: &[CalibrationPoint]) -> f64 {
    compensated_sum(points.iter().map(|pt| {
        let mut eta = Vec::with_capacity(intercepts.len() + 1);
        eta.push(0.0);
        eta.extend(intercepts.iter().zip(slopes).map(|(a, b)| a + b * pt.w));
        eta[pt.category - 1] - log_sum_exp(&eta)
    }))
}

/// Score contribution of one calibration point in the `[a.., b..]` layout.
pub fn point_score(intercepts: &[f64], slopes: &[f64], pt: &CalibrationPoint) -> Vec<f64> {
    let m = intercepts.len();
    let probs = category_probs(intercepts, slopes, pt.w);
    let mut out = vec![0.0; 2 * m];
    for q in 0..m {
        let resid = f64::from(u8::from(pt.category == q + 2)) - probs[q + 1];
        out[q] = resid;
        out[m + q] = pt.w * resid;
    }
    out
}

pub fn multinomial_score(intercepts: &[f64], slopes: &[f64], points: &[CalibrationPoint]) -> Vec<f64> {
    let m = intercepts.len();
    let mut total = vec![0.0; 2 * m];
    for pt in points {
        for (t, s) in total.iter_mut().zip(point_score(intercepts, slopes, pt)) {
            *t += s;
        }
    }
    total
}

/// Observed information (negative Hessian) of the multinomial log-likelihood.
pub fn multinomial_information(
    intercepts: &[f64],
    slopes: &[f64],
    points: &[CalibrationPoint],
) -> DMatrix<f64> {
    let m = intercepts.len();
    let mut info = DMatrix::zeros(2 * m, 2 * m);
    for pt in points {
        let probs = category_probs(intercepts, slopes, pt.w);
        let x = [1.0, pt.w];
        for q in 0..m {
            for r in 0..m {
                let v = if q == r {
                    probs[q + 1] * (1.0 - probs[q + 1])
                } else {
                    -probs[q + 1] * probs[r + 1]
                };
                for (u, xu) in x.iter().enumerate() {
                    for (t, xt) in x.iter().enumerate() {
                        info[(u * m + q, t * m + r)] += v * xu * xt;
                    }
                }
            }
        }
    }
    info
}

/// Maximum-likelihood multinomial calibration by damped Newton from zero.
///
/// The iteration runs on standardized `w` and is mapped back, so the
/// separation bound is scale-free.
pub fn fit_multinomial(
    study_id: &str,
    points: &[CalibrationPoint],
    category_count: usize,
) -> Result<StudyCalibration> {
    let p = category_count;
    if points.is_empty() {
        return Err(Error::EmptyCalibration {
            study: study_id.into(),
        });
    }
    let separation = |detail: String| Error::Separation {
        study: study_id.into(),
        detail,
    };
    let mut counts = vec![0usize; p];
    for pt in points {
        if pt.category == 0 || pt.category > p || !pt.w.is_finite() {
            return Err(Error::Input(format!(
                "study {study_id}: invalid calibration point {pt:?}"
            )));
        }
        counts[pt.category - 1] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(separation(format!("category {} is absent", missing + 1)));
    }
    if points.len() < p {
        return Err(separation(format!(
            "{} calibration rows for {p} categories",
            points.len()
        )));
    }

    let n = points.len() as f64;
    let center = compensated_sum(points.iter().map(|pt| pt.w)) / n;
    let spread = libm::sqrt(compensated_sum(points.iter().map(|pt| (pt.w - center) * (pt.w - center))) / n);
    if !(spread > 0.0) {
        return Err(separation("all local values are identical".into()));
    }
    let scaled: Vec<CalibrationPoint> = points
        .iter()
        .map(|pt| CalibrationPoint {
            w: (pt.w - center) / spread,
            category: pt.category,
        })
        .collect();

    let m = p - 1;
    let to_original = |theta: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let b: Vec<f64> = theta[m..].iter().map(|bs| bs / spread).collect();
        let a = theta[..m].iter().zip(&b).map(|(a, b)| a - b * center).collect();
        (a, b)
    };

    let mut theta = vec![0.0; 2 * m];
    let mut loglik = multinomial_loglik(&theta[..m], &theta[m..], &scaled);
    let mut iterations = 0;
    let gradient_norm;
    loop {
        let (a, b) = to_original(&theta);
        let current = inf_norm(&multinomial_score(&a, &b, points));
        let grad = DVector::from_vec(multinomial_score(&theta[..m], &theta[m..], &scaled));
        let info = multinomial_information(&theta[..m], &theta[m..], &scaled);
        let step = info
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| info.lu().solve(&grad))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| separation("singular information matrix".into()))?;
        // Separated data drive the score to zero while Newton steps stay
        // large, so both must be small.
        if current <= GRADIENT_TOLERANCE && step.amax() <= NEWTON_STEP_TOLERANCE {
            gradient_norm = current;
            break;
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            return Err(separation(format!(
                "no convergence in {MAX_NEWTON_ITERATIONS} Newton iterations (score norm {current:.2e})"
            )));
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, d)| t + scale * d)
                .collect();
            let value = multinomial_loglik(&trial[..m], &trial[m..], &scaled);
            if value.is_finite() && value >= loglik - 1e-12 * libm::fabs(loglik) {
                theta = trial;
                loglik = value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if inf_norm(&theta) > SEPARATION_BOUND {
            return Err(separation(format!(
                "standardized coefficient magnitude {:.1} exceeds {SEPARATION_BOUND}",
                inf_norm(&theta)
            )));
        }
        if !accepted {
            gradient_norm = current;
            break;
        }
    }
    let (intercepts, slopes) = to_original(&theta);
    Ok(StudyCalibration {
        study_id: study_id.into(),
        intercepts,
        slopes,
        n_calibration: points.len(),
        control_only: false,
        iterations,
        gradient_norm,
    })
}

/// Calibration points (local value, reference category) of one study.
pub fn calibration_points(dataset: &PooledDataset, study: &str) -> Result<(Vec<CalibrationPoint>, bool)> {
    let s = dataset
        .study(study)
        .ok_or_else(|| Error::Input(format!("dataset has no study {study}")))?;
    let mut control_only = true;
    let points = s
        .calibration_members()
        .map(|p| {
            control_only &= !p.outcome;
            CalibrationPoint {
                w: p.local_value,
                category: p.ref_category.unwrap_or(0),
            }
        })
        .collect();
    Ok((points, control_only))
}

/// Fits the calibration model for one study on its calibration members.
pub fn fit_calibration(dataset: &PooledDataset, study: &str) -> Result<StudyCalibration> {
    let (points, control_only) = calibration_points(dataset, study)?;
    let mut fit = fit_multinomial(study, &points, dataset.category_count())?;
    fit.control_only = control_only;
    Ok(fit)
}

/// Fits every study independently.
pub fn fit_all_calibrations(dataset: &PooledDataset) -> Result<CalibrationModel> {
    let studies = dataset
        .studies()
        .iter()
        .map(|s| fit_calibration(dataset, &s.id))
        .collect::<Result<Vec<_>>>()?;
    CalibrationModel::new(studies)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearStudyCalibration {
    pub intercept: f64,
    pub slope: f64,
    pub n_calibration: usize,
}

/// Per-study least-squares lines `E(X | W) = intercept + slope * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCalibrationModel {
    pub studies: Vec<(String, LinearStudyCalibration)>,
}

impl LinearCalibrationModel {
    pub fn study(&self, id: &str) -> Option<&LinearStudyCalibration> {
        self.studies.iter().find(|(s, _)| s == id).map(|(_, c)| c)
    }
}

/// Ordinary least squares of `x` on `w`.
pub fn least_squares_line(study_id: &str, pairs: &[(f64, f64)]) -> Result<LinearStudyCalibration> {
    let singular = |detail: String| Error::SingularDesign {
        study: study_id.into(),
        detail,
    };
    if pairs.len() < 2 {
        return Err(singular(format!("{} calibration rows", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mean_w = compensated_sum(pairs.iter().map(|p| p.0)) / n;
    let mean_x = compensated_sum(pairs.iter().map(|p| p.1)) / n;
    let sww = compensated_sum(pairs.iter().map(|p| (p.0 - mean_w) * (p.0 - mean_w)));
    let swx = compensated_sum(pairs.iter().map(|p| (p.0 - mean_w) * (p.1 - mean_x)));
    let scale = compensated_sum(pairs.iter().map(|p| p.0 * p.0));
    if !(sww > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(singular("all local values are identical".into()));
    }
    let slope = swx / sww;
    Ok(LinearStudyCalibration {
        intercept: mean_x - slope * mean_w,
        slope,
        n_calibration: pairs.len(),
    })
}

/// Linear-regression calibration for one study, on calibration members
/// with a continuous reference value.
pub fn fit_linear_calibration(dataset: &PooledDataset, study: &str) -> Result<LinearStudyCalibration> {
    let s = dataset
        .study(study)
        .ok_or_else(|| Error::Input(format!("dataset has no study {study}")))?;
    let mut pairs = Vec::new();
    for p in s.calibration_members() {
        let x = p.ref_value.ok_or_else(|| {
            Error::Input(format!(
                "study {study}: calibration member lacks a continuous reference value"
            ))
        })?;
        pairs.push((p.local_value, x));
    }
    least_squares_line(study, &pairs)
}

pub fn fit_all_linear_calibrations(dataset: &PooledDataset) -> Result<LinearCalibrationModel> {
    let studies = dataset
        .studies()
        .iter()
        .map(|s| Ok((s.id.clone(), fit_linear_calibration(dataset, &s.id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LinearCalibrationModel { studies })
}
