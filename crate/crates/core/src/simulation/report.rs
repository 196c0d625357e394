//! Replicate bookkeeping and the percent-bias / coverage summaries.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::inference::{FitMethod, FitResult, Z_95};
use crate::numeric::compensated_sum;

use super::ScenarioConfig;

/// What one method produced on one replicate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodOutcome {
    pub method: FitMethod,
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Why the replicate is excluded for this method, if it is.
    pub failure: Option<String>,
}

impl MethodOutcome {
    pub fn from_fit(method: FitMethod, fit: Result<FitResult>) -> Self {
        match fit {
            Err(e) => Self {
                method,
                estimates: Vec::new(),
                standard_errors: Vec::new(),
                failure: Some(format!("{e}")),
            },
            Ok(fit) => {
                let estimates = fit.beta.x.clone();
                let standard_errors: Vec<f64> = fit.standard_errors()[..estimates.len()].to_vec();
                let failure = if !fit.converged {
                    Some(
                        fit.warnings
                            .first()
                            .cloned()
                            .unwrap_or_else(|| String::from("did not converge")),
                    )
                } else if standard_errors.iter().any(|s| !s.is_finite()) {
                    Some(String::from("non-finite standard error"))
                } else {
                    None
                };
                Self {
                    method,
                    estimates,
                    standard_errors,
                    failure,
                }
            }
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub fits: Vec<MethodOutcome>,
}

/// Summary of one method's estimates of one coefficient.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoefficientSummary {
    pub method: FitMethod,
    /// 1-based exposure level the coefficient belongs to (2..P).
    pub level: usize,
    pub truth: f64,
    pub replicates_used: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_estimate_mcse: Option<f64>,
    /// `100 (mean - truth) / truth`; undefined when the truth is zero.
    pub percent_bias: Option<f64>,
    pub percent_bias_mcse: Option<f64>,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_se: f64,
    pub mean_se_mcse: Option<f64>,
    /// Sample standard deviation of the estimates; undefined below 2 replicates.
    pub ese: Option<f64>,
    pub ese_mcse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimulationReport {
    pub scenario: String,
    pub design: String,
    pub calibration_size: usize,
    pub replicates: usize,
    pub seed: u64,
    pub truth: Vec<f64>,
    pub methods: Vec<FitMethod>,
    pub summaries: Vec<CoefficientSummary>,
    pub warnings: Vec<String>,
}

impl SimulationReport {
    pub fn summary(&self, method: FitMethod, level: usize) -> Option<&CoefficientSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.level == level)
    }
}

/// Monte Carlo standard error of a mean: sample sd over `sqrt(n)`.
pub fn mc_standard_error(estimates: &[f64]) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::Input(format!(
            "Monte Carlo standard error needs at least 2 values, got {}",
            estimates.len()
        )));
    }
    Ok(sample_sd(estimates) / libm::sqrt(estimates.len() as f64))
}

fn mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss = compensated_sum(xs.iter().map(|x| (x - m) * (x - m)));
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

/// Folds replicate outcomes, in replicate order, into the report.
pub fn aggregate(
    config: &ScenarioConfig,
    methods: &[FitMethod],
    outcomes: &[ReplicateOutcome],
) -> Result<SimulationReport> {
    let mut ordered: Vec<&ReplicateOutcome> = outcomes.iter().collect();
    ordered.sort_by_key(|o| o.replicate);
    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    let mut any_success = false;

    for &method in methods {
        let per_method: Vec<&MethodOutcome> = ordered
            .iter()
            .filter_map(|o| o.fits.iter().find(|f| f.method == method))
            .collect();
        let ok: Vec<&MethodOutcome> = per_method.iter().copied().filter(|m| m.succeeded()).collect();
        let failures = per_method.len() - ok.len();
        if failures > 0 {
            warnings.push(format!(
                "{}: {failures} of {} replicates failed and were excluded",
                method.label(),
                per_method.len()
            ));
        }
        if ok.is_empty() {
            warnings.push(format!("{}: every replicate failed", method.label()));
            continue;
        }
        any_success = true;
        if ok.len() < 2 {
            warnings.push(format!(
                "{}: fewer than 2 usable replicates, empirical SE undefined",
                method.label()
            ));
        }
        for (c, &truth) in config.beta_x.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|m| m.estimates[c]).collect();
            let ses: Vec<f64> = ok.iter().map(|m| m.standard_errors[c]).collect();
            let n = est.len() as f64;
            let hits = est
                .iter()
                .zip(&ses)
                .filter(|(e, s)| libm::fabs(*e - truth) <= Z_95 * *s)
                .count();
            let coverage = hits as f64 / n;
            let mean_estimate = mean(&est);
            let mean_estimate_mcse = mc_standard_error(&est).ok();
            let percent_bias = (truth != 0.0).then(|| 100.0 * (mean_estimate - truth) / truth);
            let percent_bias_mcse = match (truth != 0.0, mean_estimate_mcse) {
                (true, Some(m)) => Some(100.0 * m / libm::fabs(truth)),
                _ => None,
            };
            let ese = (est.len() >= 2).then(|| sample_sd(&est));
            summaries.push(CoefficientSummary {
                method,
                level: c + 2,
                truth,
                replicates_used: est.len(),
                failures,
                mean_estimate,
                mean_estimate_mcse,
                percent_bias,
                percent_bias_mcse,
                coverage,
                coverage_mcse: libm::sqrt(coverage * (1.0 - coverage) / n),
                mean_se: mean(&ses),
                mean_se_mcse: mc_standard_error(&ses).ok(),
                ese,
                ese_mcse: ese.map(|e| e / libm::sqrt(2.0 * (n - 1.0))),
            });
        }
    }
    if !any_success {
        return Err(Error::Simulation("every method failed on every replicate".into()));
    }
    Ok(SimulationReport {
        scenario: config.name.clone(),
        design: config.design.label().into(),
        calibration_size: config.calibration_size,
        replicates: outcomes.len(),
        seed: config.seed,
        truth: config.beta_x.clone(),
        methods: methods.to_vec(),
        summaries,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn mcse_examples() {
        assert_eq!(mc_standard_error(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((mc_standard_error(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(mc_standard_error(&[1.0]).is_err());
    }

    fn outcome(r: usize, est: f64, se: f64, failure: Option<&str>) -> ReplicateOutcome {
        ReplicateOutcome {
            replicate: r,
            fits: vec![MethodOutcome {
                method: FitMethod::Full,
                estimates: vec![est, 2.0 * est],
                standard_errors: vec![se, se],
                failure: failure.map(String::from),
            }],
        }
    }

    #[test]
    fn aggregation_counts_failures_and_is_order_free() {
        let mut config = super::super::table1_scenario();
        config.beta_x = vec![-1.0, -2.0];
        let outs = vec![
            outcome(0, -1.1, 0.1, None),
            outcome(1, -0.9, 0.1, None),
            outcome(2, 5.0, 0.1, Some("diverged")),
            outcome(3, -1.0, 0.01, None),
        ];
        let report = aggregate(&config, &[FitMethod::Full], &outs).unwrap();
        let s = report.summary(FitMethod::Full, 2).unwrap();
        assert_eq!(s.failures, 1);
        assert_eq!(s.replicates_used, 3);
        assert!((s.mean_estimate + 1.0).abs() < 1e-12);
        assert!((s.coverage - 1.0).abs() < 1e-12);
        assert!(s.percent_bias.unwrap().abs() < 1e-9);

        let mut reversed = outs.clone();
        reversed.reverse();
        assert_eq!(aggregate(&config, &[FitMethod::Full], &reversed).unwrap(), report);
    }

    #[test]
    fn single_replicate_has_no_ese() {
        let config = super::super::table1_scenario();
        let report = aggregate(&config, &[FitMethod::Full], &[outcome(0, -0.2, 0.1, None)]).unwrap();
        assert!(report.summaries.iter().all(|s| s.ese.is_none()));
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn all_failures_is_an_error() {
        let config = super::super::table1_scenario();
        assert!(aggregate(&config, &[FitMethod::Full], &[outcome(0, 0.0, 0.1, Some("x"))]).is_err());
    }
}
