//! JSON documents and plain-text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use poolcal_core::calibration::{LinearCalibrationModel, StudyCalibration};
use poolcal_core::data::level_labels;
use poolcal_core::inference::Coefficient;
use poolcal_core::simulation::SimulationReport;
use poolcal_core::{CalibrationModel, CategoryScheme, FitMethod, FitResult};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One study's multinomial calibration: `a_2..a_P`, `b_2..b_P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBlock {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub n: usize,
    #[serde(default)]
    pub control_only: bool,
}

/// Calibration document keyed by study id.
pub type CalibrationFile = BTreeMap<String, StudyBlock>;

pub fn calibration_to_file(model: &CalibrationModel) -> CalibrationFile {
    model
        .studies()
        .iter()
        .map(|s| {
            (
                s.study_id.clone(),
                StudyBlock {
                    a: s.intercepts.clone(),
                    b: s.slopes.clone(),
                    n: s.n_calibration,
                    control_only: s.control_only,
                },
            )
        })
        .collect()
}

pub fn calibration_from_file(file: &CalibrationFile) -> Result<CalibrationModel, CliError> {
    let studies = file
        .iter()
        .map(|(id, block)| StudyCalibration {
            study_id: id.clone(),
            intercepts: block.a.clone(),
            slopes: block.b.clone(),
            n_calibration: block.n,
            control_only: block.control_only,
            iterations: 0,
            gradient_norm: f64::NAN,
        })
        .collect();
    Ok(CalibrationModel::new(studies)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineBlock {
    pub intercept: f64,
    pub slope: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
}

/// Serialized form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub method: FitMethod,
    pub levels: Vec<String>,
    pub coefficients: Vec<Coefficient>,
    /// Row-major covariance of the coefficients, in table order.
    pub covariance: Vec<Vec<f64>>,
    pub convergence: Convergence,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_calibration: Option<BTreeMap<String, LineBlock>>,
    pub warnings: Vec<String>,
}

fn lines_to_file(model: &LinearCalibrationModel) -> BTreeMap<String, LineBlock> {
    model
        .studies
        .iter()
        .map(|(id, l)| {
            (
                id.clone(),
                LineBlock {
                    intercept: l.intercept,
                    slope: l.slope,
                    n: l.n_calibration,
                },
            )
        })
        .collect()
}

impl FitReport {
    pub fn new(fit: &FitResult, scheme: &CategoryScheme) -> Self {
        let d = fit.covariance.nrows();
        Self {
            method: fit.method,
            levels: level_labels(scheme),
            coefficients: fit.coefficients(),
            covariance: (0..d)
                .map(|i| (0..d).map(|j| fit.covariance[(i, j)]).collect())
                .collect(),
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                gradient_norm: fit.gradient_norm,
                log_likelihood: fit.log_likelihood,
            },
            calibration: fit.calibration.as_ref().map(calibration_to_file),
            linear_calibration: fit.linear_calibration.as_ref().map(lines_to_file),
            warnings: fit.warnings.clone(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Format(format!("serializing JSON: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn fixed(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "NA".into()
    }
}

/// Relative risks by exposure level, then covariate estimates.
pub fn rr_table(fit: &FitResult, scheme: &CategoryScheme) -> String {
    let labels = level_labels(scheme);
    let coefs = fit.coefficients();
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(8) + 2;
    let mut out = String::new();
    let _ = writeln!(out, "Method: {}", fit.method.title());
    let _ = writeln!(out, "{:<width$}{:<16}95% CI", "Category", "RR");
    let _ = writeln!(out, "{:<width$}1 (reference)", labels[0]);
    for (label, c) in labels[1..].iter().zip(&coefs) {
        let ci = format!(
            "({}, {})",
            fixed(c.rr_ci_lo.unwrap_or(f64::NAN), 2),
            fixed(c.rr_ci_hi.unwrap_or(f64::NAN), 2)
        );
        let _ = writeln!(
            out,
            "{:<width$}{:<16}{}",
            label,
            fixed(c.rr.unwrap_or(f64::NAN), 2),
            ci
        );
    }
    let covariates: Vec<&Coefficient> = coefs[labels.len() - 1..].iter().collect();
    if !covariates.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<width$}{:<12}{:<12}95% CI", "Covariate", "Estimate", "SE");
        for c in covariates {
            let ci = format!("({}, {})", fixed(c.ci_lo, 3), fixed(c.ci_hi, 3));
            let _ = writeln!(
                out,
                "{:<width$}{:<12}{:<12}{}",
                c.name,
                fixed(c.estimate, 3),
                fixed(c.se, 3),
                ci
            );
        }
    }
    if !fit.converged {
        let _ = writeln!(out, "\nWARNING: the fit did not converge");
    }
    for w in &fit.warnings {
        let _ = writeln!(out, "note: {w}");
    }
    out
}

fn with_mcse(value: Option<f64>, mcse: Option<f64>, digits: usize) -> String {
    match (value, mcse) {
        (Some(v), Some(m)) => format!("{} ({})", fixed(v, digits), fixed(m, digits)),
        (Some(v), None) => fixed(v, digits),
        _ => "NA".into(),
    }
}

/// Simulation summary laid out like the published tables: one row per
/// method and coefficient, Monte Carlo standard errors in parentheses.
pub fn report_table(report: &SimulationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {} ({}), calibration size {}, {} replicates, seed {}",
        report.scenario, report.design, report.calibration_size, report.replicates, report.seed
    );
    let header = [
        "Calib. size",
        "beta_x",
        "Method",
        "Percent bias (MCSE)",
        "CR (MCSE)",
        "SE (ESE)",
        "Used/failed",
    ];
    let mut rows: Vec<[String; 7]> = Vec::new();
    for (c, truth) in report.truth.iter().enumerate() {
        for &method in &report.methods {
            let Some(s) = report.summary(method, c + 2) else {
                continue;
            };
            rows.push([
                report.calibration_size.to_string(),
                format!("{truth:.4}"),
                method.title().to_string(),
                with_mcse(s.percent_bias, s.percent_bias_mcse, 1),
                with_mcse(Some(s.coverage), Some(s.coverage_mcse), 3),
                format!(
                    "{} ({})",
                    fixed(s.mean_se, 3),
                    s.ese.map_or("NA".into(), |e| fixed(e, 3))
                ),
                format!("{}/{}", s.replicates_used, s.failures),
            ]);
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
                + 2
        })
        .collect();
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<String>()
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() - 2));
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{}", line(&cells));
    }
    for w in &report.warnings {
        let _ = writeln!(out, "note: {w}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_document_round_trips() {
        let file: CalibrationFile = serde_json::from_str(
            r#"{"B": {"a": [-1.5, -3.25], "b": [0.1, 0.2], "n": 29},
                "A": {"a": [0.3, 0.7], "b": [-0.01, 0.05], "n": 30, "control_only": true}}"#,
        )
        .unwrap();
        let model = calibration_from_file(&file).unwrap();
        assert_eq!(model.category_count(), 3);
        assert!(model.study("A").unwrap().control_only);
        assert_eq!(calibration_to_file(&model), file);
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let file: CalibrationFile =
            serde_json::from_str(r#"{"A": {"a": [0.3], "b": [0.1, 0.2], "n": 3}}"#).unwrap();
        assert_eq!(calibration_from_file(&file).unwrap_err().exit_code(), 2);
    }
}
