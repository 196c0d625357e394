//! Conditional logistic likelihood and the calibrated pseudo-likelihood.
//!
//! A stratum's pseudo-likelihood mixes the conditional logistic
//! probability of "participant 0 is the case" over every assignment of
//! exposure levels to the stratum members, weighted by the product of the
//! members' level probabilities. Assignments are enumerated exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::calibration::{CalibrationModel, StudyCalibration};
use crate::data::{PooledDataset, Stratum};
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, log_sum_exp, CompensatedSum};

/// Largest number of level assignments enumerated for one stratum.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Association parameters: log relative risks of levels `2..P` and
/// covariate coefficients.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Beta {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl Beta {
    pub fn zeros(category_count: usize, covariate_count: usize) -> Self {
        Self {
            x: vec![0.0; category_count - 1],
            z: vec![0.0; covariate_count],
        }
    }

    pub fn new(x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Input("beta_x must have at least one component".into()));
        }
        if x.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::Input("beta has non-finite components".into()));
        }
        Ok(Self { x, z })
    }

    /// Splits a flat `[beta_x.., beta_z..]` vector.
    pub fn from_flat(flat: &[f64], category_count: usize) -> Self {
        let (x, z) = flat.split_at(category_count - 1);
        Self {
            x: x.to_vec(),
            z: z.to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.x.clone();
        out.extend_from_slice(&self.z);
        out
    }

    pub fn category_count(&self) -> usize {
        self.x.len() + 1
    }

    pub fn dim(&self) -> usize {
        self.x.len() + self.z.len()
    }

    fn level_effect(&self, category: usize) -> f64 {
        if category <= 1 {
            0.0
        } else {
            self.x[category - 2]
        }
    }
}

/// Per-participant level probabilities for one stratum (case first).
#[derive(Debug, Clone, PartialEq)]
pub struct StratumProbTable {
    rows: Vec<Vec<f64>>,
}

impl StratumProbTable {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Input("probability table has no rows".into()));
        };
        let p = first.len();
        for (i, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != p
                || row.iter().any(|v| !(0.0..=1.0).contains(v))
                || (total - 1.0).abs() > SIMPLEX_TOLERANCE
            {
                return Err(Error::Input(format!(
                    "probability table row {i} is not a point of the {p}-simplex: {row:?}"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Degenerate table putting all mass on the given categories.
    pub fn one_hot(categories: &[usize], category_count: usize) -> Result<Self> {
        let rows = categories
            .iter()
            .map(|&c| {
                if c == 0 || c > category_count {
                    return Err(Error::Input(format!("category {c} outside 1..={category_count}")));
                }
                let mut row = vec![0.0; category_count];
                row[c - 1] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn category_count(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// How calibration-subset members enter the pseudo-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CalibrationMethod {
    /// Everybody uses model-based probabilities.
    Full,
    /// Members with an observed reference category use it directly.
    Internalized,
}

/// Log of the conditional logistic probability that participant 0 is the
/// case, given everybody's exposure level and covariates.
pub fn clr_stratum_loglik(beta: &Beta, categories: &[usize], covariates: &[Vec<f64>]) -> Result<f64> {
    check_stratum_shape(beta, categories.len(), covariates)?;
    let mut eta = Vec::with_capacity(categories.len());
    for (c, z) in categories.iter().zip(covariates) {
        if *c == 0 || *c > beta.category_count() {
            return Err(Error::Input(format!(
                "category {c} outside 1..={}",
                beta.category_count()
            )));
        }
        eta.push(beta.level_effect(*c) + dot(&beta.z, z));
    }
    Ok(eta[0] - log_sum_exp(&eta))
}

/// Log pseudo-likelihood of one stratum under a probability table.
pub fn pseudo_stratum_loglik(beta: &Beta, probs: &StratumProbTable, covariates: &[Vec<f64>]) -> Result<f64> {
    let covs: Vec<&[f64]> = covariates.iter().map(Vec::as_slice).collect();
    Ok(stratum_evaluate(beta, probs.rows(), &covs, Derivatives::None, None)?.loglik)
}

fn check_stratum_shape(beta: &Beta, n: usize, covariates: &[Vec<f64>]) -> Result<()> {
    if n < 2 || covariates.len() != n {
        return Err(Error::Input(format!(
            "stratum needs at least 2 members and one covariate row each (got {n} and {})",
            covariates.len()
        )));
    }
    if covariates.iter().any(|z| z.len() != beta.z.len()) {
        return Err(Error::Input("covariate length does not match beta_z".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds every stratum's probability table, in dataset stratum order.
pub fn build_prob_tables(
    dataset: &PooledDataset,
    calibration: &CalibrationModel,
    method: CalibrationMethod,
) -> Result<Vec<StratumProbTable>> {
    calibration.check_covers(dataset)?;
    dataset
        .strata()
        .map(|(s, stratum)| {
            let block = calibration
                .study(&dataset.studies()[s].id)
                .expect("coverage checked above");
            Ok(stratum_table(stratum, block, method))
        })
        .collect()
}

fn stratum_table(stratum: &Stratum, block: &StudyCalibration, method: CalibrationMethod) -> StratumProbTable {
    let p = block.category_count();
    let rows = stratum
        .participants
        .iter()
        .map(|person| match (method, person.ref_category) {
            (CalibrationMethod::Internalized, Some(c)) if person.in_calibration => {
                let mut row = vec![0.0; p];
                row[c - 1] = 1.0;
                row
            }
            _ => block.probs(person.local_value),
        })
        .collect();
    StratumProbTable { rows }
}

fn check_tables(dataset: &PooledDataset, tables: &[StratumProbTable]) -> Result<()> {
    if tables.len() != dataset.stratum_count() {
        return Err(Error::Input(format!(
            "{} probability tables for {} strata",
            tables.len(),
            dataset.stratum_count()
        )));
    }
    for ((_, stratum), table) in dataset.strata().zip(tables) {
        if table.len() != stratum.len() || table.category_count() != dataset.category_count() {
            return Err(Error::Input(format!(
                "probability table for stratum {} has the wrong shape",
                stratum.id
            )));
        }
    }
    Ok(())
}

fn stratum_covariates(stratum: &Stratum) -> Vec<&[f64]> {
    stratum
        .participants
        .iter()
        .map(|p| p.covariates.as_slice())
        .collect()
}

/// Sum of stratum log pseudo-likelihoods over the pooled data.
pub fn pooled_logpseudolik(beta: &Beta, dataset: &PooledDataset, tables: &[StratumProbTable]) -> Result<f64> {
    check_tables(dataset, tables)?;
    let mut acc = CompensatedSum::new();
    for ((_, stratum), table) in dataset.strata().zip(tables) {
        let covs = stratum_covariates(stratum);
        let eval = stratum_evaluate(beta, table.rows(), &covs, Derivatives::None, None)
            .map_err(|e| relabel(e, stratum))?;
        acc.add(eval.loglik);
    }
    let value = acc.value();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "pooled log pseudo-likelihood is {value}"
        )));
    }
    Ok(value)
}

/// Analytic gradient of [`pooled_logpseudolik`] in `[beta_x.., beta_z..]`.
pub fn pooled_score(beta: &Beta, dataset: &PooledDataset, tables: &[StratumProbTable]) -> Result<Vec<f64>> {
    check_tables(dataset, tables)?;
    let d = beta.dim();
    let mut acc = vec![CompensatedSum::new(); d];
    for ((_, stratum), table) in dataset.strata().zip(tables) {
        let covs = stratum_covariates(stratum);
        let eval = stratum_evaluate(beta, table.rows(), &covs, Derivatives::Score, None)
            .map_err(|e| relabel(e, stratum))?;
        for (a, g) in acc.iter_mut().zip(&eval.score) {
            a.add(*g);
        }
    }
    Ok(acc.iter().map(CompensatedSum::value).collect())
}

fn relabel(err: Error, stratum: &Stratum) -> Error {
    match err {
        Error::EnumerationLimit { terms, limit, .. } => Error::EnumerationLimit {
            stratum: stratum.id.clone(),
            terms,
            limit,
        },
        other => other,
    }
}

/// Value and derivatives of one stratum's log pseudo-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumEvaluation {
    pub loglik: f64,
    /// d/d beta
    pub score: Vec<f64>,
    /// d^2/d beta^2, when requested
    pub hessian: Option<DMatrix<f64>>,
    /// d/d calibration parameters of the stratum's study, when requested
    pub calibration_gradient: Option<Vec<f64>>,
    /// d^2/(d beta d calibration), rows indexed by beta, when requested
    pub cross: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Derivatives {
    None,
    Score,
    Hessian,
}

/// Sensitivity of each member's probability row to its study's
/// calibration parameters: `grads[i][p]` is `d log pi_{i,p} / d theta`,
/// `None` for rows that do not depend on the calibration.
pub(crate) struct RowSensitivity<'a> {
    pub grads: &'a [Option<Vec<Vec<f64>>>],
    pub dim: usize,
}

/// `d log pi_p / d [a.., b..]` for every level `p` at local value `w`.
pub(crate) fn log_prob_gradients(block: &StudyCalibration, w: f64) -> Vec<Vec<f64>> {
    let m = block.intercepts.len();
    let probs = block.probs(w);
    (1..=m + 1)
        .map(|p| {
            let mut g = vec![0.0; 2 * m];
            for q in 0..m {
                let v = f64::from(u8::from(p == q + 2)) - probs[q + 1];
                g[q] = v;
                g[m + q] = w * v;
            }
            g
        })
        .collect()
}

/// Rows of `stratum` that depend on the calibration under `method`.
pub(crate) fn stratum_sensitivity(
    stratum: &Stratum,
    block: &StudyCalibration,
    method: CalibrationMethod,
) -> Vec<Option<Vec<Vec<f64>>>> {
    stratum
        .participants
        .iter()
        .map(|person| {
            let fixed = method == CalibrationMethod::Internalized && person.in_calibration;
            (!fixed).then(|| log_prob_gradients(block, person.local_value))
        })
        .collect()
}

pub(crate) fn stratum_table_for(
    stratum: &Stratum,
    block: &StudyCalibration,
    method: CalibrationMethod,
) -> StratumProbTable {
    stratum_table(stratum, block, method)
}

/// Enumerates every level assignment with non-zero weight and accumulates
/// the requested derivatives.
pub(crate) fn stratum_evaluate(
    beta: &Beta,
    rows: &[Vec<f64>],
    covs: &[&[f64]],
    wanted: Derivatives,
    sensitivity: Option<RowSensitivity<'_>>,
) -> Result<StratumEvaluation> {
    let n = rows.len();
    let p = beta.category_count();
    let d = beta.dim();
    if n < 2 || covs.len() != n {
        return Err(Error::Input("stratum needs at least 2 members".into()));
    }
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Input(format!(
            "probability rows must have {p} entries to match beta"
        )));
    }
    if covs.iter().any(|z| z.len() != beta.z.len()) {
        return Err(Error::Input("covariate length does not match beta_z".into()));
    }
    let terms = (p as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if terms > ENUMERATION_LIMIT {
        return Err(Error::EnumerationLimit {
            stratum: alloc::string::String::new(),
            terms,
            limit: ENUMERATION_LIMIT,
        });
    }

    let zeta: Vec<f64> = covs.iter().map(|z| dot(&beta.z, z)).collect();
    // Support of each row, so zero-probability levels are never visited.
    let support: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| (0..p).filter(|&c| r[c] > 0.0).collect())
        .collect();
    if support.iter().any(Vec::is_empty) {
        return Err(Error::Input("probability row with no mass".into()));
    }

    let mut terms_out: Vec<Term> = Vec::new();
    let mut assignment = vec![0usize; n];
    let mut eta = vec![0.0; n];
    let mut softmax = vec![0.0; n];
    let mut cursor = vec![0usize; n];
    // Odometer over the supports.
    'assignments: loop {
        let mut weight = 1.0;
        for i in 0..n {
            let c = support[i][cursor[i]];
            assignment[i] = c + 1;
            weight *= rows[i][c];
            eta[i] = beta.level_effect(c + 1) + zeta[i];
        }
        if weight > 0.0 {
            let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (s, e) in softmax.iter_mut().zip(&eta) {
                *s = libm::exp(e - max);
                total += *s;
            }
            for s in softmax.iter_mut() {
                *s /= total;
            }
            terms_out.push(Term {
                log_mass: libm::log(weight) + libm::log(softmax[0]),
                assignment: assignment.clone(),
                softmax: softmax.clone(),
            });
        }
        let mut i = n;
        loop {
            if i == 0 {
                break 'assignments;
            }
            i -= 1;
            cursor[i] += 1;
            if cursor[i] < support[i].len() {
                break;
            }
            cursor[i] = 0;
        }
    }

    // Normalized posterior weights of the assignments.
    let log_masses: Vec<f64> = terms_out.iter().map(|t| t.log_mass).collect();
    let loglik = log_sum_exp(&log_masses);
    let mut eval = StratumEvaluation {
        loglik,
        score: vec![0.0; d],
        hessian: None,
        calibration_gradient: None,
        cross: None,
    };
    if wanted == Derivatives::None && sensitivity.is_none() {
        return Ok(eval);
    }

    let posterior: Vec<f64> = log_masses.iter().map(|l| libm::exp(l - loglik)).collect();
    let level_dim = p - 1;
    let features = |i: usize, category: usize, out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        if category > 1 {
            out[category - 2] = 1.0;
        }
        out[level_dim..].copy_from_slice(covs[i]);
    };

    let mut x_i = vec![0.0; d];
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(terms_out.len());
    let mut softmax_cov: Vec<DMatrix<f64>> = Vec::new();
    for term in &terms_out {
        // d log(CLR factor) / d beta = x_case - sum_i softmax_i x_i
        let mut mean = vec![0.0; d];
        let mut second = DMatrix::zeros(d, d);
        let mut case_x = vec![0.0; d];
        for i in 0..n {
            features(i, term.assignment[i], &mut x_i);
            if i == 0 {
                case_x.copy_from_slice(&x_i);
            }
            let s = term.softmax[i];
            for a in 0..d {
                mean[a] += s * x_i[a];
                if wanted == Derivatives::Hessian {
                    for b in 0..d {
                        second[(a, b)] += s * x_i[a] * x_i[b];
                    }
                }
            }
        }
        let direction: Vec<f64> = case_x.iter().zip(&mean).map(|(c, m)| c - m).collect();
        if wanted == Derivatives::Hessian {
            for a in 0..d {
                for b in 0..d {
                    second[(a, b)] -= mean[a] * mean[b];
                }
            }
            softmax_cov.push(second);
        }
        directions.push(direction);
    }

    let mut score = vec![CompensatedSum::new(); d];
    for (r, dir) in posterior.iter().zip(&directions) {
        for (acc, v) in score.iter_mut().zip(dir) {
            acc.add(r * v);
        }
    }
    eval.score = score.iter().map(CompensatedSum::value).collect();

    if wanted == Derivatives::Hessian {
        let mut h = DMatrix::zeros(d, d);
        for ((r, dir), cov) in posterior.iter().zip(&directions).zip(&softmax_cov) {
            for a in 0..d {
                for b in 0..d {
                    h[(a, b)] += r * (dir[a] * dir[b] - cov[(a, b)]);
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                h[(a, b)] -= eval.score[a] * eval.score[b];
            }
        }
        eval.hessian = Some(h);
    }

    if let Some(sens) = sensitivity {
        let k = sens.dim;
        let mut grad_terms: Vec<Vec<f64>> = Vec::with_capacity(terms_out.len());
        for term in &terms_out {
            let mut g = vec![0.0; k];
            for (i, row) in sens.grads.iter().enumerate() {
                if let Some(per_level) = row {
                    for (gv, v) in g.iter_mut().zip(&per_level[term.assignment[i] - 1]) {
                        *gv += v;
                    }
                }
            }
            grad_terms.push(g);
        }
        let cal_grad: Vec<f64> = (0..k)
            .map(|c| compensated_sum(posterior.iter().zip(&grad_terms).map(|(r, g)| r * g[c])))
            .collect();
        let mut cross = DMatrix::zeros(d, k);
        for ((r, dir), g) in posterior.iter().zip(&directions).zip(&grad_terms) {
            for a in 0..d {
                for c in 0..k {
                    cross[(a, c)] += r * dir[a] * g[c];
                }
            }
        }
        for a in 0..d {
            for c in 0..k {
                cross[(a, c)] -= eval.score[a] * cal_grad[c];
            }
        }
        eval.calibration_gradient = Some(cal_grad);
        eval.cross = Some(cross);
    }
    Ok(eval)
}

struct Term {
    log_mass: f64,
    assignment: Vec<usize>,
    softmax: Vec<f64>,
}
