//! Stacked-estimating-equation (sandwich) covariance.
//!
//! Parameters are stacked as `theta = [calibration of study 1, ..,
//! calibration of study S, beta]`, each calibration block in the
//! `[a.., b..]` layout. The independent unit is the stratum: its
//! estimating function concatenates its pseudo-likelihood score in beta
//! with the multinomial scores of its calibration members.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::calibration::{multinomial_information, point_score, CalibrationModel, CalibrationPoint};
use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::likelihood::{
    stratum_evaluate, stratum_sensitivity, stratum_table_for, Beta, CalibrationMethod, Derivatives,
    RowSensitivity,
};
use crate::numeric::{inf_norm, numerical_rank, symmetrize};

/// Estimates must satisfy their estimating equations to this level.
pub const STATIONARITY_TOLERANCE: f64 = 1e-6;

/// Rank tolerance on the bread matrix, relative to its largest singular value.
const RANK_TOLERANCE: f64 = 1e-12;

/// Bread, meat and covariance of the full stacked system.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSandwich {
    /// `A = -sum d psi / d theta`
    pub bread: DMatrix<f64>,
    /// `B = sum psi psi^T`
    pub meat: DMatrix<f64>,
    /// `A^-1 B A^-T`
    pub covariance: DMatrix<f64>,
    /// Offset of the beta block inside theta.
    pub beta_offset: usize,
}

impl StackedSandwich {
    pub fn beta_block(&self) -> DMatrix<f64> {
        let d = self.covariance.nrows() - self.beta_offset;
        self.covariance
            .view((self.beta_offset, self.beta_offset), (d, d))
            .into_owned()
    }
}

/// Sandwich covariance of the beta estimates, propagating the estimation
/// error of the calibration models.
///
/// Both the calibration fits and `beta` must be stationary points of their
/// estimating equations.
pub fn sandwich_covariance(
    beta: &Beta,
    calibration: &CalibrationModel,
    dataset: &PooledDataset,
    method: CalibrationMethod,
) -> Result<DMatrix<f64>> {
    Ok(stacked_sandwich(beta, calibration, dataset, method, true)?.beta_block())
}

pub fn stacked_sandwich(
    beta: &Beta,
    calibration: &CalibrationModel,
    dataset: &PooledDataset,
    method: CalibrationMethod,
    check_stationary: bool,
) -> Result<StackedSandwich> {
    calibration.check_covers(dataset)?;
    if beta.category_count() != dataset.category_count() || beta.z.len() != dataset.covariate_count() {
        return Err(Error::Input("beta does not match the dataset dimensions".into()));
    }
    let m = dataset.category_count() - 1;
    let block_dim = 2 * m;
    let studies = dataset.studies();
    let beta_offset = studies.len() * block_dim;
    let d = beta.dim();
    let dim = beta_offset + d;

    let mut bread = DMatrix::zeros(dim, dim);
    let mut meat = DMatrix::zeros(dim, dim);
    let mut beta_score = vec![0.0; d];
    let mut cal_score = vec![0.0; beta_offset];

    for (s, study) in studies.iter().enumerate() {
        let block = calibration.study(&study.id).expect("coverage checked");
        let offset = s * block_dim;
        let points: Vec<CalibrationPoint> = study
            .calibration_members()
            .map(|p| CalibrationPoint {
                w: p.local_value,
                category: p.ref_category.expect("validated"),
            })
            .collect();
        let info = multinomial_information(&block.intercepts, &block.slopes, &points);
        bread
            .view_mut((offset, offset), (block_dim, block_dim))
            .copy_from(&info);

        for stratum in &study.strata {
            let table = stratum_table_for(stratum, block, method);
            let grads = stratum_sensitivity(stratum, block, method);
            let covs: Vec<&[f64]> = stratum
                .participants
                .iter()
                .map(|p| p.covariates.as_slice())
                .collect();
            let eval = stratum_evaluate(
                beta,
                table.rows(),
                &covs,
                Derivatives::Hessian,
                Some(RowSensitivity {
                    grads: &grads,
                    dim: block_dim,
                }),
            )?;

            let mut psi = DVector::zeros(dim);
            for member in stratum.participants.iter().filter(|p| p.in_calibration) {
                let pt = CalibrationPoint {
                    w: member.local_value,
                    category: member.ref_category.expect("validated"),
                };
                for (k, v) in point_score(&block.intercepts, &block.slopes, &pt)
                    .into_iter()
                    .enumerate()
                {
                    psi[offset + k] += v;
                }
            }
            for (k, v) in eval.score.iter().enumerate() {
                psi[beta_offset + k] = *v;
                beta_score[k] += v;
            }
            for k in 0..block_dim {
                cal_score[offset + k] += psi[offset + k];
            }
            meat += &psi * psi.transpose();

            let hessian = eval.hessian.expect("requested");
            let cross = eval.cross.expect("requested");
            for a in 0..d {
                for b in 0..d {
                    bread[(beta_offset + a, beta_offset + b)] -= hessian[(a, b)];
                }
                for c in 0..block_dim {
                    bread[(beta_offset + a, offset + c)] -= cross[(a, c)];
                }
            }
        }
    }

    if check_stationary {
        let worst = f64::max(inf_norm(&beta_score), inf_norm(&cal_score));
        if worst > STATIONARITY_TOLERANCE {
            return Err(Error::NotStationary(worst));
        }
    }

    let rank = numerical_rank(&bread, RANK_TOLERANCE);
    if rank < dim {
        return Err(Error::SingularBread { rank, dim });
    }
    let inverse = bread
        .clone()
        .try_inverse()
        .ok_or(Error::SingularBread { rank, dim })?;
    let mut covariance = &inverse * &meat * inverse.transpose();
    symmetrize(&mut covariance);
    Ok(StackedSandwich {
        bread,
        meat,
        covariance,
        beta_offset,
    })
}
