//! Maximizers for smooth log-likelihoods with analytic gradients.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::numeric::inf_norm;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// Near the optimum, objective differences drop below rounding; a step is
/// still taken when the value is flat to this relative level and the
/// gradient shrinks.
const FLAT_RELATIVE: f64 = 1e-12;

fn flat_improvement(old: f64, new: f64, old_grad: &[f64], new_grad: &[f64]) -> bool {
    libm::fabs(new - old) <= FLAT_RELATIVE * (1.0 + libm::fabs(old))
        && inf_norm(new_grad) < inf_norm(old_grad)
}

/// BFGS ascent with backtracking line search.
///
/// `evaluate` returns the objective and its gradient. `curvature` supplies
/// a positive definite approximation of the negative Hessian used to seed
/// (and, after a failed line search, reset) the inverse-Hessian estimate.
pub fn bfgs_maximize<F, H>(
    start: &[f64],
    mut evaluate: F,
    mut curvature: H,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Optimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    H: FnMut(&[f64]) -> Option<DMatrix<f64>>,
{
    let n = start.len();
    let mut x = start.to_vec();
    let (mut value, mut grad) = evaluate(&x)?;
    let seed = |m: Option<DMatrix<f64>>| -> DMatrix<f64> {
        m.and_then(|m| m.cholesky().map(|c| c.inverse()))
            .unwrap_or_else(|| DMatrix::identity(n, n))
    };
    let mut inv = seed(curvature(&x));
    let mut iterations = 0;
    let mut just_reset = true;

    while inf_norm(&grad) > tolerance && iterations < max_iterations {
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let mut dir = &inv * &g;
        let mut slope = g.dot(&dir);
        if !(slope > 0.0) {
            inv = DMatrix::identity(n, n);
            dir = g.clone();
            slope = g.dot(&dir);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Ok((v, tg)) = evaluate(&trial) {
                if v.is_finite()
                    && (v >= value + ARMIJO * alpha * slope || flat_improvement(value, v, &grad, &tg))
                {
                    accepted = Some((trial, v, tg));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((new_x, new_value, new_grad)) = accepted else {
            if just_reset {
                break;
            }
            inv = seed(curvature(&x));
            just_reset = true;
            continue;
        };
        just_reset = false;
        let s = DVector::from_iterator(n, new_x.iter().zip(&x).map(|(a, b)| a - b));
        // Ascent on f is descent on -f, so y is the change in -gradient.
        let y = DVector::from_iterator(n, grad.iter().zip(&new_grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            inv = &left * &inv * &right + rho * &s * s.transpose();
        }
        x = new_x;
        value = new_value;
        grad = new_grad;
    }
    let converged = inf_norm(&grad) <= tolerance;
    Ok(Optimum {
        x,
        value,
        gradient: grad,
        iterations,
        converged,
    })
}

/// Damped Newton ascent for concave objectives. `evaluate` returns the
/// value, gradient and Hessian.
pub fn newton_maximize<F>(
    start: &[f64],
    mut evaluate: F,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Optimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)>,
{
    let mut x = start.to_vec();
    let (mut value, mut grad, mut hess) = evaluate(&x)?;
    let mut iterations = 0;
    while inf_norm(&grad) > tolerance && iterations < max_iterations {
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let neg = -&hess;
        let dir = match neg.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => neg
                .lu()
                .solve(&g)
                .filter(|d| d.dot(&g) > 0.0)
                .unwrap_or_else(|| g.clone()),
        };
        let slope = g.dot(&dir);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Ok((v, tg, th)) = evaluate(&trial) {
                if v.is_finite()
                    && (v >= value + ARMIJO * alpha * slope || flat_improvement(value, v, &grad, &tg))
                {
                    accepted = Some((trial, v, tg, th));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((nx, nv, ng, nh)) = accepted else {
            break;
        };
        x = nx;
        value = nv;
        grad = ng;
        hess = nh;
    }
    let converged = inf_norm(&grad) <= tolerance;
    Ok(Optimum {
        x,
        value,
        gradient: grad,
        iterations,
        converged,
    })
}
