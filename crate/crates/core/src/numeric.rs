//! Small numerical helpers shared by the estimators.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if libm::fabs(self.sum) >= libm::fabs(x) {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl core::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// `log(sum(exp(xs)))`, shifted by the maximum. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(compensated_sum(xs.iter().map(|&x| libm::exp(x - max))))
}

/// Softmax of `xs` written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut Vec<f64>) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(xs.iter().map(|&x| libm::exp(x - max)));
    let total: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= total;
    }
}

pub fn inf_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| f64::max(m, libm::fabs(*x)))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerical rank from the singular values, relative tolerance `rtol`.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rtol * max).count()
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    m.clone().cholesky().map(|c| c.solve(rhs))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Central finite-difference Jacobian of `f` at `x`; row `r` holds
/// `d f_r / d x`. Step is `h * max(1, |x_k|)`.
pub fn central_jacobian<F>(x: &[f64], outputs: usize, h: f64, mut f: F) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut jac = DMatrix::zeros(outputs, x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let step = h * f64::max(1.0, libm::fabs(x[k]));
        probe[k] = x[k] + step;
        let up = f(&probe);
        probe[k] = x[k] - step;
        let down = f(&probe);
        probe[k] = x[k];
        for r in 0..outputs {
            jac[(r, k)] = (up[r] - down[r]) / (2.0 * step);
        }
    }
    jac
}
