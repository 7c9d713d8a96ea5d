//! Covariate balancing propensity scores: score and balance moments stacked
//! and solved as an over-identified GMM problem with identity weighting.

use nalgebra::{DMatrix, DVector};

use super::models::{logistic_fit, logistic_predict, sigmoid};
use crate::error::{Error, Result};
use crate::optim::{bfgs, BfgsOptions};

pub(crate) const CBPS_TOL: f64 = 1e-8;

/// Moment vector and Jacobian for a binary treatment.
fn binary_moments(x: &DMatrix<f64>, t: &[f64], beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let k = x.ncols();
    let eta = x * beta;
    let mut g = DVector::zeros(2 * k);
    let mut j = DMatrix::zeros(2 * k, k);
    for i in 0..n {
        let e = sigmoid(eta[i]).clamp(1e-12, 1.0 - 1e-12);
        let row = x.row(i);
        let score = t[i] - e;
        let bal = t[i] / e - (1.0 - t[i]) / (1.0 - e);
        let d_score = -e * (1.0 - e);
        let d_bal = -(t[i] * (1.0 - e) / e + (1.0 - t[i]) * e / (1.0 - e));
        for r in 0..k {
            g[r] += score * row[r];
            g[k + r] += bal * row[r];
            for c in 0..k {
                j[(r, c)] += d_score * row[r] * row[c];
                j[(k + r, c)] += d_bal * row[r] * row[c];
            }
        }
    }
    let nf = n as f64;
    (g / nf, j / nf)
}

/// Moment vector and Jacobian for a standardized continuous treatment.
/// Parameters are the conditional-mean coefficients and `ln sigma^2`.
fn continuous_moments(x: &DMatrix<f64>, covs: &[usize], t: &[f64], theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let k = x.ncols();
    let p = covs.len();
    let gamma = theta.rows(0, k);
    let s = theta[k];
    let inv_var = (-s).exp();
    let dim = k + 1 + p;
    let mut g = DVector::zeros(dim);
    let mut j = DMatrix::zeros(dim, k + 1);
    for i in 0..n {
        let row = x.row(i);
        let r = t[i] - (row * gamma)[0];
        let w = (0.5 * s - 0.5 * t[i] * t[i] + 0.5 * r * r * inv_var).exp();
        for a in 0..k {
            g[a] += r * row[a] * inv_var;
            for c in 0..k {
                j[(a, c)] -= row[a] * row[c] * inv_var;
            }
            j[(a, k)] -= r * row[a] * inv_var;
        }
        g[k] += r * r * inv_var - 1.0;
        for c in 0..k {
            j[(k, c)] -= 2.0 * r * row[c] * inv_var;
        }
        j[(k, k)] -= r * r * inv_var;
        let dw_ds = w * (0.5 - 0.5 * r * r * inv_var);
        for (b, &col) in covs.iter().enumerate() {
            let zt = t[i] * row[col];
            g[k + 1 + b] += w * zt;
            for c in 0..k {
                j[(k + 1 + b, c)] -= zt * w * r * inv_var * row[c];
            }
            j[(k + 1 + b, k)] += zt * dw_ds;
        }
    }
    let nf = n as f64;
    (g / nf, j / nf)
}

/// Minimizes `|g|^2 / 2` with BFGS and Gauss-Newton polishing.
fn solve<F>(moments: F, start: DVector<f64>) -> Result<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let objective = |th: &DVector<f64>| {
        let (g, j) = moments(th);
        let v = 0.5 * g.norm_squared();
        if v.is_finite() {
            Ok((v, j.transpose() * g))
        } else {
            Err(Error::InvalidData("non-finite balance moments".into()))
        }
    };
    let opts = BfgsOptions {
        max_iter: 1000,
        grad_tol: CBPS_TOL,
        ..Default::default()
    };
    let res = bfgs(objective, start, None, &opts)?;
    let mut theta = res.x;
    let (mut g, mut j) = moments(&theta);
    let mut grad = j.transpose() * &g;
    for _ in 0..50 {
        if grad.amax() < CBPS_TOL {
            break;
        }
        let jtj = j.transpose() * &j;
        let Some(ch) = jtj.cholesky() else { break };
        let step = -ch.solve(&grad);
        let value = 0.5 * g.norm_squared();
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &theta + &step * s;
            let (gt, jt) = moments(&trial);
            if (0.5 * gt.norm_squared()) <= value {
                theta = trial;
                g = gt;
                j = jt;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        grad = j.transpose() * &g;
        if !moved {
            break;
        }
    }
    if grad.amax() >= CBPS_TOL {
        return Err(Error::NonConvergence {
            what: "covariate balancing propensity score".into(),
            detail: format!("moment norm {:.3e}, gradient norm {:.3e}", g.norm(), grad.amax()),
        });
    }
    Ok((theta, g.norm()))
}

/// Propensities for a binary treatment; `x` carries a leading intercept.
pub(crate) fn cbps_binary(x: &DMatrix<f64>, t: &[f64]) -> Result<(Vec<f64>, f64)> {
    let start = logistic_fit(x, t)?.beta;
    let (beta, norm) = solve(|b| binary_moments(x, t, b), start)?;
    Ok((logistic_predict(x, &beta), norm))
}

/// Conditional means and variance for a standardized continuous treatment.
pub(crate) fn cbps_continuous(x: &DMatrix<f64>, t: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let k = x.ncols();
    let ols = super::models::linear_fit(x, t)?;
    let mut start = DVector::zeros(k + 1);
    start.rows_mut(0, k).copy_from(&ols.gamma);
    start[k] = ols.sigma2.ln();
    let covs: Vec<usize> = (1..k).collect();
    let (theta, norm) = solve(|th| continuous_moments(x, &covs, t, th), start)?;
    let gamma = theta.rows(0, k).into_owned();
    let fitted = (x * gamma).iter().copied().collect();
    Ok((fitted, theta[k].exp(), norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::models::with_intercept;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jac_check<F>(f: F, theta: DVector<f64>)
    where
        F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
    {
        let (_, j) = f(&theta);
        let h = 1e-6;
        for c in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[c] += h;
            tm[c] -= h;
            let fd = (f(&tp).0 - f(&tm).0) / (2.0 * h);
            for r in 0..fd.len() {
                assert!((j[(r, c)] - fd[r]).abs() < 1e-6 * fd[r].abs().max(1.0), "({r},{c}) {} vs {}", j[(r, c)], fd[r]);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..1.5)).collect();
        let z2: Vec<f64> = (0..50).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x = with_intercept(&[z.clone(), z2], 50);
        let tb: Vec<f64> = z.iter().map(|v| if rng.random::<f64>() < sigmoid(*v) { 1.0 } else { 0.0 }).collect();
        jac_check(|b| binary_moments(&x, &tb, b), DVector::from_vec(vec![0.1, 0.4, -0.3]));
        let tc: Vec<f64> = z.iter().map(|v| 0.5 * v + rng.random_range(-1.0..1.0)).collect();
        jac_check(|th| continuous_moments(&x, &[1, 2], &tc, th), DVector::from_vec(vec![0.05, 0.3, -0.1, -0.4]));
    }
}
