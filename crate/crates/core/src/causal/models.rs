//! Propensity models: logistic regression for binary treatments, Gaussian
//! linear regression for continuous ones, and the candidate library.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negbin::linalg::spd_inverse;

/// Linear predictors beyond this magnitude mean the treatment is separated.
const SEPARATION_ETA: f64 = 30.0;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Z-scores each column with the sample SD; zero-variance columns error.
pub(crate) fn standardize(names: &[String], columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    columns
        .iter()
        .zip(names)
        .map(|(c, name)| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 0.0) {
                return Err(Error::ZeroVariance(name.clone()));
            }
            Ok(c.iter().map(|v| (v - mean) / sd).collect())
        })
        .collect()
}

/// Model matrix with a leading intercept column.
pub(crate) fn with_intercept(columns: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

pub(crate) fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

#[derive(Debug, Clone)]
pub(crate) struct LogisticFit {
    pub beta: DVector<f64>,
    pub prob: Vec<f64>,
}

pub(crate) fn logistic_predict(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (x * beta).iter().map(|e| sigmoid(*e)).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic_ll(x: &DMatrix<f64>, t: &[f64], beta: &DVector<f64>) -> f64 {
    (x * beta)
        .iter()
        .zip(t)
        .map(|(eta, ti)| -ti * softplus(-eta) - (1.0 - ti) * softplus(*eta))
        .sum()
}

/// Logistic regression by Newton's method with step halving.
pub(crate) fn logistic_fit(x: &DMatrix<f64>, t: &[f64]) -> Result<LogisticFit> {
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    let mut ll = logistic_ll(x, t, &beta);
    for _ in 0..100 {
        let p = logistic_predict(x, &beta);
        let mut h = DMatrix::zeros(k, k);
        let mut g = DVector::zeros(k);
        for i in 0..x.nrows() {
            let row = x.row(i);
            let w = p[i] * (1.0 - p[i]);
            for r in 0..k {
                g[r] += (t[i] - p[i]) * row[r];
                for c in 0..k {
                    h[(r, c)] += w * row[r] * row[c];
                }
            }
        }
        let step = spd_inverse(&h).ok_or_else(|| Error::InvalidData("singular propensity information".into()))? * g;
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &beta + &step * s;
            let lt = logistic_ll(x, t, &trial);
            if lt.is_finite() && lt >= ll - 1e-12 * ll.abs() {
                beta = trial;
                ll = lt;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved || step.amax() * s < 1e-10 {
            break;
        }
        if (x * &beta).amax() > SEPARATION_ETA {
            break;
        }
    }
    if (x * &beta).amax() > SEPARATION_ETA || ll > -1e-8 {
        return Err(Error::Positivity(
            "treatment is (quasi-)separated by the covariates; propensities reach 0 or 1".into(),
        ));
    }
    Ok(LogisticFit {
        prob: logistic_predict(x, &beta),
        beta,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct LinearFit {
    pub gamma: DVector<f64>,
    pub fitted: Vec<f64>,
    /// Residual variance with `n - k` degrees of freedom.
    pub sigma2: f64,
}

pub(crate) fn linear_fit(x: &DMatrix<f64>, t: &[f64]) -> Result<LinearFit> {
    let n = x.nrows();
    let k = x.ncols();
    if n <= k {
        return Err(Error::InvalidData("too few rows for the propensity model".into()));
    }
    let xt = x.transpose();
    let inv = spd_inverse(&(&xt * x)).ok_or_else(|| Error::InvalidData("covariates are rank deficient".into()))?;
    let gamma = inv * (&xt * DVector::from_column_slice(t));
    let fitted: Vec<f64> = (x * &gamma).iter().copied().collect();
    let rss: f64 = fitted.iter().zip(t).map(|(f, v)| (v - f).powi(2)).sum();
    Ok(LinearFit {
        gamma,
        fitted,
        sigma2: rss / (n - k) as f64,
    })
}

pub(crate) fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Candidate propensity specifications for the stacked ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    MainEffects,
    SquaredTerms,
    InterceptOnly,
}

impl Candidate {
    pub fn name(&self) -> &'static str {
        match self {
            Candidate::MainEffects => "main_effects",
            Candidate::SquaredTerms => "squared_terms",
            Candidate::InterceptOnly => "intercept_only",
        }
    }

    pub fn default_library() -> Vec<Candidate> {
        vec![Candidate::MainEffects, Candidate::SquaredTerms, Candidate::InterceptOnly]
    }

    /// Model matrix over standardized covariates.
    pub(crate) fn matrix(&self, z: &[Vec<f64>], n: usize) -> DMatrix<f64> {
        match self {
            Candidate::MainEffects => with_intercept(z, n),
            Candidate::SquaredTerms => {
                let mut cols = z.to_vec();
                cols.extend(z.iter().map(|c| c.iter().map(|v| v * v).collect::<Vec<f64>>()));
                with_intercept(&cols, n)
            }
            Candidate::InterceptOnly => with_intercept(&[], n),
        }
    }
}

impl std::str::FromStr for Candidate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main_effects" => Ok(Candidate::MainEffects),
            "squared_terms" => Ok(Candidate::SquaredTerms),
            "intercept_only" => Ok(Candidate::InterceptOnly),
            other => Err(Error::Config(format!("unknown propensity candidate `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_matches_closed_form_for_one_binary_covariate() {
        // saturated 2x2 model: fitted probabilities equal cell proportions
        let x = vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let t = vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = logistic_fit(&with_intercept(&[x], 9), &t).unwrap();
        assert!((fit.prob[0] - 0.25).abs() < 1e-9);
        assert!((fit.prob[4] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn separated_treatment_is_positivity_error() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 - 19.5).collect();
        let t: Vec<f64> = x.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        assert!(matches!(logistic_fit(&with_intercept(&[x], 40), &t), Err(Error::Positivity(_))));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let t: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let f = linear_fit(&with_intercept(&[x], 10), &t).unwrap();
        assert!((f.gamma[0] - 2.0).abs() < 1e-10 && (f.gamma[1] - 0.5).abs() < 1e-10);
    }
}
