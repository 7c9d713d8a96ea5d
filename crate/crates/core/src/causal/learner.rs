//! Cross-validated convex stacking of propensity candidates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::{linear_fit, logistic_fit, logistic_predict, rows, Candidate};
use super::TreatmentKind;
use crate::error::{Error, Result};
use crate::optim::minimize_on_simplex;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingReport {
    pub candidates: Vec<Candidate>,
    /// Convex weights, one per retained candidate.
    pub coefficients: Vec<f64>,
    /// Cross-validated loss of each retained candidate.
    pub candidate_cv_loss: Vec<f64>,
    pub ensemble_cv_loss: f64,
    pub folds: usize,
}

/// Fold index per row, balanced and shuffled from `seed`.
pub(crate) fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, i) in idx.into_iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

/// Held-out predictions: probabilities (binary) or conditional means.
fn fit_predict(kind: TreatmentKind, c: Candidate, z: &[Vec<f64>], t: &[f64], train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
    let x = c.matrix(z, t.len());
    let xt = rows(&x, train);
    let tt: Vec<f64> = train.iter().map(|&i| t[i]).collect();
    let xs = rows(&x, test);
    match kind {
        TreatmentKind::Binary => {
            let f = logistic_fit(&xt, &tt)?;
            Ok(logistic_predict(&xs, &f.beta))
        }
        TreatmentKind::Continuous => {
            let f = linear_fit(&xt, &tt)?;
            Ok((xs * f.gamma).iter().copied().collect())
        }
    }
}

fn loss(kind: TreatmentKind, t: &[f64], pred: &[f64]) -> f64 {
    let n = t.len() as f64;
    match kind {
        TreatmentKind::Binary => {
            -t.iter()
                .zip(pred)
                .map(|(ti, p)| {
                    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    ti * p.ln() + (1.0 - ti) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        }
        TreatmentKind::Continuous => t.iter().zip(pred).map(|(ti, p)| (ti - p).powi(2)).sum::<f64>() / n,
    }
}

pub(crate) struct Ensemble {
    /// Full-data probabilities or conditional means.
    pub prediction: Vec<f64>,
    /// Residual variance (continuous treatments only).
    pub sigma2: f64,
    pub report: StackingReport,
    pub warnings: Vec<String>,
}

pub(crate) fn stack(
    kind: TreatmentKind,
    library: &[Candidate],
    z: &[Vec<f64>],
    t: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Ensemble> {
    let n = t.len();
    if library.is_empty() {
        return Err(Error::Config("super learner needs at least one candidate".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("invalid number of folds {folds}")));
    }
    let assign = fold_assignment(n, folds, seed);
    let mut warnings = Vec::new();

    let cv: Vec<Result<Vec<f64>>> = library
        .par_iter()
        .map(|&c| {
            let mut out = vec![0.0; n];
            for f in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| assign[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| assign[i] == f).collect();
                let pred = fit_predict(kind, c, z, t, &train, &test)?;
                for (i, p) in test.iter().zip(pred) {
                    out[*i] = p;
                }
            }
            Ok(out)
        })
        .collect();
    let mut kept = Vec::new();
    let mut preds = Vec::new();
    for (c, r) in library.iter().zip(cv) {
        match r {
            Ok(p) => {
                kept.push(*c);
                preds.push(p);
            }
            Err(e) => warnings.push(format!("candidate {} dropped: {e}", c.name())),
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidData("every propensity candidate failed".into()));
    }
    let losses: Vec<f64> = preds.iter().map(|p| loss(kind, t, p)).collect();
    let best = (0..kept.len()).min_by(|a, b| losses[*a].total_cmp(&losses[*b])).unwrap();
    let mut start = vec![0.0; kept.len()];
    start[best] = 1.0;

    let combine = |w: &[f64]| -> Vec<f64> {
        (0..n).map(|i| w.iter().zip(&preds).map(|(wk, p)| wk * p[i]).sum()).collect()
    };
    let objective = |w: &[f64]| -> (f64, Vec<f64>) {
        let m = combine(w);
        let value = loss(kind, t, &m);
        let grad = preds
            .iter()
            .map(|pk| {
                let s: f64 = (0..n)
                    .map(|i| match kind {
                        TreatmentKind::Binary => {
                            let p = m[i].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                            -(t[i] / p - (1.0 - t[i]) / (1.0 - p)) * pk[i]
                        }
                        TreatmentKind::Continuous => -2.0 * (t[i] - m[i]) * pk[i],
                    })
                    .sum();
                s / n as f64
            })
            .collect();
        (value, grad)
    };
    let (coefficients, ensemble_cv_loss) = minimize_on_simplex(objective, start, 2000);

    // refit every retained candidate on all rows
    let all: Vec<usize> = (0..n).collect();
    let mut full = Vec::new();
    let mut k_eff = 0.0;
    for (c, w) in kept.iter().zip(&coefficients) {
        full.push(fit_predict(kind, *c, z, t, &all, &all)?);
        k_eff += w * c.matrix(z, 1).ncols() as f64;
    }
    let prediction: Vec<f64> = (0..n)
        .map(|i| coefficients.iter().zip(&full).map(|(w, p)| w * p[i]).sum())
        .collect();
    let sigma2 = match kind {
        TreatmentKind::Binary => f64::NAN,
        TreatmentKind::Continuous => {
            let rss: f64 = prediction.iter().zip(t).map(|(p, v)| (v - p).powi(2)).sum();
            rss / (n as f64 - k_eff)
        }
    };
    Ok(Ensemble {
        prediction,
        sigma2,
        report: StackingReport {
            candidates: kept,
            coefficients,
            candidate_cv_loss: losses,
            ensemble_cv_loss,
            folds,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let a = fold_assignment(23, 5, 3);
        assert_eq!(a, fold_assignment(23, 5, 3));
        for f in 0..5 {
            let c = a.iter().filter(|x| **x == f).count();
            assert!(c == 4 || c == 5);
        }
    }
}
