//! MAAPE and the permutation test of predictor importance.

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignTable, ModelSpec};
use crate::error::{Error, Result};
use crate::negbin::{fit_nb_glm_with, fit_nb_mixed_with, predict_mu, FitOptions, FitResult, Prediction};

/// Share of failed permutation fits above which the test is rejected.
pub const MAX_FAILED_SHARE: f64 = 0.2;

/// Mean arctangent absolute percentage error. A zero observation scores 0
/// when predicted exactly and π/2 otherwise.
pub fn maape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::InvalidData(format!(
            "maape: {} observations but {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidData("maape: empty input".into()));
    }
    let mut total = 0.0;
    for (o, p) in y.iter().zip(yhat) {
        if *o < 0.0 || !o.is_finite() || !p.is_finite() {
            return Err(Error::InvalidData(format!("maape: invalid pair ({o}, {p})")));
        }
        let err = (o - p).abs();
        total += if *o == 0.0 {
            if err == 0.0 {
                0.0
            } else {
                FRAC_PI_2
            }
        } else {
            (err / o).atan()
        };
    }
    Ok(total / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub predictor: String,
    pub observed_maape: f64,
    /// One entry per permutation; `None` where the refit failed.
    pub permuted_maapes: Vec<Option<f64>>,
    /// Share of successful permutations with strictly lower MAAPE.
    pub proportion_lower: f64,
    pub n_failed: usize,
    pub n_permutations: usize,
    pub seed: u64,
    pub within_period: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PermutationOptions {
    pub n_permutations: usize,
    pub seed: u64,
    /// Shuffle only among rows of the same period.
    pub within_period: bool,
    pub fit: FitOptions,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        PermutationOptions {
            n_permutations: 100,
            seed: 0,
            within_period: false,
            fit: FitOptions::default(),
        }
    }
}

fn fit(design: &DesignTable, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if spec.random_levels.is_empty() {
        fit_nb_glm_with(design, opts)
    } else {
        fit_nb_mixed_with(design, &spec.random_levels, opts)
    }
}

fn in_sample_maape(design: &DesignTable, fit: &FitResult) -> Result<f64> {
    maape(&design.y, &predict_mu(fit, design, Prediction::FixedOnly)?)
}

/// Permutation `index` of `values` from the `(seed, index)` stream.
pub fn permuted_column(values: &[f64], periods: &[usize], within_period: bool, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    if !within_period {
        let mut out = values.to_vec();
        out.shuffle(&mut rng);
        return out;
    }
    let mut out = values.to_vec();
    let n_periods = periods.iter().max().map_or(0, |m| m + 1);
    for t in 0..n_periods {
        let rows: Vec<usize> = (0..values.len()).filter(|&i| periods[i] == t).collect();
        let mut vals: Vec<f64> = rows.iter().map(|&i| values[i]).collect();
        vals.shuffle(&mut rng);
        for (i, v) in rows.iter().zip(vals) {
            out[*i] = v;
        }
    }
    out
}

/// Refits the model with `predictor` shuffled and compares in-sample MAAPE
/// (fixed-effects means) against the observed fit.
pub fn permutation_test(
    design: &DesignTable,
    spec: &ModelSpec,
    predictor: &str,
    opts: &PermutationOptions,
) -> Result<PermutationReport> {
    let values = design
        .column(predictor)
        .ok_or_else(|| Error::MissingColumn(predictor.to_string()))?;
    let mut warnings = Vec::new();
    let constant = values.iter().all(|v| *v == values[0]);

    if constant {
        warnings.push(format!(
            "predictor `{predictor}` is constant; permutations leave the design unchanged and it was dropped from the fit"
        ));
        let reduced = design.without_column(predictor)?;
        let base = fit(&reduced, spec, &opts.fit)?;
        if !base.converged() {
            return Err(Error::NonConvergence {
                what: "baseline fit".into(),
                detail: format!("{:?}", base.convergence),
            });
        }
        let observed = in_sample_maape(&reduced, &base)?;
        return Ok(PermutationReport {
            predictor: predictor.to_string(),
            observed_maape: observed,
            permuted_maapes: vec![Some(observed); opts.n_permutations],
            proportion_lower: 0.0,
            n_failed: 0,
            n_permutations: opts.n_permutations,
            seed: opts.seed,
            within_period: opts.within_period,
            warnings,
        });
    }

    let base = fit(design, spec, &opts.fit)?;
    if !base.converged() {
        return Err(Error::NonConvergence {
            what: "baseline fit".into(),
            detail: format!("{:?}", base.convergence),
        });
    }
    let observed = in_sample_maape(design, &base)?;

    let inner = FitOptions {
        parallel: false,
        ..opts.fit.clone()
    };
    let run = |index: usize| -> Option<f64> {
        let shuffled = permuted_column(&values, &design.period, opts.within_period, opts.seed, index as u64);
        let d = design.with_column(predictor, &shuffled).ok()?;
        let f = fit(&d, spec, &inner).ok()?;
        if !f.converged() {
            return None;
        }
        in_sample_maape(&d, &f).ok()
    };
    let permuted: Vec<Option<f64>> = (0..opts.n_permutations).into_par_iter().map(run).collect();
    let n_failed = permuted.iter().filter(|m| m.is_none()).count();
    if opts.n_permutations > 0 && n_failed as f64 > MAX_FAILED_SHARE * opts.n_permutations as f64 {
        return Err(Error::NonConvergence {
            what: "permutation test".into(),
            detail: format!("{n_failed} of {} permutation fits failed", opts.n_permutations),
        });
    }
    if n_failed > 0 {
        warnings.push(format!("{n_failed} permutation fit(s) failed and were excluded"));
    }
    let ok: Vec<f64> = permuted.iter().flatten().copied().collect();
    let lower = ok.iter().filter(|m| **m < observed).count();
    let proportion_lower = if ok.is_empty() { 0.0 } else { lower as f64 / ok.len() as f64 };
    Ok(PermutationReport {
        predictor: predictor.to_string(),
        observed_maape: observed,
        permuted_maapes: permuted,
        proportion_lower,
        n_failed,
        n_permutations: opts.n_permutations,
        seed: opts.seed,
        within_period: opts.within_period,
        warnings,
    })
}
