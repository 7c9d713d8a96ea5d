//! Propensity weighting (IPTW, CBPS, stacked super learner) followed by a
//! weighted outcome regression.

mod cbps;
mod learner;
mod models;

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignTable;
use crate::error::{Error, Result};
use crate::negbin::linalg::{check_rank, normal_p_value, spd_inverse};
use crate::negbin::{fit_nb_glm_with, ClusterLevel, FitOptions};

pub use learner::StackingReport;
pub use models::Candidate;

use models::{logistic_fit, normal_pdf, standardize, with_intercept};

/// Propensities outside `[POSITIVITY_LOW, 1 - POSITIVITY_LOW]` count toward
/// the positivity warning.
pub const POSITIVITY_LOW: f64 = 0.001;
/// Share of rows outside the band that triggers the warning.
pub const POSITIVITY_SHARE: f64 = 0.05;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    Iptw,
    Cbps,
    SuperLearner,
}

impl FromStr for WeightMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iptw" => Ok(WeightMethod::Iptw),
            "cbps" => Ok(WeightMethod::Cbps),
            "super_learner" | "super-learner" => Ok(WeightMethod::SuperLearner),
            other => Err(Error::Config(format!("unknown weighting method `{other}`"))),
        }
    }
}

impl WeightMethod {
    pub fn name(&self) -> &'static str {
        match self {
            WeightMethod::Iptw => "iptw",
            WeightMethod::Cbps => "cbps",
            WeightMethod::SuperLearner => "super_learner",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Treatment {
    pub name: String,
    pub values: Vec<f64>,
    pub kind: TreatmentKind,
}

impl Treatment {
    /// Binary when every value is 0 or 1, continuous otherwise.
    pub fn new(name: &str, values: Vec<f64>) -> Result<Treatment> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingValues {
                offenders: vec![format!("treatment `{name}`")],
            });
        }
        let kind = if values.iter().all(|v| *v == 0.0 || *v == 1.0) {
            TreatmentKind::Binary
        } else {
            TreatmentKind::Continuous
        };
        let t = Treatment {
            name: name.to_string(),
            values,
            kind,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let n = self.values.len();
        match self.kind {
            TreatmentKind::Binary => {
                let treated = self.values.iter().filter(|v| **v == 1.0).count();
                if treated == 0 || treated == n {
                    return Err(Error::InvalidData(format!(
                        "treatment `{}` has a single arm ({treated} of {n} treated)",
                        self.name
                    )));
                }
            }
            TreatmentKind::Continuous => {
                let first = self.values[0];
                if self.values.iter().all(|v| *v == first) {
                    return Err(Error::ZeroVariance(self.name.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Named covariate columns (no intercept).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Covariates> {
        if names.len() != columns.len() {
            return Err(Error::InvalidData("covariate names and columns disagree".into()));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::InvalidData("covariate columns differ in length".into()));
            }
        }
        let mut offenders = Vec::new();
        for (name, c) in names.iter().zip(&columns) {
            if c.iter().any(|v| !v.is_finite()) {
                offenders.push(format!("covariate `{name}`"));
            }
        }
        if !offenders.is_empty() {
            return Err(Error::MissingValues { offenders });
        }
        Ok(Covariates { names, columns })
    }

    pub fn from_pairs(pairs: &[(&str, Vec<f64>)]) -> Result<Covariates> {
        Covariates::new(
            pairs.iter().map(|(n, _)| n.to_string()).collect(),
            pairs.iter().map(|(_, c)| c.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn check_rows(&self, n: usize) -> Result<()> {
        if self.columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidData(format!("covariates must have {n} rows")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    /// Standardized mean difference (binary) or treatment correlation
    /// (continuous) without weights.
    pub unweighted: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub method: WeightMethod,
    pub treatment: String,
    pub kind: TreatmentKind,
    /// Positive, mean one.
    pub weights: Vec<f64>,
    pub balance: Vec<BalanceRow>,
    pub ess: f64,
    /// Cap applied before normalization, if any.
    pub truncation_cap: Option<f64>,
    pub n_truncated: usize,
    pub stacking: Option<StackingReport>,
    pub warnings: Vec<String>,
}

impl WeightSet {
    /// Unit weights, e.g. for naive contrasts.
    pub fn uniform(treatment: &Treatment) -> WeightSet {
        let n = treatment.values.len();
        WeightSet {
            method: WeightMethod::Iptw,
            treatment: treatment.name.clone(),
            kind: treatment.kind,
            weights: vec![1.0; n],
            balance: vec![],
            ess: n as f64,
            truncation_cap: None,
            n_truncated: 0,
            stacking: None,
            warnings: vec![],
        }
    }

    pub fn max_abs_balance(&self) -> f64 {
        self.balance.iter().map(|b| b.weighted.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub method: String,
    pub treatment: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

impl CausalEstimate {
    pub fn significant(&self) -> bool {
        self.p < SIGNIFICANCE
    }
}

/// `method,treatment,estimate,se,z,p` rows.
pub fn causal_csv(estimates: &[CausalEstimate]) -> String {
    let mut s = String::from("method,treatment,estimate,se,z,p\n");
    for e in estimates {
        let _ = writeln!(s, "{},{},{},{},{},{}", e.method, e.treatment, e.estimate, e.se, e.z, e.p);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightOptions {
    /// Quantile at which raw weights are capped; `None` disables truncation.
    pub truncate_quantile: Option<f64>,
    pub folds: usize,
    pub seed: u64,
    pub library: Vec<Candidate>,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            truncate_quantile: Some(0.99),
            folds: 5,
            seed: 0,
            library: Candidate::default_library(),
        }
    }
}

/// Linear-interpolation sample quantile.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn weighted_mean(x: &[f64], w: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut s, mut sw) = (0.0, 0.0);
    for i in 0..x.len() {
        if keep(i) {
            s += w[i] * x[i];
            sw += w[i];
        }
    }
    s / sw
}

fn sample_var(x: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let v: Vec<f64> = (0..x.len()).filter(|i| keep(*i)).map(|i| x[i]).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Weighted standardized mean difference over the pooled unweighted SD.
pub fn weighted_smd(x: &[f64], t: &[f64], w: &[f64]) -> f64 {
    let treated = |i: usize| t[i] == 1.0;
    let control = |i: usize| t[i] != 1.0;
    let sd = ((sample_var(x, treated) + sample_var(x, control)) / 2.0).sqrt();
    (weighted_mean(x, w, treated) - weighted_mean(x, w, control)) / sd
}

pub fn weighted_correlation(x: &[f64], t: &[f64], w: &[f64]) -> f64 {
    let mx = weighted_mean(x, w, |_| true);
    let mt = weighted_mean(t, w, |_| true);
    let (mut sxt, mut sxx, mut stt) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxt += w[i] * (x[i] - mx) * (t[i] - mt);
        sxx += w[i] * (x[i] - mx).powi(2);
        stt += w[i] * (t[i] - mt).powi(2);
    }
    sxt / (sxx * stt).sqrt()
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    s * s / w.iter().map(|v| v * v).sum::<f64>()
}

fn balance(treatment: &Treatment, cov: &Covariates, w: &[f64]) -> Vec<BalanceRow> {
    let ones = vec![1.0; w.len()];
    let stat = |x: &[f64], wt: &[f64]| match treatment.kind {
        TreatmentKind::Binary => weighted_smd(x, &treatment.values, wt),
        TreatmentKind::Continuous => weighted_correlation(x, &treatment.values, wt),
    };
    cov.names
        .iter()
        .zip(&cov.columns)
        .map(|(name, x)| BalanceRow {
            covariate: name.clone(),
            unweighted: stat(x, &ones),
            weighted: stat(x, w),
        })
        .collect()
}

struct Prepared {
    z: Vec<Vec<f64>>,
    n: usize,
}

fn prepare(treatment: &Treatment, cov: &Covariates) -> Result<Prepared> {
    treatment.check()?;
    let n = treatment.values.len();
    cov.check_rows(n)?;
    let z = standardize(&cov.names, &cov.columns)?;
    let mut names = vec!["intercept".to_string()];
    names.extend(cov.names.iter().cloned());
    check_rank(&with_intercept(&z, n), &names)?;
    Ok(Prepared { z, n })
}

fn positivity_warning(e: &[f64]) -> Option<String> {
    let outside = e
        .iter()
        .filter(|p| **p < POSITIVITY_LOW || **p > 1.0 - POSITIVITY_LOW)
        .count();
    let share = outside as f64 / e.len() as f64;
    (share > POSITIVITY_SHARE).then(|| {
        format!(
            "positivity: {:.1}% of propensities fall outside [{POSITIVITY_LOW}, {}]",
            100.0 * share,
            1.0 - POSITIVITY_LOW
        )
    })
}

fn binary_weights(t: &[f64], e: &[f64]) -> Vec<f64> {
    let pbar = t.iter().sum::<f64>() / t.len() as f64;
    t.iter()
        .zip(e)
        .map(|(ti, ei)| ti * pbar / ei + (1.0 - ti) * (1.0 - pbar) / (1.0 - ei))
        .collect()
}

/// Stabilized density-ratio weights for a continuous treatment.
fn continuous_weights(t: &[f64], mean: &[f64], sigma2: f64) -> Vec<f64> {
    let n = t.len() as f64;
    let m = t.iter().sum::<f64>() / n;
    let v = t.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    t.iter()
        .zip(mean)
        .map(|(ti, mi)| normal_pdf(*ti, m, v) / normal_pdf(*ti, *mi, sigma2))
        .collect()
}

fn finalize(
    method: WeightMethod,
    treatment: &Treatment,
    cov: &Covariates,
    raw: Vec<f64>,
    opts: &WeightOptions,
    mut warnings: Vec<String>,
    stacking: Option<StackingReport>,
) -> Result<WeightSet> {
    if raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Positivity("propensity weights are not finite and positive".into()));
    }
    let mut w = raw;
    let mut n_truncated = 0;
    let cap = opts.truncate_quantile.map(|q| quantile(&w, q));
    if let Some(c) = cap {
        for v in w.iter_mut() {
            if *v > c {
                *v = c;
                n_truncated += 1;
            }
        }
        if n_truncated > 0 {
            warnings.push(format!("{n_truncated} weight(s) truncated at {c}"));
        }
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for v in w.iter_mut() {
        *v /= mean;
    }
    Ok(WeightSet {
        method,
        treatment: treatment.name.clone(),
        kind: treatment.kind,
        balance: balance(treatment, cov, &w),
        ess: effective_sample_size(&w),
        weights: w,
        truncation_cap: cap,
        n_truncated,
        stacking,
        warnings,
    })
}

/// Inverse probability of treatment weights from a logistic (binary) or
/// Gaussian linear (continuous) propensity model on main effects.
pub fn iptw_weights(treatment: &Treatment, cov: &Covariates, opts: &WeightOptions) -> Result<WeightSet> {
    let prep = prepare(treatment, cov)?;
    let x = with_intercept(&prep.z, prep.n);
    let t = &treatment.values;
    let mut warnings = Vec::new();
    let raw = match treatment.kind {
        TreatmentKind::Binary => {
            let e = logistic_fit(&x, t)?.prob;
            warnings.extend(positivity_warning(&e));
            binary_weights(t, &e)
        }
        TreatmentKind::Continuous => {
            let f = models::linear_fit(&x, t)?;
            continuous_weights(t, &f.fitted, f.sigma2)
        }
    };
    finalize(WeightMethod::Iptw, treatment, cov, raw, opts, warnings, None)
}

/// Covariate balancing propensity score weights.
pub fn cbps_weights(treatment: &Treatment, cov: &Covariates, opts: &WeightOptions) -> Result<WeightSet> {
    let prep = prepare(treatment, cov)?;
    let x = with_intercept(&prep.z, prep.n);
    let t = &treatment.values;
    let mut warnings = Vec::new();
    let raw = match treatment.kind {
        TreatmentKind::Binary => {
            let (e, norm) = cbps::cbps_binary(&x, t)?;
            warnings.push(format!("final moment norm {norm:.3e}"));
            warnings.extend(positivity_warning(&e));
            binary_weights(t, &e)
        }
        TreatmentKind::Continuous => {
            let n = t.len() as f64;
            let m = t.iter().sum::<f64>() / n;
            let sd = (t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let ts: Vec<f64> = t.iter().map(|v| (v - m) / sd).collect();
            let (mean, sigma2, norm) = cbps::cbps_continuous(&x, &ts)?;
            warnings.push(format!("final moment norm {norm:.3e}"));
            continuous_weights(&ts, &mean, sigma2)
        }
    };
    finalize(WeightMethod::Cbps, treatment, cov, raw, opts, warnings, None)
}

/// Weights from a cross-validated convex stack of propensity candidates.
pub fn super_learner_weights(treatment: &Treatment, cov: &Covariates, opts: &WeightOptions) -> Result<WeightSet> {
    let prep = prepare(treatment, cov)?;
    let t = &treatment.values;
    let ens = learner::stack(treatment.kind, &opts.library, &prep.z, t, opts.folds, opts.seed)?;
    let mut warnings = ens.warnings;
    let raw = match treatment.kind {
        TreatmentKind::Binary => {
            warnings.extend(positivity_warning(&ens.prediction));
            if ens.prediction.iter().any(|p| *p <= 0.0 || *p >= 1.0) {
                return Err(Error::Positivity("ensemble propensities reach 0 or 1".into()));
            }
            binary_weights(t, &ens.prediction)
        }
        TreatmentKind::Continuous => continuous_weights(t, &ens.prediction, ens.sigma2),
    };
    finalize(WeightMethod::SuperLearner, treatment, cov, raw, opts, warnings, Some(ens.report))
}

pub fn compute_weights(method: WeightMethod, treatment: &Treatment, cov: &Covariates, opts: &WeightOptions) -> Result<WeightSet> {
    match method {
        WeightMethod::Iptw => iptw_weights(treatment, cov, opts),
        WeightMethod::Cbps => cbps_weights(treatment, cov, opts),
        WeightMethod::SuperLearner => super_learner_weights(treatment, cov, opts),
    }
}

fn check_weights(treatment: &Treatment, weights: &WeightSet, n: usize) -> Result<()> {
    if treatment.values.len() != n || weights.weights.len() != n {
        return Err(Error::InvalidData("outcome, treatment and weights must have equal length".into()));
    }
    if weights.treatment != treatment.name {
        return Err(Error::InvalidData(format!(
            "weights were built for `{}`, not `{}`",
            weights.treatment, treatment.name
        )));
    }
    Ok(())
}

/// Weighted NB2 regression of counts on the treatment (and controls) with
/// a `ln(population)` offset; the estimate is the treatment coefficient with
/// an observation-level sandwich SE.
pub fn weighted_effect(
    outcome: &[f64],
    population: Option<&[f64]>,
    treatment: &Treatment,
    weights: &WeightSet,
    controls: &Covariates,
) -> Result<CausalEstimate> {
    let n = outcome.len();
    check_weights(treatment, weights, n)?;
    controls.check_rows(n)?;
    let mut names: Vec<&str> = vec![treatment.name.as_str()];
    names.extend(controls.names.iter().map(|s| s.as_str()));
    let mut cols = vec![treatment.values.clone()];
    cols.extend(controls.columns.iter().cloned());
    let offset = population.map(|p| p.iter().map(|v| v.ln()).collect());
    let design = DesignTable::from_columns(&names, &cols, outcome.to_vec(), offset)?.with_weights(weights.weights.clone())?;
    let fit = fit_nb_glm_with(
        &design,
        &FitOptions {
            robust_cluster: Some(ClusterLevel::Observation),
            ..FitOptions::default()
        },
    )?;
    if !fit.converged() {
        return Err(Error::NonConvergence {
            what: "weighted outcome regression".into(),
            detail: format!("{:?}", fit.convergence),
        });
    }
    let estimate = fit.coefficients[1];
    let se = fit.robust_se[1];
    let z = estimate / se;
    Ok(CausalEstimate {
        method: weights.method.name().to_string(),
        treatment: treatment.name.clone(),
        estimate,
        se,
        z,
        p: normal_p_value(z),
    })
}

/// Weighted least squares of a continuous outcome on the treatment (and
/// controls) with an HC1 sandwich SE. With a binary treatment and no
/// controls this is the weighted difference in means.
pub fn weighted_linear_effect(
    outcome: &[f64],
    treatment: &Treatment,
    weights: &WeightSet,
    controls: &Covariates,
) -> Result<CausalEstimate> {
    let n = outcome.len();
    check_weights(treatment, weights, n)?;
    controls.check_rows(n)?;
    let mut cols = vec![treatment.values.clone()];
    cols.extend(controls.columns.iter().cloned());
    let x = with_intercept(&cols, n);
    let k = x.ncols();
    let w = &weights.weights;
    let mut xtwx = DMatrix::zeros(k, k);
    let mut xtwy = DVector::zeros(k);
    for i in 0..n {
        let row = x.row(i);
        for r in 0..k {
            xtwy[r] += w[i] * row[r] * outcome[i];
            for c in 0..k {
                xtwx[(r, c)] += w[i] * row[r] * row[c];
            }
        }
    }
    let bread = spd_inverse(&xtwx).ok_or_else(|| Error::RankDeficient {
        columns: vec![treatment.name.clone()],
    })?;
    let beta = &bread * xtwy;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = x.row(i).transpose();
        let e = outcome[i] - (x.row(i) * &beta)[0];
        meat += &row * row.transpose() * (w[i] * e).powi(2);
    }
    let v = &bread * meat * &bread * (n as f64 / (n - k) as f64);
    let estimate = beta[1];
    let se = v[(1, 1)].sqrt();
    let z = estimate / se;
    Ok(CausalEstimate {
        method: weights.method.name().to_string(),
        treatment: treatment.name.clone(),
        estimate,
        se,
        z,
        p: normal_p_value(z),
    })
}
