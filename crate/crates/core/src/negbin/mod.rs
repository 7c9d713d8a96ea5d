//! Negative binomial (NB2) count models: a fixed-effects GLM and a nested
//! random-intercept GLMM fitted by the Laplace approximation.

mod glm;
pub mod likelihood;
pub(crate) mod linalg;
mod mixed;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::{DesignTable, RandomLevel};
use crate::error::{Error, Result};

pub use glm::{fit_nb_glm_with, nb_loglik, nb_score};
pub use linalg::normal_p_value;
pub use mixed::{fit_nb_mixed_with, laplace_loglik};

/// Lower and upper bounds on `ln alpha`; sitting on the lower one is
/// reported as a dispersion boundary fit.
pub const LN_ALPHA_MIN: f64 = -20.0;
pub const LN_ALPHA_MAX: f64 = 10.0;

/// Grouping used to form clusters for the sandwich estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLevel {
    Observation,
    Group,
    Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute parameter change (GLM).
    pub param_tol: f64,
    /// Convergence threshold on the outer gradient ∞-norm (mixed model).
    pub grad_tol: f64,
    pub init_ln_alpha: f64,
    pub init_ln_sigma2: f64,
    /// `None` picks the top nesting level when it has at least two clusters,
    /// otherwise one cluster per observation.
    pub robust_cluster: Option<ClusterLevel>,
    pub parallel: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            param_tol: 1e-8,
            grad_tol: 1e-6,
            init_ln_alpha: 0.5f64.ln(),
            init_ln_sigma2: 0.1f64.ln(),
            robust_cluster: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// Line search could not improve the objective before the tolerance was met.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: FitStatus,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub level: RandomLevel,
    pub sigma2: f64,
    pub se: Option<f64>,
    /// Estimate sits at zero (the level was dropped or collapsed).
    pub boundary: bool,
    /// False when the level cannot be separated from the intercept.
    pub identified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Glm,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: ModelKind,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub robust_cluster: ClusterLevel,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub ln_alpha: f64,
    /// `None` when `ln alpha` sits on its lower bound.
    pub ln_alpha_se: Option<f64>,
    pub alpha_boundary: bool,
    pub variance_components: Vec<VarianceComponent>,
    pub loglik: f64,
    /// In-fit means, including estimated random-effect modes for mixed fits.
    pub mu: Vec<f64>,
    /// Random-effect modes per group label index (empty when not modelled).
    pub group_effects: Vec<f64>,
    /// Random-effect modes per region label index (empty when not modelled).
    pub region_effects: Vec<f64>,
    pub n_obs: usize,
    pub convergence: Convergence,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.convergence.status == FitStatus::Converged
    }

    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|j| self.coefficients[j])
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn variance_component(&self, level: RandomLevel) -> Option<&VarianceComponent> {
        self.variance_components.iter().find(|v| v.level == level)
    }

    /// `term,beta,se,robust_se,z,p` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("term,beta,se,robust_se,z,p\n");
        for j in 0..self.terms.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.terms[j], self.coefficients[j], self.se[j], self.robust_se[j], self.z[j], self.p[j]
            );
        }
        s
    }

    pub fn summary_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Which linear predictor [`predict_mu`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    /// `exp(x'b + offset)`, random effects set to zero.
    FixedOnly,
    /// Adds the estimated group/region modes; only meaningful in-fit.
    Conditional,
}

/// Means for `design` under `fit`.
pub fn predict_mu(fit: &FitResult, design: &DesignTable, which: Prediction) -> Result<Vec<f64>> {
    if design.columns != fit.terms {
        return Err(Error::InvalidData(format!(
            "design columns [{}] do not match fitted terms [{}]",
            design.columns.join(", "),
            fit.terms.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(design.n_rows());
    for i in 0..design.n_rows() {
        let mut eta = design.offset[i];
        for j in 0..design.n_cols() {
            eta += design.x[(i, j)] * fit.coefficients[j];
        }
        if which == Prediction::Conditional {
            if let Some(u) = fit.group_effects.get(design.group[i]) {
                eta += u;
            }
            if let Some(v) = fit.region_effects.get(design.region[i]) {
                eta += v;
            }
        }
        out.push(eta.exp());
    }
    Ok(out)
}

/// Fixed-effects NB2 regression with default options.
pub fn fit_nb_glm(design: &DesignTable) -> Result<FitResult> {
    fit_nb_glm_with(design, &FitOptions::default())
}

/// Nested random-intercept NB2 model with default options.
pub fn fit_nb_mixed(design: &DesignTable, levels: &[RandomLevel]) -> Result<FitResult> {
    fit_nb_mixed_with(design, levels, &FitOptions::default())
}

/// Cluster-robust standard errors for the coefficients of `fit`.
///
/// For GLM fits any level is allowed. Mixed fits can only be clustered at the
/// top modelled level, since the marginal likelihood does not split below it.
pub fn robust_se(fit: &FitResult, design: &DesignTable, level: ClusterLevel) -> Result<Vec<f64>> {
    match fit.kind {
        ModelKind::Glm => glm::robust_se(fit, design, level),
        ModelKind::Mixed => mixed::robust_se(fit, design, level),
    }
}

/// Cluster id per row.
pub(crate) fn cluster_ids(design: &DesignTable, level: ClusterLevel) -> Vec<usize> {
    match level {
        ClusterLevel::Observation => (0..design.n_rows()).collect(),
        ClusterLevel::Group => design.group.clone(),
        ClusterLevel::Region => design.region.clone(),
    }
}

/// Checks the outcome is a usable count vector.
pub(crate) fn check_outcome(design: &DesignTable) -> Result<()> {
    design.validate()?;
    if design.n_rows() == 0 {
        return Err(Error::InvalidData("empty design".into()));
    }
    if design.y.iter().any(|y| *y < 0.0 || y.fract() != 0.0) {
        return Err(Error::InvalidData("outcome must be nonnegative integer counts".into()));
    }
    let weighted_positive = design
        .y
        .iter()
        .enumerate()
        .any(|(i, y)| *y > 0.0 && design.weights.as_ref().is_none_or(|w| w[i] > 0.0));
    if !weighted_positive {
        return Err(Error::InvalidData("outcome is zero for every observation".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_fit(coefficients: Vec<f64>, terms: &[&str]) -> FitResult {
        let k = coefficients.len();
        FitResult {
            kind: ModelKind::Glm,
            terms: terms.iter().map(|s| s.to_string()).collect(),
            coefficients,
            se: vec![1.0; k],
            robust_se: vec![1.0; k],
            robust_cluster: ClusterLevel::Observation,
            z: vec![0.0; k],
            p: vec![1.0; k],
            ln_alpha: 0.0,
            ln_alpha_se: None,
            alpha_boundary: false,
            variance_components: vec![],
            loglik: 0.0,
            mu: vec![],
            group_effects: vec![],
            region_effects: vec![],
            n_obs: 0,
            convergence: Convergence {
                iterations: 0,
                gradient_norm: 0.0,
                status: FitStatus::Converged,
                notes: vec![],
            },
        }
    }

    #[test]
    fn zero_coefficients_give_population() {
        let d = DesignTable::from_columns(&["x"], &[vec![0.3, -1.0]], vec![1.0, 2.0], Some(vec![1000f64.ln(); 2])).unwrap();
        let mu = predict_mu(&toy_fit(vec![0.0, 0.0], &["intercept", "x"]), &d, Prediction::FixedOnly).unwrap();
        assert!(mu.iter().all(|m| (m - 1000.0).abs() < 1e-9));
    }

    #[test]
    fn hand_linear_predictor() {
        let d = DesignTable::from_columns(&[], &[], vec![1.0], None).unwrap();
        let mu = predict_mu(&toy_fit(vec![0.5], &["intercept"]), &d, Prediction::FixedOnly).unwrap();
        assert!((mu[0] - 1.6487212707001282).abs() < 1e-12);
    }

    #[test]
    fn matches_row_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 17;
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let off: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let d = DesignTable::from_columns(&["a", "b", "c"], &cols, vec![1.0; n], Some(off.clone())).unwrap();
        let beta = vec![0.1, -0.4, 0.25, 0.9];
        let fit = toy_fit(beta.clone(), &["intercept", "a", "b", "c"]);
        let mu = predict_mu(&fit, &d, Prediction::FixedOnly).unwrap();
        for i in 0..n {
            let eta = beta[0] + beta[1] * cols[0][i] + beta[2] * cols[1][i] + beta[3] * cols[2][i] + off[i];
            assert!((mu[i] - eta.exp()).abs() <= 1e-12 * eta.exp());
        }
    }

    #[test]
    fn column_mismatch_errors() {
        let d = DesignTable::from_columns(&["x"], &[vec![1.0]], vec![1.0], None).unwrap();
        assert!(predict_mu(&toy_fit(vec![0.0, 0.0], &["intercept", "z"]), &d, Prediction::FixedOnly).is_err());
    }

    #[test]
    fn summary_csv_layout() {
        let fit = toy_fit(vec![0.5], &["intercept"]);
        assert_eq!(fit.summary_csv(), "term,beta,se,robust_se,z,p\nintercept,0.5,1,1,0,1\n");
    }
}
