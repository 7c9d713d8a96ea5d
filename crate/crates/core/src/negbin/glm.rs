//! Fixed-effects NB2 regression by alternating IRLS (for the coefficients)
//! and Newton steps (for `ln alpha`).

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::likelihood::{eta_terms, full_terms, k_sums, KSums};
use super::linalg::{check_rank, column_scales, normal_p_value, scale_columns, spd_inverse};
use super::{
    check_outcome, cluster_ids, ClusterLevel, Convergence, FitOptions, FitResult, FitStatus, ModelKind,
    LN_ALPHA_MAX, LN_ALPHA_MIN,
};
use crate::design::DesignTable;
use crate::error::{Error, Result};

/// Working copy of a design in scaled coordinates.
pub(crate) struct Problem {
    pub z: DMatrix<f64>,
    pub scales: Vec<f64>,
    pub y: Vec<f64>,
    pub y_int: Vec<u64>,
    pub lgy: Vec<f64>,
    pub offset: Vec<f64>,
    pub w: Vec<f64>,
}

impl Problem {
    pub fn new(design: &DesignTable) -> Problem {
        let scales = column_scales(&design.x);
        let y_int = design.y.iter().map(|y| *y as u64).collect();
        Problem {
            z: scale_columns(&design.x, &scales),
            scales,
            lgy: design.y.iter().map(|y| ln_gamma(y + 1.0)).collect(),
            y: design.y.clone(),
            y_int,
            offset: design.offset.clone(),
            w: design.weights.clone().unwrap_or_else(|| vec![1.0; design.n_rows()]),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn eta(&self, beta: &DVector<f64>) -> Vec<f64> {
        let lin = &self.z * beta;
        lin.iter().zip(&self.offset).map(|(l, o)| l + o).collect()
    }

    pub fn sums(&self, ln_alpha: f64) -> Vec<KSums> {
        let alpha = ln_alpha.exp();
        self.y_int.iter().map(|&y| k_sums(y, alpha)).collect()
    }

    pub fn loglik(&self, eta: &[f64], ln_alpha: f64, sums: &[KSums]) -> f64 {
        let alpha = ln_alpha.exp();
        (0..self.n())
            .map(|i| self.w[i] * (sums[i].s0 + eta_terms(self.y[i], eta[i], alpha).ll_eta - self.lgy[i]))
            .sum()
    }

    /// Coefficients in original units from scaled ones.
    pub fn unscale(&self, beta_z: &DVector<f64>) -> Vec<f64> {
        beta_z.iter().zip(&self.scales).map(|(b, s)| b / s).collect()
    }
}

fn weighted_normal_equations(p: &Problem, weights: &[f64], rhs: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let k = p.z.ncols();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for i in 0..p.n() {
        let row = p.z.row(i);
        for r in 0..k {
            let zr = row[r] * weights[i];
            b[r] += zr * rhs[i];
            for c in 0..=r {
                a[(r, c)] += zr * row[c];
            }
        }
    }
    for r in 0..k {
        for c in 0..r {
            a[(c, r)] = a[(r, c)];
        }
    }
    (a, b)
}

/// Newton/IRLS for the coefficients with `alpha` held fixed (`alpha = 0`
/// gives the Poisson fit). Returns the new coefficients.
fn fit_beta(p: &Problem, mut beta: DVector<f64>, alpha: f64, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let objective = |eta: &[f64]| -> f64 {
        (0..p.n())
            .map(|i| p.w[i] * eta_terms(p.y[i], eta[i], alpha).ll_eta)
            .sum()
    };
    let mut eta = p.eta(&beta);
    let mut obj = objective(&eta);
    for _ in 0..max_iter {
        let mut wts = vec![0.0; p.n()];
        let mut score = vec![0.0; p.n()];
        for i in 0..p.n() {
            let t = eta_terms(p.y[i], eta[i], alpha);
            wts[i] = p.w[i] * t.w_obs;
            score[i] = p.w[i] * t.score;
        }
        let (info, _) = weighted_normal_equations(p, &wts, &score);
        let grad = p.z.transpose() * DVector::from_vec(score);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => spd_inverse(&info)
                .ok_or_else(|| Error::InvalidData("singular information matrix in coefficient update".into()))?
                * &grad,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &step * t;
            let eta_t = p.eta(&trial);
            let obj_t = objective(&eta_t);
            if obj_t.is_finite() && obj_t >= obj - 1e-12 * obj.abs() {
                beta = trial;
                eta = eta_t;
                obj = obj_t;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let change = (step.amax()) * t;
        if !accepted || change < tol {
            break;
        }
    }
    Ok(beta)
}

/// One-dimensional Newton ascent in `ln alpha` with the linear predictor fixed.
fn fit_ln_alpha(p: &Problem, eta: &[f64], mut a: f64, tol: f64) -> f64 {
    let value_and_derivs = |a: f64| -> (f64, f64, f64) {
        let sums = p.sums(a);
        let mut v = 0.0;
        let mut d = 0.0;
        let mut d2 = 0.0;
        for i in 0..p.n() {
            let t = full_terms(p.y[i], eta[i], a, &sums[i], p.lgy[i]);
            v += p.w[i] * t.ll;
            d += p.w[i] * t.d_a;
            d2 += p.w[i] * t.d2_a;
        }
        (v, d, d2)
    };
    let (mut v, mut d, mut d2) = value_and_derivs(a);
    for _ in 0..100 {
        if (a <= LN_ALPHA_MIN && d <= 0.0) || (a >= LN_ALPHA_MAX && d >= 0.0) {
            break;
        }
        let raw = if d2 < 0.0 { -d / d2 } else { d.signum() };
        let step = raw.clamp(-5.0, 5.0);
        let mut t = 1.0;
        let mut moved = None;
        for _ in 0..50 {
            let trial = (a + step * t).clamp(LN_ALPHA_MIN, LN_ALPHA_MAX);
            let (vt, dt, d2t) = value_and_derivs(trial);
            if vt.is_finite() && vt >= v - 1e-13 * v.abs() {
                moved = Some((trial, vt, dt, d2t));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, vt, dt, d2t)) = moved else {
            break;
        };
        let change = (trial - a).abs();
        a = trial;
        v = vt;
        d = dt;
        d2 = d2t;
        if change < tol {
            break;
        }
    }
    a
}

fn poisson_start(p: &Problem) -> Result<DVector<f64>> {
    let target: Vec<f64> = (0..p.n()).map(|i| (p.y[i] + 0.5).ln() - p.offset[i]).collect();
    let wts: Vec<f64> = (0..p.n()).map(|i| p.w[i] * (p.y[i] + 0.5)).collect();
    let (a, b) = weighted_normal_equations(p, &wts, &target);
    let beta0 = spd_inverse(&a)
        .ok_or_else(|| Error::InvalidData("singular design in starting values".into()))?
        * b;
    fit_beta(p, beta0, 0.0, 1e-10, 100)
}

/// Observed information for `(beta_z, ln alpha)`, or for `beta_z` alone when
/// `with_alpha` is false.
fn information(p: &Problem, beta: &DVector<f64>, a: f64, with_alpha: bool) -> DMatrix<f64> {
    let k = p.z.ncols();
    let dim = if with_alpha { k + 1 } else { k };
    let eta = p.eta(beta);
    let sums = p.sums(a);
    let mut info = DMatrix::zeros(dim, dim);
    for i in 0..p.n() {
        let t = full_terms(p.y[i], eta[i], a, &sums[i], p.lgy[i]);
        let row = p.z.row(i);
        for r in 0..k {
            for c in 0..k {
                info[(r, c)] += p.w[i] * t.eta.w_obs * row[r] * row[c];
            }
            if with_alpha {
                info[(r, k)] -= p.w[i] * t.d_eta_a * row[r];
            }
        }
        if with_alpha {
            info[(k, k)] -= p.w[i] * t.d2_a;
        }
    }
    if with_alpha {
        for r in 0..k {
            info[(k, r)] = info[(r, k)];
        }
    }
    info
}

/// Per-observation scores for `(beta_z, ln alpha)` (or `beta_z` alone).
fn row_scores(p: &Problem, beta: &DVector<f64>, a: f64, with_alpha: bool) -> Vec<DVector<f64>> {
    let k = p.z.ncols();
    let eta = p.eta(beta);
    let sums = p.sums(a);
    (0..p.n())
        .map(|i| {
            let t = full_terms(p.y[i], eta[i], a, &sums[i], p.lgy[i]);
            let mut s = DVector::zeros(if with_alpha { k + 1 } else { k });
            for r in 0..k {
                s[r] = p.w[i] * t.eta.score * p.z[(i, r)];
            }
            if with_alpha {
                s[k] = p.w[i] * t.d_a;
            }
            s
        })
        .collect()
}

fn sandwich_scaled(p: &Problem, beta: &DVector<f64>, a: f64, with_alpha: bool, clusters: &[usize]) -> Result<DMatrix<f64>> {
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let scores = row_scores(p, beta, a, with_alpha);
    let dim = scores.first().map_or(0, |s| s.len());
    let mut sums = vec![DVector::<f64>::zeros(dim); n_clusters];
    for (i, s) in scores.iter().enumerate() {
        sums[clusters[i]] += s;
    }
    let used: Vec<&DVector<f64>> = {
        let mut seen = vec![false; n_clusters];
        for &c in clusters {
            seen[c] = true;
        }
        sums.iter().enumerate().filter(|(c, _)| seen[*c]).map(|(_, s)| s).collect()
    };
    let g = used.len();
    if g < 2 {
        return Err(Error::InvalidData(format!("robust standard errors need at least 2 clusters, found {g}")));
    }
    let mut meat = DMatrix::zeros(dim, dim);
    for s in used {
        meat += s * s.transpose();
    }
    meat *= g as f64 / (g as f64 - 1.0);
    let bread = spd_inverse(&information(p, beta, a, with_alpha))
        .ok_or_else(|| Error::InvalidData("singular information matrix".into()))?;
    Ok(&bread * meat * &bread)
}

fn default_cluster(design: &DesignTable) -> ClusterLevel {
    let mut groups = design.group.clone();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() >= 2 {
        ClusterLevel::Group
    } else {
        ClusterLevel::Observation
    }
}

/// Fits the fixed-effects NB2 model.
pub fn fit_nb_glm_with(design: &DesignTable, opts: &FitOptions) -> Result<FitResult> {
    check_outcome(design)?;
    check_rank(&design.x, &design.columns)?;
    let p = Problem::new(design);
    let k = p.z.ncols();

    let mut beta = poisson_start(&p)?;
    let mut a = opts.init_ln_alpha.clamp(LN_ALPHA_MIN, LN_ALPHA_MAX);
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let alpha = a.exp();
        let beta_new = fit_beta(&p, beta.clone(), alpha, opts.param_tol * 1e-2, 100)?;
        let eta = p.eta(&beta_new);
        let a_new = fit_ln_alpha(&p, &eta, a, opts.param_tol * 1e-2);
        let change = (&beta_new - &beta).amax().max((a_new - a).abs());
        beta = beta_new;
        a = a_new;
        if change < opts.param_tol {
            status = FitStatus::Converged;
            break;
        }
    }

    let alpha_boundary = a <= LN_ALPHA_MIN + 1e-9;
    let with_alpha = !alpha_boundary;
    let eta = p.eta(&beta);
    let sums = p.sums(a);
    let loglik = p.loglik(&eta, a, &sums);
    let grad: DVector<f64> = row_scores(&p, &beta, a, true).iter().fold(DVector::zeros(k + 1), |acc, s| acc + s);
    let gradient_norm = if with_alpha { grad.amax() } else { grad.rows(0, k).amax() };

    let info = information(&p, &beta, a, with_alpha);
    let cov = spd_inverse(&info).ok_or_else(|| Error::InvalidData("singular information matrix at the optimum".into()))?;
    let coefficients = p.unscale(&beta);
    let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].sqrt() / p.scales[j]).collect();
    let ln_alpha_se = with_alpha.then(|| cov[(k, k)].sqrt());

    let cluster = opts.robust_cluster.unwrap_or_else(|| default_cluster(design));
    let robust_se = match sandwich_scaled(&p, &beta, a, with_alpha, &cluster_ids(design, cluster)) {
        Ok(v) => (0..k).map(|j| v[(j, j)].sqrt() / p.scales[j]).collect(),
        Err(_) => vec![f64::NAN; k],
    };
    let z: Vec<f64> = coefficients.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pv = z.iter().map(|z| normal_p_value(*z)).collect();
    let mut notes = Vec::new();
    if alpha_boundary {
        notes.push("ln_alpha at lower bound; data show no overdispersion".to_string());
    }
    Ok(FitResult {
        kind: ModelKind::Glm,
        terms: design.columns.clone(),
        coefficients,
        se,
        robust_se,
        robust_cluster: cluster,
        z,
        p: pv,
        ln_alpha: a,
        ln_alpha_se,
        alpha_boundary,
        variance_components: vec![],
        loglik,
        mu: eta.iter().map(|e| e.exp()).collect(),
        group_effects: vec![],
        region_effects: vec![],
        n_obs: design.n_rows(),
        convergence: Convergence {
            iterations,
            gradient_norm,
            status,
            notes,
        },
    })
}

pub(crate) fn robust_se(fit: &FitResult, design: &DesignTable, level: ClusterLevel) -> Result<Vec<f64>> {
    if design.columns != fit.terms {
        return Err(Error::InvalidData("design columns do not match the fit".into()));
    }
    let p = Problem::new(design);
    let beta = DVector::from_iterator(
        fit.coefficients.len(),
        fit.coefficients.iter().zip(&p.scales).map(|(b, s)| b * s),
    );
    let v = sandwich_scaled(&p, &beta, fit.ln_alpha, !fit.alpha_boundary, &cluster_ids(design, level))?;
    Ok((0..beta.len()).map(|j| v[(j, j)].sqrt() / p.scales[j]).collect())
}

/// NB2 log-likelihood of `design` at coefficients `beta` (original units).
pub fn nb_loglik(design: &DesignTable, beta: &[f64], ln_alpha: f64) -> f64 {
    let p = Problem::new(design);
    let bz = DVector::from_iterator(beta.len(), beta.iter().zip(&p.scales).map(|(b, s)| b * s));
    p.loglik(&p.eta(&bz), ln_alpha, &p.sums(ln_alpha))
}

/// Analytic gradient of [`nb_loglik`] in `(beta, ln alpha)`.
pub fn nb_score(design: &DesignTable, beta: &[f64], ln_alpha: f64) -> Vec<f64> {
    let p = Problem::new(design);
    let bz = DVector::from_iterator(beta.len(), beta.iter().zip(&p.scales).map(|(b, s)| b * s));
    let total = row_scores(&p, &bz, ln_alpha, true)
        .iter()
        .fold(DVector::zeros(beta.len() + 1), |acc, s| acc + s);
    let mut out: Vec<f64> = (0..beta.len()).map(|j| total[j] * p.scales[j]).collect();
    out.push(total[beta.len()]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Poisson};

    fn nb_draw(rng: &mut ChaCha8Rng, mu: f64, alpha: f64) -> f64 {
        let lambda = if alpha > 0.0 {
            Gamma::new(1.0 / alpha, alpha * mu).unwrap().sample(rng)
        } else {
            mu
        };
        if lambda <= 0.0 {
            0.0
        } else {
            Poisson::new(lambda).unwrap().sample(rng)
        }
    }

    fn simulate(n: usize, alpha: f64, seed: u64) -> DesignTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let off: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let y = (0..n).map(|i| nb_draw(&mut rng, (0.5 + 1.2 * x[i] + off[i]).exp(), alpha)).collect();
        DesignTable::from_columns(&["x"], &[x], y, Some(off)).unwrap()
    }

    #[test]
    fn intercept_only_closed_form() {
        let d = DesignTable::from_columns(&[], &[], vec![5.0; 12], Some(vec![1000f64.ln(); 12])).unwrap();
        let fit = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        assert!(fit.converged());
        assert!((fit.coefficients[0] - (0.005f64).ln()).abs() < 1e-6);
        assert!(fit.alpha_boundary);
    }

    #[test]
    fn recovers_simulated_parameters() {
        let d = simulate(5000, 0.8, 11);
        let fit = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        assert!(fit.converged());
        for (j, truth) in [0.5, 1.2].iter().enumerate() {
            assert!((fit.coefficients[j] - truth).abs() < 3.0 * fit.se[j], "{j}: {fit:?}");
        }
        assert!((fit.ln_alpha - 0.8f64.ln()).abs() < 3.0 * fit.ln_alpha_se.unwrap());
        let ratio = fit.robust_se[1] / fit.se[1];
        assert!((ratio - 1.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn duplicate_column_is_rank_error() {
        let x = vec![0.1, 0.5, 0.9, 1.3];
        let d = DesignTable::from_columns(&["x", "x2"], &[x.clone(), x], vec![1.0, 2.0, 0.0, 4.0], None).unwrap();
        match fit_nb_glm_with(&d, &FitOptions::default()) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["x", "x2"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_zero_outcome_errors() {
        let d = DesignTable::from_columns(&[], &[], vec![0.0; 4], None).unwrap();
        assert!(fit_nb_glm_with(&d, &FitOptions::default()).is_err());
    }

    #[test]
    fn score_matches_finite_differences() {
        let d = simulate(200, 0.5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let beta = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..2.0)];
            let a = rng.random_range(-3.0..1.0);
            let g = nb_score(&d, &beta, a);
            let h = 1e-6;
            for j in 0..3 {
                let mut bp = beta;
                let mut bm = beta;
                let (mut ap, mut am) = (a, a);
                if j < 2 {
                    bp[j] += h;
                    bm[j] -= h;
                } else {
                    ap += h;
                    am -= h;
                }
                let fd = (nb_loglik(&d, &bp, ap) - nb_loglik(&d, &bm, am)) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn offset_scaling_shifts_intercept_only() {
        let d = simulate(800, 0.6, 4);
        let c: f64 = 37.0;
        let shifted = DesignTable {
            offset: d.offset.iter().map(|o| o + c.ln()).collect(),
            ..d.clone()
        };
        let f1 = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        let f2 = fit_nb_glm_with(&shifted, &FitOptions::default()).unwrap();
        assert!((f2.coefficients[0] - (f1.coefficients[0] - c.ln())).abs() < 1e-6);
        assert!((f2.coefficients[1] - f1.coefficients[1]).abs() < 1e-6);
    }

    #[test]
    fn poisson_data_matches_poisson_fit() {
        let d = simulate(2000, 0.0, 8);
        let fit = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        let p = Problem::new(&d);
        let pois = poisson_start(&p).unwrap();
        let pois = p.unscale(&pois);
        for j in 0..2 {
            assert!((fit.coefficients[j] - pois[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn one_cluster_per_row_matches_dense_oracle() {
        let d = simulate(300, 0.7, 5);
        let fit = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        let got = robust_se(&fit, &d, ClusterLevel::Observation).unwrap();
        // oracle in original units over (b0, b1, ln alpha)
        let (alpha, a) = (fit.ln_alpha.exp(), fit.ln_alpha);
        let n = d.n_rows();
        let mut bread = DMatrix::<f64>::zeros(3, 3);
        let mut meat = DMatrix::<f64>::zeros(3, 3);
        let h = 1e-5;
        for i in 0..n {
            let xi = [1.0, d.x[(i, 1)]];
            let y = d.y[i];
            let row_ll = |b0: f64, b1: f64, la: f64| {
                let mu = (b0 * xi[0] + b1 * xi[1] + d.offset[i]).exp();
                super::super::likelihood::loglik_reference(y, mu, la.exp())
            };
            let th = [fit.coefficients[0], fit.coefficients[1], a];
            let f = |t: [f64; 3]| row_ll(t[0], t[1], t[2]);
            let mut s = [0.0; 3];
            for j in 0..3 {
                let mut tp = th;
                let mut tm = th;
                tp[j] += h;
                tm[j] -= h;
                s[j] = (f(tp) - f(tm)) / (2.0 * h);
            }
            let mu = (th[0] + th[1] * xi[1] + d.offset[i]).exp();
            let w = mu * (1.0 + alpha * y) / (1.0 + alpha * mu).powi(2);
            for r in 0..2 {
                for c in 0..2 {
                    bread[(r, c)] += w * xi[r] * xi[c];
                }
                bread[(r, 2)] += alpha * mu * (y - mu) / (1.0 + alpha * mu).powi(2) * xi[r];
            }
            let mut tp = th;
            let mut tm = th;
            tp[2] += h;
            tm[2] -= h;
            bread[(2, 2)] -= (f(tp) - 2.0 * f(th) + f(tm)) / (h * h);
            for r in 0..3 {
                for c in 0..3 {
                    meat[(r, c)] += s[r] * s[c];
                }
            }
        }
        for r in 0..2 {
            bread[(2, r)] = bread[(r, 2)];
        }
        let binv = bread.try_inverse().unwrap();
        let v = &binv * meat * &binv * (n as f64 / (n as f64 - 1.0));
        for j in 0..2 {
            let want = v[(j, j)].sqrt();
            assert!((got[j] - want).abs() < 1e-4 * want, "{j}: {} vs {want}", got[j]);
        }
    }

    #[test]
    fn duplicated_rows_leave_estimates_unchanged() {
        let d = simulate(300, 0.5, 6);
        let n = d.n_rows();
        let x: Vec<f64> = (0..2 * n).map(|i| d.x[(i % n, 1)]).collect();
        let y: Vec<f64> = (0..2 * n).map(|i| d.y[i % n]).collect();
        let off: Vec<f64> = (0..2 * n).map(|i| d.offset[i % n]).collect();
        let doubled = DesignTable::from_columns(&["x"], &[x], y, Some(off))
            .unwrap()
            .with_groups((0..2 * n).map(|i| i % n).collect())
            .unwrap();
        let f1 = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        let f2 = fit_nb_glm_with(&doubled, &FitOptions::default()).unwrap();
        for j in 0..2 {
            assert!((f1.coefficients[j] - f2.coefficients[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn uniform_weights_equal_unweighted() {
        let d = simulate(300, 0.5, 7);
        let w = d.clone().with_weights(vec![1.0; d.n_rows()]).unwrap();
        let f1 = fit_nb_glm_with(&d, &FitOptions::default()).unwrap();
        let f2 = fit_nb_glm_with(&w, &FitOptions::default()).unwrap();
        assert_eq!(f1.coefficients, f2.coefficients);
    }

    #[test]
    fn deterministic() {
        let d = simulate(500, 0.5, 10);
        assert_eq!(
            fit_nb_glm_with(&d, &FitOptions::default()).unwrap(),
            fit_nb_glm_with(&d, &FitOptions::default()).unwrap()
        );
    }
}
