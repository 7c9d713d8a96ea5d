//! Nested random-intercept NB2 model. The marginal likelihood is
//! approximated cluster by cluster with the Laplace method; the outer
//! problem is solved by BFGS on an analytic gradient.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::glm::{fit_nb_glm_with, Problem};
use super::likelihood::{eta_terms, full_terms, KSums};
use super::linalg::{check_rank, normal_p_value, spd_inverse};
use super::{
    check_outcome, ClusterLevel, Convergence, FitOptions, FitResult, FitStatus, ModelKind, VarianceComponent,
    LN_ALPHA_MAX, LN_ALPHA_MIN,
};
use crate::design::{DesignTable, RandomLevel};
use crate::error::{Error, Result};
use crate::optim::{bfgs, BfgsOptions};

/// Variances below this after the fit trigger a refit without the level.
const COLLAPSE_SIGMA2: f64 = 1e-4;
/// Smallest representable variance during optimization.
const LN_SIGMA2_MIN: f64 = -23.0;
const LN_SIGMA2_MAX: f64 = 5.0;
const INNER_TOL: f64 = 1e-10;

/// Which random intercepts are active. `top` indexes clusters; `nested`
/// adds region intercepts inside group clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    top: RandomLevel,
    nested: bool,
}

impl Layout {
    fn from_levels(levels: &[RandomLevel]) -> Option<Layout> {
        match levels {
            [] => None,
            [l] => Some(Layout { top: *l, nested: false }),
            _ => Some(Layout {
                top: RandomLevel::Group,
                nested: true,
            }),
        }
    }

    fn levels(&self) -> Vec<RandomLevel> {
        if self.nested {
            vec![RandomLevel::Group, RandomLevel::Region]
        } else {
            vec![self.top]
        }
    }

    fn n_tau(&self) -> usize {
        if self.nested {
            2
        } else {
            1
        }
    }
}

struct Cluster {
    rows: Vec<usize>,
    /// Sub-unit index (into `sub_ids`) per row; empty when not nested.
    sub_of_row: Vec<usize>,
    sub_ids: Vec<usize>,
    top_id: usize,
}

fn build_clusters(design: &DesignTable, layout: Layout) -> Result<Vec<Cluster>> {
    let top_ids = match layout.top {
        RandomLevel::Group => &design.group,
        RandomLevel::Region => &design.region,
    };
    let n_top = top_ids.iter().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Cluster> = (0..n_top)
        .map(|t| Cluster {
            rows: vec![],
            sub_of_row: vec![],
            sub_ids: vec![],
            top_id: t,
        })
        .collect();
    let mut region_group: Vec<Option<usize>> = vec![None; design.region.iter().max().map_or(0, |m| m + 1)];
    for i in 0..design.n_rows() {
        let c = &mut clusters[top_ids[i]];
        c.rows.push(i);
        if layout.nested {
            let r = design.region[i];
            match region_group[r] {
                Some(g) if g != design.group[i] => {
                    return Err(Error::InvalidData(format!(
                        "region `{}` appears in more than one group; levels are not nested",
                        design.region_labels[r]
                    )))
                }
                _ => region_group[r] = Some(design.group[i]),
            }
            let pos = match c.sub_ids.iter().position(|s| *s == r) {
                Some(p) => p,
                None => {
                    c.sub_ids.push(r);
                    c.sub_ids.len() - 1
                }
            };
            c.sub_of_row.push(pos);
        }
    }
    clusters.retain(|c| !c.rows.is_empty());
    Ok(clusters)
}

/// Arrowhead negative Hessian of one cluster's inner objective.
struct Arrow {
    hus: Vec<f64>,
    hss: Vec<f64>,
    schur: f64,
}

impl Arrow {
    fn new(huu: f64, hus: Vec<f64>, hss: Vec<f64>) -> Arrow {
        let schur = huu - hus.iter().zip(&hss).map(|(a, b)| a * a / b).sum::<f64>();
        Arrow { hus, hss, schur }
    }

    fn solve(&self, ru: f64, rs: &[f64]) -> (f64, Vec<f64>) {
        let adj: f64 = self.hus.iter().zip(&self.hss).zip(rs).map(|((h, d), r)| h * r / d).sum();
        let du = (ru - adj) / self.schur;
        let ds = rs
            .iter()
            .zip(&self.hus)
            .zip(&self.hss)
            .map(|((r, h), d)| (r - h * du) / d)
            .collect();
        (du, ds)
    }

    fn logdet(&self) -> f64 {
        self.schur.ln() + self.hss.iter().map(|d| d.ln()).sum::<f64>()
    }
}

struct ClusterEval {
    value: f64,
    grad: DVector<f64>,
    u: f64,
    v: Vec<f64>,
    inner_converged: bool,
}

struct Model {
    prob: Problem,
    clusters: Vec<Cluster>,
    layout: Layout,
    k: usize,
    parallel: bool,
}

impl Model {
    fn dim(&self) -> usize {
        self.k + 1 + self.layout.n_tau()
    }

    fn precisions(&self, theta: &DVector<f64>) -> (f64, f64) {
        let pu = (-theta[self.k + 1]).exp();
        let pv = if self.layout.nested { (-theta[self.k + 2]).exp() } else { 0.0 };
        (pu, pv)
    }

    /// Inner mode, Laplace value and (optionally) its gradient for one cluster.
    fn eval_cluster(&self, c: &Cluster, lin: &[f64], a: f64, pu: f64, pv: f64, sums: &[KSums], with_grad: bool) -> ClusterEval {
        let p = &self.prob;
        let alpha = a.exp();
        let m = c.sub_ids.len();
        let nested = self.layout.nested;
        let eta_at = |u: f64, v: &[f64], r: usize| -> f64 {
            let i = c.rows[r];
            lin[i] + u + if nested { v[c.sub_of_row[r]] } else { 0.0 }
        };
        let objective = |u: f64, v: &[f64]| -> f64 {
            let mut f = -0.5 * pu * u * u - 0.5 * pv * v.iter().map(|x| x * x).sum::<f64>();
            for r in 0..c.rows.len() {
                f += eta_terms(p.y[c.rows[r]], eta_at(u, v, r), alpha).ll_eta;
            }
            f
        };
        let hessian = |u: f64, v: &[f64]| -> (Arrow, f64, Vec<f64>) {
            let mut huu = pu;
            let mut hus = vec![0.0; m];
            let mut hss = vec![pv; m];
            let mut gu = -pu * u;
            let mut gs: Vec<f64> = v.iter().map(|x| -pv * x).collect();
            for r in 0..c.rows.len() {
                let t = eta_terms(p.y[c.rows[r]], eta_at(u, v, r), alpha);
                huu += t.w_obs;
                gu += t.score;
                if nested {
                    let s = c.sub_of_row[r];
                    hus[s] += t.w_obs;
                    hss[s] += t.w_obs;
                    gs[s] += t.score;
                }
            }
            (Arrow::new(huu, hus, hss), gu, gs)
        };

        let mut u = 0.0;
        let mut v = vec![0.0; m];
        let mut f = objective(u, &v);
        let mut inner_converged = false;
        for _ in 0..200 {
            let (h, gu, gs) = hessian(u, &v);
            let (du, ds) = h.solve(gu, &gs);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let un = u + t * du;
                let vn: Vec<f64> = v.iter().zip(&ds).map(|(x, d)| x + t * d).collect();
                let fnew = objective(un, &vn);
                if fnew.is_finite() && fnew >= f - 1e-14 * f.abs() {
                    u = un;
                    v = vn;
                    f = fnew;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            let size = ds.iter().fold(du.abs(), |acc, d| acc.max(d.abs())) * t;
            if size < INNER_TOL || !moved {
                inner_converged = size < INNER_TOL || moved;
                break;
            }
        }

        let (h, _, _) = hessian(u, &v);
        let mut ll = 0.0;
        let n_c = c.rows.len();
        let mut terms = Vec::with_capacity(n_c);
        for r in 0..n_c {
            let i = c.rows[r];
            let t = full_terms(p.y[i], eta_at(u, &v, r), a, &sums[i], p.lgy[i]);
            ll += t.ll;
            terms.push(t);
        }
        let sum_v2: f64 = v.iter().map(|x| x * x).sum();
        let mut value = ll - 0.5 * pu * u * u + 0.5 * pu.ln() - 0.5 * h.logdet();
        if nested {
            value += -0.5 * pv * sum_v2 + 0.5 * m as f64 * pv.ln();
        }
        let dim = self.dim();
        let mut grad = DVector::zeros(dim);
        if !with_grad {
            return ClusterEval {
                value,
                grad,
                u,
                v,
                inner_converged,
            };
        }

        // elements of the inverse Hessian needed for the trace term
        let huu_inv = 1.0 / h.schur;
        let hus_inv: Vec<f64> = (0..m).map(|s| -(h.hus[s] / h.hss[s]) / h.schur).collect();
        let hss_inv: Vec<f64> = (0..m)
            .map(|s| 1.0 / h.hss[s] + (h.hus[s] / h.hss[s]).powi(2) / h.schur)
            .collect();
        let q: Vec<f64> = (0..n_c)
            .map(|r| {
                if nested {
                    let s = c.sub_of_row[r];
                    huu_inv + 2.0 * hus_inv[s] + hss_inv[s]
                } else {
                    huu_inv
                }
            })
            .collect();
        let sub = |r: usize| if nested { Some(c.sub_of_row[r]) } else { None };

        // shared closure: given direct d(eta)/dtheta per row, extra dW and the
        // inner right-hand side, return the trace contribution
        let trace_for = |direct: &dyn Fn(usize) -> f64, extra_dw: &dyn Fn(usize) -> f64, ru: f64, rs: &[f64], prior: f64| -> f64 {
            let (dzu, dzs) = h.solve(ru, rs);
            let mut tr = prior;
            for r in 0..n_c {
                let deta = direct(r) + dzu + sub(r).map_or(0.0, |s| dzs[s]);
                tr += q[r] * (terms[r].dw_eta * deta + extra_dw(r));
            }
            tr
        };

        for j in 0..self.k {
            let mut partial = 0.0;
            let mut ru = 0.0;
            let mut rs = vec![0.0; m];
            for r in 0..n_c {
                let zij = p.z[(c.rows[r], j)];
                partial += terms[r].eta.score * zij;
                ru -= terms[r].eta.w_obs * zij;
                if let Some(s) = sub(r) {
                    rs[s] -= terms[r].eta.w_obs * zij;
                }
            }
            let tr = trace_for(&|r| p.z[(c.rows[r], j)], &|_| 0.0, ru, &rs, 0.0);
            grad[j] = partial - 0.5 * tr;
        }
        {
            let mut partial = 0.0;
            let mut ru = 0.0;
            let mut rs = vec![0.0; m];
            for r in 0..n_c {
                partial += terms[r].d_a;
                ru += terms[r].d_eta_a;
                if let Some(s) = sub(r) {
                    rs[s] += terms[r].d_eta_a;
                }
            }
            let tr = trace_for(&|_| 0.0, &|r| terms[r].dw_a, ru, &rs, 0.0);
            grad[self.k] = partial - 0.5 * tr;
        }
        {
            let partial = 0.5 * pu * u * u - 0.5;
            let tr = trace_for(&|_| 0.0, &|_| 0.0, pu * u, &vec![0.0; m], huu_inv * (-pu));
            grad[self.k + 1] = partial - 0.5 * tr;
        }
        if nested {
            let partial = 0.5 * pv * sum_v2 - 0.5 * m as f64;
            let rs: Vec<f64> = v.iter().map(|x| pv * x).collect();
            let prior: f64 = hss_inv.iter().map(|h| h * (-pv)).sum();
            let tr = trace_for(&|_| 0.0, &|_| 0.0, 0.0, &rs, prior);
            grad[self.k + 2] = partial - 0.5 * tr;
        }
        ClusterEval {
            value,
            grad,
            u,
            v,
            inner_converged,
        }
    }

    fn eval_all(&self, theta: &DVector<f64>, with_grad: bool) -> Vec<ClusterEval> {
        let beta = theta.rows(0, self.k).into_owned();
        let lin = self.prob.eta(&beta);
        let a = theta[self.k];
        let sums = self.prob.sums(a);
        let (pu, pv) = self.precisions(theta);
        let run = |c: &Cluster| self.eval_cluster(c, &lin, a, pu, pv, &sums, with_grad);
        if self.parallel {
            self.clusters.par_iter().map(run).collect()
        } else {
            self.clusters.iter().map(run).collect()
        }
    }

    /// Laplace log-likelihood and its gradient.
    fn loglik(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let evals = self.eval_all(theta, true);
        let mut value = 0.0;
        let mut grad = DVector::zeros(self.dim());
        for e in &evals {
            value += e.value;
            grad += &e.grad;
        }
        (value, grad)
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let mut lo = DVector::from_element(d, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(d, f64::INFINITY);
        lo[self.k] = LN_ALPHA_MIN;
        hi[self.k] = LN_ALPHA_MAX;
        for t in self.k + 1..d {
            lo[t] = LN_SIGMA2_MIN;
            hi[t] = LN_SIGMA2_MAX;
        }
        (lo, hi)
    }

    /// Central-difference Hessian of the negative log-likelihood from the
    /// analytic gradient, restricted to `free` coordinates.
    fn neg_hessian(&self, theta: &DVector<f64>, free: &[usize]) -> DMatrix<f64> {
        let n = free.len();
        let mut h = DMatrix::zeros(n, n);
        for (c, &j) in free.iter().enumerate() {
            let step = 1e-4 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += step;
            tm[j] -= step;
            let (_, gp) = self.loglik(&tp);
            let (_, gm) = self.loglik(&tm);
            for (r, &i) in free.iter().enumerate() {
                h[(r, c)] = -(gp[i] - gm[i]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

fn projected_norm(theta: &DVector<f64>, grad: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    // grad is of the log-likelihood (ascent direction)
    let mut norm: f64 = 0.0;
    for i in 0..theta.len() {
        let pinned = (theta[i] <= lo[i] && grad[i] < 0.0) || (theta[i] >= hi[i] && grad[i] > 0.0);
        if !pinned {
            norm = norm.max(grad[i].abs());
        }
    }
    norm
}

struct Optimum {
    theta: DVector<f64>,
    loglik: f64,
    iterations: usize,
    gradient_norm: f64,
    status: FitStatus,
    notes: Vec<String>,
}

fn optimize(model: &Model, start: DVector<f64>, opts: &FitOptions) -> Result<Optimum> {
    let (lo, hi) = model.bounds();
    let mut notes = Vec::new();
    let all: Vec<usize> = (0..model.dim()).collect();
    let h0 = {
        let h = model.neg_hessian(&start, &all);
        match h.clone().cholesky() {
            Some(ch) => Some(ch.inverse()),
            None => {
                let scale = h.diagonal().iter().map(|d| d.abs()).fold(1.0, f64::max);
                Some(DMatrix::identity(model.dim(), model.dim()) / scale)
            }
        }
    };
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        lower: Some(lo.clone()),
        upper: Some(hi.clone()),
    };
    let res = bfgs(
        |t| {
            let (v, g) = model.loglik(t);
            Ok((-v, -g))
        },
        start,
        h0,
        &bopts,
    )?;
    let mut theta = res.x;
    let mut iterations = res.iterations;
    let (mut value, mut grad) = model.loglik(&theta);
    let mut gnorm = projected_norm(&theta, &grad, &lo, &hi);

    // Newton polish on the free coordinates
    let mut polish = 0;
    while gnorm >= opts.grad_tol && polish < 20 {
        polish += 1;
        let free: Vec<usize> = (0..theta.len())
            .filter(|&i| !((theta[i] <= lo[i] && grad[i] < 0.0) || (theta[i] >= hi[i] && grad[i] > 0.0)))
            .collect();
        let h = model.neg_hessian(&theta, &free);
        let g = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let Some(hinv) = spd_inverse(&h) else {
            notes.push("Newton polish hit an indefinite Hessian".into());
            break;
        };
        let step = hinv * g;
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut trial = theta.clone();
            for (c, &i) in free.iter().enumerate() {
                trial[i] = (trial[i] + t * step[c]).clamp(lo[i], hi[i]);
            }
            let (vt, gt) = model.loglik(&trial);
            if vt.is_finite() && vt >= value - 1e-12 * value.abs() {
                theta = trial;
                value = vt;
                grad = gt;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        gnorm = projected_norm(&theta, &grad, &lo, &hi);
        if !improved {
            break;
        }
    }
    iterations += polish;
    let status = if gnorm < opts.grad_tol {
        FitStatus::Converged
    } else if iterations >= opts.max_iter {
        FitStatus::MaxIterations
    } else {
        FitStatus::Stalled
    };
    if polish > 0 {
        notes.push(format!("{polish} Newton polish step(s) after quasi-Newton"));
    }
    Ok(Optimum {
        theta,
        loglik: value,
        iterations,
        gradient_norm: gnorm,
        status,
        notes,
    })
}

fn distinct(ids: &[usize]) -> usize {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Fits the model with the given nested random intercepts (outermost first).
pub fn fit_nb_mixed_with(design: &DesignTable, levels: &[RandomLevel], opts: &FitOptions) -> Result<FitResult> {
    match levels {
        [] | [_] | [RandomLevel::Group, RandomLevel::Region] => {}
        other => {
            return Err(Error::Config(format!(
                "random levels must be a nested prefix of [group, region], got {other:?}"
            )))
        }
    }
    if design.weights.is_some() {
        return Err(Error::Unsupported("prior weights in mixed models".into()));
    }
    check_outcome(design)?;
    check_rank(&design.x, &design.columns)?;

    let mut active: Vec<RandomLevel> = levels.to_vec();
    let mut components: Vec<VarianceComponent> = Vec::new();
    let mut notes = Vec::new();
    if active.contains(&RandomLevel::Group) && distinct(&design.group) < 2 {
        active.retain(|l| *l != RandomLevel::Group);
        components.push(VarianceComponent {
            level: RandomLevel::Group,
            sigma2: 0.0,
            se: None,
            boundary: true,
            identified: false,
        });
        notes.push("single group: group variance is not identified and was fixed at 0".into());
    }

    let prob = Problem::new(design);
    let k = prob.z.ncols();
    let poisson = fit_nb_glm_with(
        design,
        &FitOptions {
            max_iter: 1,
            robust_cluster: Some(ClusterLevel::Observation),
            ..opts.clone()
        },
    );
    let beta0: Vec<f64> = match &poisson {
        Ok(f) => f.coefficients.iter().zip(&prob.scales).map(|(b, s)| b * s).collect(),
        Err(_) => vec![0.0; k],
    };
    let mut current = fit_levels(design, &active, &beta0, opts.init_ln_alpha, opts)?;

    // drop collapsed levels and keep the reduced fit when it is no worse
    loop {
        let Some(fit) = &current else { break };
        let collapsed: Vec<(RandomLevel, f64)> = fit
            .layout
            .levels()
            .iter()
            .zip(fit.sigma2())
            .filter(|(_, s)| *s < COLLAPSE_SIGMA2)
            .map(|(l, s)| (*l, s))
            .collect();
        let Some(&(level, _)) = collapsed.iter().min_by(|a, b| a.1.total_cmp(&b.1)) else {
            break;
        };
        let reduced_levels: Vec<RandomLevel> = active.iter().copied().filter(|l| *l != level).collect();
        let beta: Vec<f64> = fit.opt.theta.rows(0, k).iter().copied().collect();
        let reduced = fit_levels(design, &reduced_levels, &beta, fit.opt.theta[k], opts)?;
        let reduced_ll = match &reduced {
            Some(r) => r.opt.loglik,
            None => glm_loglik(design, opts)?,
        };
        if reduced_ll >= fit.opt.loglik - 1e-6 {
            active = reduced_levels;
            components.push(VarianceComponent {
                level,
                sigma2: 0.0,
                se: None,
                boundary: true,
                identified: true,
            });
            notes.push(format!("{level} variance collapsed to the boundary; level dropped"));
            current = reduced;
        } else {
            break;
        }
    }

    let Some(fit) = current else {
        let mut glm = fit_nb_glm_with(design, opts)?;
        glm.kind = ModelKind::Mixed;
        for l in levels {
            if !components.iter().any(|c| c.level == *l) {
                components.push(VarianceComponent {
                    level: *l,
                    sigma2: 0.0,
                    se: None,
                    boundary: true,
                    identified: true,
                });
            }
        }
        components.sort_by_key(|c| c.level == RandomLevel::Region);
        glm.variance_components = components;
        glm.convergence.notes.extend(notes);
        return Ok(glm);
    };
    finish(design, fit, components, notes, levels)
}

struct LevelFit {
    model: Model,
    layout: Layout,
    opt: Optimum,
}

impl LevelFit {
    fn sigma2(&self) -> Vec<f64> {
        let k = self.model.k;
        (0..self.layout.n_tau()).map(|t| self.opt.theta[k + 1 + t].exp()).collect()
    }
}

fn glm_loglik(design: &DesignTable, opts: &FitOptions) -> Result<f64> {
    Ok(fit_nb_glm_with(design, opts)?.loglik)
}

fn fit_levels(
    design: &DesignTable,
    levels: &[RandomLevel],
    beta: &[f64],
    ln_alpha: f64,
    opts: &FitOptions,
) -> Result<Option<LevelFit>> {
    let Some(layout) = Layout::from_levels(levels) else {
        return Ok(None);
    };
    let model = Model {
        prob: Problem::new(design),
        clusters: build_clusters(design, layout)?,
        layout,
        k: design.n_cols(),
        parallel: opts.parallel,
    };
    let mut start = DVector::zeros(model.dim());
    for (j, b) in beta.iter().enumerate() {
        start[j] = *b;
    }
    start[model.k] = ln_alpha.clamp(LN_ALPHA_MIN, LN_ALPHA_MAX);
    for t in 0..layout.n_tau() {
        start[model.k + 1 + t] = opts.init_ln_sigma2;
    }
    let opt = optimize(&model, start, opts)?;
    Ok(Some(LevelFit { model, layout, opt }))
}

fn finish(
    design: &DesignTable,
    fit: LevelFit,
    mut components: Vec<VarianceComponent>,
    mut notes: Vec<String>,
    requested: &[RandomLevel],
) -> Result<FitResult> {
    let model = &fit.model;
    let theta = &fit.opt.theta;
    let k = model.k;
    let alpha_boundary = theta[k] <= LN_ALPHA_MIN + 1e-9;
    let free: Vec<usize> = (0..model.dim()).filter(|&i| !(alpha_boundary && i == k)).collect();
    let h = model.neg_hessian(theta, &free);
    let cov = spd_inverse(&h).ok_or_else(|| Error::InvalidData("singular Hessian at the mixed-model optimum".into()))?;
    let pos = |i: usize| free.iter().position(|f| *f == i);
    let var_of = |i: usize| pos(i).map(|p| cov[(p, p)]);

    let scales = &model.prob.scales;
    let coefficients: Vec<f64> = (0..k).map(|j| theta[j] / scales[j]).collect();
    let se: Vec<f64> = (0..k).map(|j| var_of(j).unwrap_or(f64::NAN).sqrt() / scales[j]).collect();
    let z: Vec<f64> = coefficients.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pv = z.iter().map(|z| normal_p_value(*z)).collect();

    let evals = model.eval_all(theta, true);
    let robust_se = match sandwich(&evals, &h, &free) {
        Ok(v) => (0..k).map(|j| v[(j, j)].sqrt() / scales[j]).collect(),
        Err(e) => {
            notes.push(format!("robust standard errors unavailable: {e}"));
            vec![f64::NAN; k]
        }
    };

    for (t, level) in fit.layout.levels().into_iter().enumerate() {
        let idx = k + 1 + t;
        let s2 = theta[idx].exp();
        let boundary = s2 < 1e-10;
        components.push(VarianceComponent {
            level,
            sigma2: s2,
            se: if boundary { None } else { var_of(idx).map(|v| s2 * v.sqrt()) },
            boundary,
            identified: true,
        });
    }
    components.retain(|c| requested.contains(&c.level));
    components.sort_by_key(|c| c.level == RandomLevel::Region);

    let mut group_effects = Vec::new();
    let mut region_effects = Vec::new();
    let top_len = match fit.layout.top {
        RandomLevel::Group => design.group_labels.len(),
        RandomLevel::Region => design.region_labels.len(),
    };
    let mut top = vec![0.0; top_len];
    let mut sub = vec![0.0; design.region_labels.len()];
    let mut all_inner = true;
    for (c, e) in model.clusters.iter().zip(&evals) {
        top[c.top_id] = e.u;
        for (s, r) in c.sub_ids.iter().enumerate() {
            sub[*r] = e.v[s];
        }
        all_inner &= e.inner_converged;
    }
    if !all_inner {
        notes.push("some inner mode solves stopped before tolerance".into());
    }
    match fit.layout.top {
        RandomLevel::Group => {
            group_effects = top;
            if fit.layout.nested {
                region_effects = sub;
            }
        }
        RandomLevel::Region => region_effects = top,
    }
    let mut mu = Vec::with_capacity(design.n_rows());
    for i in 0..design.n_rows() {
        let mut eta = design.offset[i];
        for j in 0..k {
            eta += design.x[(i, j)] * coefficients[j];
        }
        eta += group_effects.get(design.group[i]).copied().unwrap_or(0.0);
        eta += region_effects.get(design.region[i]).copied().unwrap_or(0.0);
        mu.push(eta.exp());
    }
    notes.extend(fit.opt.notes.iter().cloned());
    let robust_cluster = match fit.layout.top {
        RandomLevel::Group => ClusterLevel::Group,
        RandomLevel::Region => ClusterLevel::Region,
    };
    Ok(FitResult {
        kind: ModelKind::Mixed,
        terms: design.columns.clone(),
        coefficients,
        se,
        robust_se,
        robust_cluster,
        z,
        p: pv,
        ln_alpha: theta[k],
        ln_alpha_se: if alpha_boundary { None } else { var_of(k).map(f64::sqrt) },
        alpha_boundary,
        variance_components: components,
        loglik: fit.opt.loglik,
        mu,
        group_effects,
        region_effects,
        n_obs: design.n_rows(),
        convergence: Convergence {
            iterations: fit.opt.iterations,
            gradient_norm: fit.opt.gradient_norm,
            status: fit.opt.status,
            notes,
        },
    })
}

/// `A^-1 B A^-1` over the `free` coordinates from per-cluster gradients.
fn sandwich(evals: &[ClusterEval], neg_hessian: &DMatrix<f64>, free: &[usize]) -> Result<DMatrix<f64>> {
    let g = evals.len();
    if g < 2 {
        return Err(Error::InvalidData(format!("robust standard errors need at least 2 clusters, found {g}")));
    }
    let n = free.len();
    let mut meat = DMatrix::zeros(n, n);
    for e in evals {
        let s = DVector::from_iterator(n, free.iter().map(|&i| e.grad[i]));
        meat += &s * s.transpose();
    }
    meat *= g as f64 / (g as f64 - 1.0);
    let bread = spd_inverse(neg_hessian).ok_or_else(|| Error::InvalidData("singular Hessian".into()))?;
    Ok(&bread * meat * &bread)
}

fn model_for_fit(fit: &FitResult, design: &DesignTable) -> Result<(Model, DVector<f64>)> {
    let active: Vec<RandomLevel> = fit
        .variance_components
        .iter()
        .filter(|c| !c.boundary || c.sigma2 > 0.0)
        .map(|c| c.level)
        .collect();
    let layout = Layout::from_levels(&active)
        .ok_or_else(|| Error::InvalidData("every random level sits on the boundary".into()))?;
    let model = Model {
        prob: Problem::new(design),
        clusters: build_clusters(design, layout)?,
        layout,
        k: design.n_cols(),
        parallel: true,
    };
    let mut theta = DVector::zeros(model.dim());
    for j in 0..model.k {
        theta[j] = fit.coefficients[j] * model.prob.scales[j];
    }
    theta[model.k] = fit.ln_alpha;
    for (t, level) in layout.levels().iter().enumerate() {
        let s2 = fit.variance_component(*level).map_or(0.0, |c| c.sigma2);
        theta[model.k + 1 + t] = s2.ln();
    }
    Ok((model, theta))
}

pub(crate) fn robust_se(fit: &FitResult, design: &DesignTable, level: ClusterLevel) -> Result<Vec<f64>> {
    if design.columns != fit.terms {
        return Err(Error::InvalidData("design columns do not match the fit".into()));
    }
    let (model, theta) = match model_for_fit(fit, design) {
        Ok(m) => m,
        // no random level survived: the fit is a GLM in disguise
        Err(_) => return super::glm::robust_se(&FitResult { kind: ModelKind::Glm, ..fit.clone() }, design, level),
    };
    let top = match model.layout.top {
        RandomLevel::Group => ClusterLevel::Group,
        RandomLevel::Region => ClusterLevel::Region,
    };
    if level != top {
        return Err(Error::Unsupported(format!(
            "mixed-model robust errors cluster at the top modelled level ({top:?}), not {level:?}"
        )));
    }
    let k = model.k;
    let free: Vec<usize> = (0..model.dim()).filter(|&i| !(fit.alpha_boundary && i == k)).collect();
    let h = model.neg_hessian(&theta, &free);
    let evals = model.eval_all(&theta, true);
    let v = sandwich(&evals, &h, &free)?;
    Ok((0..k).map(|j| v[(j, j)].sqrt() / model.prob.scales[j]).collect())
}

/// Laplace-approximate marginal log-likelihood at the given parameters
/// (coefficients in original units, one variance per level in `levels`).
pub fn laplace_loglik(design: &DesignTable, levels: &[RandomLevel], beta: &[f64], ln_alpha: f64, sigma2: &[f64]) -> Result<f64> {
    let layout = Layout::from_levels(levels).ok_or_else(|| Error::Config("at least one random level required".into()))?;
    if sigma2.len() != layout.n_tau() || beta.len() != design.n_cols() {
        return Err(Error::InvalidData("parameter lengths do not match the model".into()));
    }
    let model = Model {
        prob: Problem::new(design),
        clusters: build_clusters(design, layout)?,
        layout,
        k: design.n_cols(),
        parallel: false,
    };
    let mut theta = DVector::zeros(model.dim());
    for j in 0..model.k {
        theta[j] = beta[j] * model.prob.scales[j];
    }
    theta[model.k] = ln_alpha;
    for (t, s) in sigma2.iter().enumerate() {
        theta[model.k + 1 + t] = s.ln();
    }
    Ok(model.eval_all(&theta, false).iter().map(|e| e.value).sum())
}
