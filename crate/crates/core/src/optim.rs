//! Small numerical optimizers: box-constrained BFGS and a projected-gradient
//! simplex solver.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when the projected gradient's ∞-norm is below this.
    pub grad_tol: f64,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Projected gradient ∞-norm at `x`.
    pub grad_norm: f64,
    pub inv_hessian: DMatrix<f64>,
}

fn clip(x: &mut DVector<f64>, opts: &BfgsOptions) {
    if let Some(lo) = &opts.lower {
        for (v, l) in x.iter_mut().zip(lo.iter()) {
            *v = v.max(*l);
        }
    }
    if let Some(hi) = &opts.upper {
        for (v, h) in x.iter_mut().zip(hi.iter()) {
            *v = v.min(*h);
        }
    }
}

/// ∞-norm of the gradient, ignoring components pinned against a bound.
pub fn projected_norm(x: &DVector<f64>, g: &DVector<f64>, opts: &BfgsOptions) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..x.len() {
        let at_lo = opts.lower.as_ref().is_some_and(|l| x[i] <= l[i] && g[i] > 0.0);
        let at_hi = opts.upper.as_ref().is_some_and(|u| x[i] >= u[i] && g[i] < 0.0);
        if !(at_lo || at_hi) {
            norm = norm.max(g[i].abs());
        }
    }
    norm
}

/// Minimizes `f` (returning value and gradient) from `x0`. `h0` is an
/// optional initial inverse Hessian.
pub fn bfgs<F>(mut f: F, x0: DVector<f64>, h0: Option<DMatrix<f64>>, opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    clip(&mut x, opts);
    let (mut fx, mut g) = f(&x)?;
    let h_init = h0.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut h = h_init.clone();
    let mut iterations = 0;
    let mut converged = projected_norm(&x, &g, opts) < opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut d = -(&h * &g);
        if d.dot(&g) >= 0.0 {
            h = h_init.clone();
            d = -(&h * &g);
            if d.dot(&g) >= 0.0 {
                d = -g.clone();
            }
        }
        let slope = d.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = &x + &d * t;
            clip(&mut trial, opts);
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * t * slope.min(0.0) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        let progress = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        converged = projected_norm(&x, &g, opts) < opts.grad_tol;
        if !converged && progress == 0.0 && s.amax() == 0.0 {
            break;
        }
    }
    let grad_norm = projected_norm(&x, &g, opts);
    Ok(BfgsResult {
        x,
        value: fx,
        grad: g,
        iterations,
        converged,
        grad_norm,
        inv_hessian: h,
    })
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Minimizes a smooth convex `f` over the simplex by projected gradient
/// descent with backtracking, starting from `start` (already feasible).
/// Only improving steps are taken, so the result is never worse than `start`.
pub fn minimize_on_simplex<F>(mut f: F, start: Vec<f64>, max_iter: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut w = start;
    let (mut fw, mut g) = f(&w);
    let mut step = 1.0;
    for _ in 0..max_iter {
        let mut improved = false;
        for _ in 0..50 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let trial = project_simplex(&trial);
            let (ft, gt) = f(&trial);
            if ft < fw - 1e-15 * fw.abs() {
                let moved: f64 = trial.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
                w = trial;
                fw = ft;
                g = gt;
                improved = true;
                step *= 2.0;
                if moved < 1e-13 {
                    return (w, fw);
                }
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (w, fw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Ok((v, g))
        };
        let r = bfgs(f, DVector::from_vec(vec![-1.2, 1.0]), None, &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bfgs_respects_bounds() {
        let f = |x: &DVector<f64>| Ok(((x[0] + 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] + 3.0)])));
        let opts = BfgsOptions {
            lower: Some(DVector::from_vec(vec![-1.0])),
            ..Default::default()
        };
        let r = bfgs(f, DVector::from_vec(vec![2.0]), None, &opts).unwrap();
        assert_eq!(r.x[0], -1.0);
        assert!(r.converged);
    }

    #[test]
    fn simplex_projection() {
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let p = project_simplex(&[2.0, 0.0, -1.0]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[0.2, 0.3, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_minimizer_finds_interior_optimum() {
        // min ||w - c||^2 with c inside the simplex
        let c = [0.2, 0.5, 0.3];
        let f = |w: &[f64]| {
            let v = w.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            let g = w.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect();
            (v, g)
        };
        let (w, v) = minimize_on_simplex(f, vec![1.0, 0.0, 0.0], 1000);
        assert!(v < 1e-12, "{w:?}");
    }
}
