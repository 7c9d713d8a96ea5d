//! Per-observation NB2 log-likelihood pieces.
//!
//! With `mu = exp(eta)`, `alpha = exp(a)` and `x = alpha * mu`:
//!
//! ```text
//! ll = sum_{k<y} ln(1 + alpha k) + y eta - y ln(1 + x) - mu ln(1 + x)/x - ln y!
//! ```
//!
//! which equals the usual Gamma-function form but stays accurate as
//! `alpha -> 0`, where it tends to the Poisson log-likelihood.

use statrs::function::gamma::{digamma, ln_gamma};

/// Counts above this use the digamma/trigamma route for the `k` sums.
const EXACT_SUM_LIMIT: u64 = 5000;

/// `ln(1 + x) / x`, continuous at 0.
fn log1p_ratio(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 - x / 2.0 + x * x / 3.0 - x * x * x / 4.0
    } else {
        x.ln_1p() / x
    }
}

/// `(ln(1+x) - x/(1+x)) / x^2` and its derivative in `x`.
fn phi(x: f64) -> (f64, f64) {
    if x < 0.05 {
        // alternating series sum_{n>=2} (-1)^n (n-1)/n x^(n-2)
        let mut value = 0.0;
        let mut deriv = 0.0;
        let mut pow = 1.0; // x^(n-2)
        let mut pow_d = 0.0; // x^(n-3), zero for n = 2
        for n in 2..40 {
            let nf = n as f64;
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            value += sign * (nf - 1.0) / nf * pow;
            if n >= 3 {
                deriv += sign * (nf - 1.0) * (nf - 2.0) / nf * pow_d;
            }
            pow_d = if n == 2 { 1.0 } else { pow_d * x };
            pow *= x;
        }
        (value, deriv)
    } else {
        let v = (x.ln_1p() - x / (1.0 + x)) / (x * x);
        let d = 1.0 / (x * (1.0 + x) * (1.0 + x)) - 2.0 * v / x;
        (v, d)
    }
}

/// Trigamma by upward recurrence to x >= 20 and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0))))
}

/// `(sum ln(1+alpha k), sum k/(1+alpha k), sum k^2/(1+alpha k)^2)` over `k < y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSums {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
}

pub fn k_sums_exact(y: u64, alpha: f64) -> KSums {
    let mut s = KSums { s0: 0.0, s1: 0.0, s2: 0.0 };
    for k in 1..y {
        let k = k as f64;
        let d = 1.0 + alpha * k;
        s.s0 += (alpha * k).ln_1p();
        s.s1 += k / d;
        s.s2 += k * k / (d * d);
    }
    s
}

pub fn k_sums_special(y: u64, alpha: f64) -> KSums {
    let yf = y as f64;
    let theta = 1.0 / alpha;
    let dpsi = digamma(yf + theta) - digamma(theta);
    let dtri = trigamma(theta) - trigamma(yf + theta);
    KSums {
        s0: yf * alpha.ln() + ln_gamma(yf + theta) - ln_gamma(theta),
        s1: yf / alpha - dpsi / (alpha * alpha),
        s2: (yf - 2.0 * theta * dpsi + theta * theta * dtri) / (alpha * alpha),
    }
}

pub fn k_sums(y: u64, alpha: f64) -> KSums {
    if y <= EXACT_SUM_LIMIT || alpha < 1e-4 {
        k_sums_exact(y, alpha)
    } else {
        k_sums_special(y, alpha)
    }
}

/// Terms that depend on the linear predictor only (dispersion held fixed).
#[derive(Debug, Clone, Copy)]
pub struct EtaTerms {
    pub mu: f64,
    /// `ll` without the `k`-sum and `ln y!` constants.
    pub ll_eta: f64,
    /// dll/deta
    pub score: f64,
    /// -d2ll/deta2 (always positive)
    pub w_obs: f64,
    /// Fisher weight mu/(1 + alpha mu)
    pub w_fisher: f64,
}

pub fn eta_terms(y: f64, eta: f64, alpha: f64) -> EtaTerms {
    let mu = eta.exp();
    let x = alpha * mu;
    let opx = 1.0 + x;
    EtaTerms {
        mu,
        ll_eta: y * eta - y * x.ln_1p() - mu * log1p_ratio(x),
        score: (y - mu) / opx,
        w_obs: mu * (1.0 + alpha * y) / (opx * opx),
        w_fisher: mu / opx,
    }
}

/// Full per-observation terms including derivatives in `a = ln alpha`.
#[derive(Debug, Clone, Copy)]
pub struct FullTerms {
    pub eta: EtaTerms,
    pub ll: f64,
    /// dll/da
    pub d_a: f64,
    /// d2ll/da2
    pub d2_a: f64,
    /// d2ll/(deta da)
    pub d_eta_a: f64,
    /// d w_obs / deta
    pub dw_eta: f64,
    /// d w_obs / da
    pub dw_a: f64,
}

/// `lgamma_y1` is `ln(y!)`, `sums` the [`KSums`] for this `y` and `alpha`.
pub fn full_terms(y: f64, eta: f64, ln_alpha: f64, sums: &KSums, lgamma_y1: f64) -> FullTerms {
    let alpha = ln_alpha.exp();
    let e = eta_terms(y, eta, alpha);
    let mu = e.mu;
    let x = alpha * mu;
    let opx = 1.0 + x;
    let (ph, dph) = phi(x);
    let g = sums.s1 - y * mu / opx + mu * mu * ph;
    let g2 = -sums.s2 + y * mu * mu / (opx * opx) + mu * mu * mu * dph;
    FullTerms {
        eta: e,
        ll: sums.s0 + e.ll_eta - lgamma_y1,
        d_a: alpha * g,
        d2_a: alpha * g + alpha * alpha * g2,
        d_eta_a: -alpha * mu * (y - mu) / (opx * opx),
        dw_eta: mu * (1.0 + alpha * y) * (1.0 - x) / (opx * opx * opx),
        dw_a: alpha * mu * (y * opx - 2.0 * mu * (1.0 + alpha * y)) / (opx * opx * opx),
    }
}

/// Plain Gamma-function form of the NB2 log-likelihood, for cross-checks.
pub fn loglik_reference(y: f64, mu: f64, alpha: f64) -> f64 {
    let theta = 1.0 / alpha;
    ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0)
        + y * (alpha * mu / (1.0 + alpha * mu)).ln()
        - theta * (alpha * mu).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ll_at(y: f64, eta: f64, a: f64) -> f64 {
        let alpha = a.exp();
        full_terms(y, eta, a, &k_sums(y as u64, alpha), ln_gamma(y + 1.0)).ll
    }

    #[test]
    fn matches_gamma_form() {
        for &(y, mu, alpha) in &[(0.0, 2.0, 0.5), (7.0, 3.5, 0.8), (40.0, 55.0, 0.05), (3.0, 0.2, 4.0)] {
            let got = ll_at(y, f64::ln(mu), f64::ln(alpha));
            let want = loglik_reference(y, mu, alpha);
            assert!((got - want).abs() < 1e-10, "y={y}: {got} vs {want}");
        }
    }

    #[test]
    fn poisson_limit() {
        let (y, mu) = (6.0, 4.2f64);
        let pois = y * mu.ln() - mu - ln_gamma(y + 1.0);
        let got = ll_at(y, mu.ln(), -25.0);
        assert!((got - pois).abs() < 1e-8);
    }

    #[test]
    fn k_sum_routes_agree() {
        for &(y, alpha) in &[(6000u64, 0.3), (8000, 0.01), (20000, 2.0), (50, 0.7)] {
            let a = k_sums_exact(y, alpha);
            let b = k_sums_special(y, alpha);
            assert!((a.s0 - b.s0).abs() < 1e-7 * a.s0.abs().max(1.0), "s0 {a:?} {b:?}");
            assert!((a.s1 - b.s1).abs() < 1e-7 * a.s1.abs().max(1.0), "s1 {a:?} {b:?}");
            assert!((a.s2 - b.s2).abs() < 1e-6 * a.s2.abs().max(1.0), "s2 {a:?} {b:?}");
        }
    }

    #[test]
    fn trigamma_values() {
        // psi'(1) = pi^2/6, psi'(1/2) = pi^2/2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-12);
        assert!((trigamma(100.0) - 0.010050166663333571).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for &(y, eta, a) in &[(0.0, 0.3, -0.7), (12.0, 2.1, -1.5), (3.0, -0.4, 0.9), (150.0, 4.8, -3.0), (9.0, 2.0, -12.0)] {
            let alpha = f64::exp(a);
            let s = k_sums(y as u64, alpha);
            let t = full_terms(y, eta, a, &s, ln_gamma(y + 1.0));
            let d_eta = (ll_at(y, eta + h, a) - ll_at(y, eta - h, a)) / (2.0 * h);
            let d_a = (ll_at(y, eta, a + h) - ll_at(y, eta, a - h)) / (2.0 * h);
            let w_fd = -(ll_at(y, eta + h, a) - 2.0 * t.ll + ll_at(y, eta - h, a)) / (h * h);
            let close = |x: f64, y: f64, tol: f64| (x - y).abs() <= tol * y.abs().max(1e-3);
            assert!(close(t.eta.score, d_eta, 1e-6), "score {} {}", t.eta.score, d_eta);
            assert!(close(t.d_a, d_a, 1e-6), "d_a {} {}", t.d_a, d_a);
            assert!(close(t.eta.w_obs, w_fd, 1e-3), "w {} {}", t.eta.w_obs, w_fd);

            let tp = full_terms(y, eta + h, a, &s, 0.0);
            let tm = full_terms(y, eta - h, a, &s, 0.0);
            assert!(close(t.d_eta_a, (tp.d_a - tm.d_a) / (2.0 * h), 1e-6));
            assert!(close(t.dw_eta, (tp.eta.w_obs - tm.eta.w_obs) / (2.0 * h), 1e-6));
            let sp = k_sums(y as u64, (a + h).exp());
            let sm = k_sums(y as u64, (a - h).exp());
            let ap = full_terms(y, eta, a + h, &sp, 0.0);
            let am = full_terms(y, eta, a - h, &sm, 0.0);
            assert!(close(t.dw_a, (ap.eta.w_obs - am.eta.w_obs) / (2.0 * h), 1e-6));
            assert!(close(t.d2_a, (ap.d_a - am.d_a) / (2.0 * h), 1e-6), "d2_a {} vs {}", t.d2_a, (ap.d_a - am.d_a) / (2.0 * h));
        }
    }
}
