//! Column scaling, rank checks and small dense solves shared by the fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative residual norm below which a column counts as collinear.
const RANK_TOL: f64 = 1e-9;

/// Per-column scale factors (max absolute value, 1 for all-zero columns).
pub fn column_scales(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| {
            let m = x.column(j).amax();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect()
}

pub fn scale_columns(x: &DMatrix<f64>, scales: &[f64]) -> DMatrix<f64> {
    let mut z = x.clone();
    for (j, s) in scales.iter().enumerate() {
        z.column_mut(j).scale_mut(1.0 / s);
    }
    z
}

/// Checks full column rank by modified Gram-Schmidt. On failure the error
/// names the first deficient column together with the earlier columns it is
/// a combination of.
pub fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let n = x.nrows();
    if x.ncols() > n {
        return Err(Error::RankDeficient { columns: names.to_vec() });
    }
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for q in &basis {
            let c = q.dot(&r);
            r -= q * c;
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= RANK_TOL * norm {
            let mut columns = Vec::new();
            if !kept.is_empty() {
                let sub = DMatrix::from_fn(n, kept.len(), |i, k| x[(i, kept[k])]);
                let coef = sub
                    .clone()
                    .svd(true, true)
                    .solve(&col, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(kept.len()));
                for (k, &idx) in kept.iter().enumerate() {
                    let contribution = coef[k].abs() * sub.column(k).norm();
                    if contribution > 1e-8 * norm.max(1e-300) {
                        columns.push(names[idx].clone());
                    }
                }
            }
            columns.push(names[j].clone());
            return Err(Error::RankDeficient { columns });
        }
        basis.push(r / rn);
        kept.push(j);
    }
    Ok(())
}

/// Inverse of a symmetric positive definite matrix via Cholesky, with a
/// small ridge retried if the factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Some(ch.inverse());
    }
    let scale = sym.diagonal().amax().max(1e-300);
    let ridged = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * (1e-8 * scale);
    ridged.cholesky().map(|c| c.inverse())
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_p_value(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn duplicate_column_names_both() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, 0.5, 1.0, 1.5, 1.5, 1.0, 2.0, 2.0, 1.0, -1.0, -1.0]);
        match check_rank(&x, &names(&["intercept", "x", "x_copy"])) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, names(&["x", "x_copy"])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_rank_passes() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(check_rank(&x, &names(&["a", "b"])).is_ok());
    }

    #[test]
    fn p_values() {
        let p = normal_p_value(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-10, "{p}");
        assert_eq!(normal_p_value(0.0), 1.0);
    }
}
