use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// First principal component of standardized indicators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisadvantageIndex {
    pub scores: Vec<f64>,
    /// Largest eigenvalue of the indicator correlation matrix.
    pub eigenvalue: f64,
    /// Unit-norm loadings, in input order.
    pub loadings: Vec<(String, f64)>,
    /// `eigenvalue / number of indicators`.
    pub explained_share: f64,
}

/// Builds the index from named indicator columns.
///
/// Indicators are standardized (sample SD), the leading eigenvector of their
/// correlation matrix gives the loadings, and the sign is fixed so the first
/// listed indicator loads nonnegatively.
pub fn disadvantage_index(indicators: &[(&str, &[f64])]) -> Result<DisadvantageIndex> {
    if indicators.len() < 2 {
        return Err(Error::InvalidData("need at least two indicator columns".into()));
    }
    let n = indicators[0].1.len();
    if n < 2 || indicators.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::InvalidData(
            "indicator columns must have equal length of at least 2".into(),
        ));
    }
    let mut offenders = Vec::new();
    for (name, col) in indicators {
        for (i, v) in col.iter().enumerate() {
            if !v.is_finite() {
                offenders.push(format!("{name}[{i}]"));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::MissingValues { offenders });
    }

    let k = indicators.len();
    let mut z = DMatrix::zeros(n, k);
    for (j, (name, col)) in indicators.iter().enumerate() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        for i in 0..n {
            z[(i, j)] = (col[i] - mean) / sd;
        }
    }
    let corr = (z.transpose() * &z) / (n - 1) as f64;
    let eig = SymmetricEigen::new(corr);
    let (top, &eigenvalue) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("k >= 2");
    let mut v = eig.eigenvectors.column(top).into_owned();
    if v[0] < 0.0 {
        v.neg_mut();
    }
    let scores = (&z * &v).iter().copied().collect();
    Ok(DisadvantageIndex {
        scores,
        eigenvalue,
        loadings: indicators
            .iter()
            .zip(v.iter())
            .map(|((name, _), l)| (name.to_string(), *l))
            .collect(),
        explained_share: eigenvalue / k as f64,
    })
}
