use crate::error::{Error, Result};

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidData(format!("{what}: empty column")));
    }
    let offenders: Vec<String> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| format!("{what}[{i}]"))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingValues { offenders })
    }
}

/// 1 where the value is strictly above the column mean, else 0.
pub fn above_average_indicator(values: &[f64]) -> Result<Vec<f64>> {
    check_finite(values, "above-average input")?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values
        .iter()
        .map(|&v| if v > mean { 1.0 } else { 0.0 })
        .collect())
}

/// 1 where the value is at least `cutoff`, else 0.
pub fn threshold_indicator(values: &[f64], cutoff: f64) -> Result<Vec<f64>> {
    check_finite(values, "threshold input")?;
    Ok(values
        .iter()
        .map(|&v| if v >= cutoff { 1.0 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn above_average_examples() {
        assert_eq!(above_average_indicator(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(above_average_indicator(&[4.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(above_average_indicator(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(
            threshold_indicator(&[10.0, 25.0, 40.0], 25.0).unwrap(),
            vec![0.0, 1.0, 1.0]
        );
        assert!(threshold_indicator(&[], 1.0).is_err());
    }
}
