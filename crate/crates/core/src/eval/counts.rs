use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-marker agreement of tile-level positive counts, with an OLS fit of the
/// reference counts on the predicted counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountCorrelation {
    pub pearson: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub tiles: usize,
}

pub fn cellcount_correlation(predicted: &[f64], reference: &[f64]) -> Result<CountCorrelation> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted counts vs {} reference", predicted.len(), reference.len())));
    }
    if predicted.len() < 2 {
        return Err(Error::Invalid("count correlation needs at least 2 tiles".into()));
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = reference.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in predicted.iter().zip(reference) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let (slope, intercept) = if sxx > 0.0 {
        let s = sxy / sxx;
        (Some(s), Some(my - s * mx))
    } else {
        (None, None)
    };
    Ok(CountCorrelation { pearson: crate::stats::pearson(predicted, reference), slope, intercept, tiles: predicted.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_scaled_counts() {
        let c = cellcount_correlation(&[3.0, 1.0, 4.0], &[3.0, 1.0, 4.0]).unwrap();
        assert!((c.pearson.unwrap() - 1.0).abs() < 1e-12);
        let c = cellcount_correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((c.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((c.slope.unwrap() - 2.0).abs() < 1e-12);
        assert!(c.intercept.unwrap().abs() < 1e-12);
    }

    #[test]
    fn permutation_null_values_in_exhaustive_set() {
        let x = [1.0, 2.0, 3.0];
        let perms = [[1.0, 2.0, 3.0], [1.0, 3.0, 2.0], [2.0, 1.0, 3.0], [2.0, 3.0, 1.0], [3.0, 1.0, 2.0], [3.0, 2.0, 1.0]];
        // exhaustive set for 3 distinct ranks: {1, 0.5, -0.5, -1}
        for p in perms {
            let r = cellcount_correlation(&x, &p).unwrap().pearson.unwrap();
            assert!([1.0, 0.5, -0.5, -1.0].iter().any(|v| (r - v).abs() < 1e-12), "{r}");
        }
    }

    #[test]
    fn zero_variance_sentinel() {
        let c = cellcount_correlation(&[2.0, 2.0], &[1.0, 5.0]).unwrap();
        assert_eq!((c.pearson, c.slope), (None, None));
        assert!(cellcount_correlation(&[1.0], &[1.0]).is_err());
    }
}
