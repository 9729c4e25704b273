use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Absolute-error threshold, matching one nurse's share at a 4:1 ratio.
pub const ABS_ERR_THRESHOLD: f64 = 4.0;
/// Minimum relative accuracy `1 - |e| / max(actual, 1)`.
pub const ACCURACY_THRESHOLD: f64 = 0.70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Percentage of forecasts with `|e| <= 4`.
    pub pct_abs_err_le4: f64,
    /// Percentage of forecasts with accuracy `>= 0.70`.
    pub pct_accuracy_ge70: f64,
    pub n: usize,
}

/// Relative accuracy of one forecast; the denominator is floored at 1 so
/// zero-count windows stay defined.
pub fn accuracy(pred: f64, actual: f64) -> f64 {
    1.0 - (pred - actual).abs() / actual.max(1.0)
}

pub fn metrics(preds: &[f64], actuals: &[f64]) -> Result<MetricsReport> {
    if preds.len() != actuals.len() {
        return Err(domain(format!(
            "{} predictions but {} actuals",
            preds.len(),
            actuals.len()
        )));
    }
    if preds.is_empty() {
        return Err(domain("cannot score an empty sample"));
    }
    if preds.iter().chain(actuals).any(|v| !v.is_finite()) {
        return Err(domain("non-finite value in metrics input"));
    }
    let n = preds.len();
    let (mut se, mut ae, mut within, mut accurate) = (0.0, 0.0, 0usize, 0usize);
    for (&p, &a) in preds.iter().zip(actuals) {
        let e = (p - a).abs();
        se += e * e;
        ae += e;
        within += usize::from(e <= ABS_ERR_THRESHOLD);
        accurate += usize::from(accuracy(p, a) >= ACCURACY_THRESHOLD);
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse: (se / nf).sqrt(),
        mae: ae / nf,
        pct_abs_err_le4: 100.0 * within as f64 / nf,
        pct_accuracy_ge70: 100.0 * accurate as f64 / nf,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecasts() {
        let m = metrics(&[3.0, 0.0, 12.0], &[3.0, 0.0, 12.0]).unwrap();
        assert_eq!((m.rmse, m.mae), (0.0, 0.0));
        assert_eq!((m.pct_abs_err_le4, m.pct_accuracy_ge70), (100.0, 100.0));
    }

    #[test]
    fn error_of_four_passes_both_thresholds() {
        let m = metrics(&[10.0], &[14.0]).unwrap();
        assert_eq!(m.mae, 4.0);
        assert_eq!(m.pct_abs_err_le4, 100.0);
        assert!((accuracy(10.0, 14.0) - 0.7142857142857143).abs() < 1e-15);
        assert_eq!(m.pct_accuracy_ge70, 100.0);
    }

    #[test]
    fn error_of_five_fails_both_thresholds() {
        let m = metrics(&[10.0], &[15.0]).unwrap();
        assert_eq!(m.mae, 5.0);
        assert_eq!(m.pct_abs_err_le4, 0.0);
        assert!((accuracy(10.0, 15.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.pct_accuracy_ge70, 0.0);
    }

    #[test]
    fn zero_actual_uses_unit_denominator() {
        assert_eq!(accuracy(0.3, 0.0), 0.7);
        assert_eq!(metrics(&[0.3], &[0.0]).unwrap().pct_accuracy_ge70, 100.0);
    }

    #[test]
    fn shape_errors() {
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[f64::NAN], &[1.0]).is_err());
    }
}
