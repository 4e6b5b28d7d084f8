use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    /// Least-squares slope of ŷ on y; absent when y has no variance.
    pub frc: Option<f64>,
    pub n: usize,
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("{} targets, {} predictions", y.len(), y_hat.len()),
        });
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metrics"));
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// OLS slope of `b` regressed on `a`; `None` when `a` is constant.
pub fn ols_slope(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in a.iter().zip(b) {
        sxx += (x - ma) * (x - ma);
        sxy += (x - ma) * (y - mb);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn regression_metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricReport> {
    check_pair(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::Invalid(format!("metrics need at least 2 samples, got {}", y.len())));
    }
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (t, p) in y.iter().zip(y_hat) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
    }
    Ok(MetricReport {
        mae: abs / n,
        mse: sq / n,
        frc: ols_slope(y, y_hat),
        n: y.len(),
    })
}

/// `ŷ − y` per sample.
pub fn age_acceleration(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(t, p)| p - t).collect())
}

/// Share of samples with strictly positive acceleration.
pub fn cohort_sensitivity(aa: &[f64]) -> Result<f64> {
    if aa.is_empty() {
        return Err(Error::Invalid("sensitivity of an empty cohort".into()));
    }
    Ok(aa.iter().filter(|&&a| a > 0.0).count() as f64 / aa.len() as f64)
}

/// Among pooled samples with AA > 0, the share that are disease cases.
pub fn mixed_precision(healthy_aa: &[f64], disease_aa: &[f64]) -> Option<f64> {
    let tp = disease_aa.iter().filter(|&&a| a > 0.0).count();
    let fp = healthy_aa.iter().filter(|&&a| a > 0.0).count();
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}
