//! Forecast scores against held-out truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, ForecastResult, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub coverage: f64,
    pub avg_length: f64,
    pub heldout_std: f64,
    pub level: f64,
    /// Mean of the training outputs, when known. Kept for reference only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mean: Option<f64>,
}

fn same_shape(what: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape {}x{} does not match {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{what}: empty matrices")));
    }
    Ok(())
}

/// Root mean squared error, averaged over all m·n* entries.
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape("rmse", pred, truth)?;
    Ok((sum_sq_error(pred, truth) / pred.len() as f64).sqrt())
}

/// Root of the unnormalized sum of squared errors.
pub fn rmse_raw_sum(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape("rmse", pred, truth)?;
    Ok(sum_sq_error(pred, truth).sqrt())
}

fn sum_sq_error(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// Fraction of entries with `lower <= truth <= upper`.
pub fn coverage(lower: &DMatrix<f64>, upper: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    same_shape("coverage", lower, truth)?;
    same_shape("coverage", upper, truth)?;
    let inside = lower
        .iter()
        .zip(upper.iter())
        .zip(truth.iter())
        .filter(|((l, u), t)| *l <= *t && *t <= *u)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

pub fn avg_interval_length(lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> Result<f64> {
    same_shape("interval length", lower, upper)?;
    Ok(upper.iter().zip(lower.iter()).map(|(u, l)| u - l).sum::<f64>() / lower.len() as f64)
}

/// Sample standard deviation over all entries (divisor count − 1).
pub fn heldout_std(truth: &DMatrix<f64>) -> Result<f64> {
    let n = truth.len();
    if n < 2 {
        return Err(Error::invalid("held-out std needs at least 2 entries"));
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let ss: f64 = truth.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1) as f64).sqrt())
}

/// Scores a forecast against the matching truth block.
pub fn evaluate(forecast: &ForecastResult, truth: &DMatrix<f64>) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rmse: rmse(&forecast.mean, truth)?,
        coverage: coverage(&forecast.lower, &forecast.upper, truth)?,
        avg_length: avg_interval_length(&forecast.lower, &forecast.upper)?,
        heldout_std: heldout_std(truth)?,
        level: forecast.level,
        train_mean: None,
    })
}

impl MetricsReport {
    /// Plain-text table: one header row and one value row.
    pub fn table(&self, method: &str) -> String {
        let pct = (self.level * 100.0).round();
        format!(
            "{:<10} {:>12} {:>10} {:>10} {:>12}\n{:<10} {:>12.4e} {:>9.1}% {:>10.4} {:>12.4}\n",
            "method",
            "RMSE",
            format!("P({pct}%)"),
            format!("L({pct}%)"),
            "heldout_std",
            method,
            self.rmse,
            self.coverage * 100.0,
            self.avg_length,
            self.heldout_std
        )
    }
}
