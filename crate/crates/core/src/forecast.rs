//! Multi-step probabilistic forecast container shared by all methods.

use nalgebra::DMatrix;

use crate::linalg::quantile_sorted;
use crate::{Error, Result};

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Mean trajectory and central `level` intervals, each m × horizon.
///
/// Column k holds the forecast for k + 1 steps past the last observed state.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub horizon: usize,
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub level: f64,
    /// Raw sample paths (one m × horizon matrix per kept chain), if retained.
    pub samples: Option<Vec<DMatrix<f64>>>,
    pub seed: Option<u64>,
    pub diverged_chains: usize,
    pub warnings: Vec<String>,
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level.is_finite() && level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("level must lie in (0, 1), got {level}")))
    }
}

impl ForecastResult {
    /// Builds a result from explicit bands.
    pub fn new(
        mean: DMatrix<f64>,
        lower: DMatrix<f64>,
        upper: DMatrix<f64>,
        level: f64,
        seed: Option<u64>,
    ) -> Result<Self> {
        check_level(level)?;
        let horizon = mean.ncols();
        if horizon == 0 {
            return Err(Error::invalid("forecast horizon must be positive"));
        }
        for (what, m) in [("lower band", &lower), ("upper band", &upper)] {
            if m.shape() != mean.shape() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: mean.len(),
                    got: m.len(),
                });
            }
        }
        if let Some((i, _)) = lower
            .iter()
            .zip(upper.iter())
            .enumerate()
            .find(|(_, (l, u))| !(l <= u))
        {
            return Err(Error::invalid(format!(
                "lower band exceeds upper band at entry {i}"
            )));
        }
        Ok(ForecastResult {
            horizon,
            mean,
            lower,
            upper,
            level,
            samples: None,
            seed,
            diverged_chains: 0,
            warnings: Vec::new(),
        })
    }

    /// Sample mean and empirical `(1 - level)/2`, `(1 + level)/2` quantiles
    /// per (coordinate, step) over the given sample paths.
    pub fn from_samples(
        samples: Vec<DMatrix<f64>>,
        level: f64,
        seed: Option<u64>,
        keep_samples: bool,
    ) -> Result<Self> {
        check_level(level)?;
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("no samples to summarize"))?;
        let (m, h) = first.shape();
        if samples.iter().any(|s| s.shape() != (m, h)) {
            return Err(Error::invalid("sample paths have inconsistent shapes"));
        }
        let alpha = 1.0 - level;
        let n = samples.len() as f64;
        let mut mean = DMatrix::zeros(m, h);
        let mut lower = DMatrix::zeros(m, h);
        let mut upper = DMatrix::zeros(m, h);
        let mut buf = Vec::with_capacity(samples.len());
        for k in 0..h {
            for j in 0..m {
                buf.clear();
                buf.extend(samples.iter().map(|s| s[(j, k)]));
                mean[(j, k)] = buf.iter().sum::<f64>() / n;
                buf.sort_by(f64::total_cmp);
                lower[(j, k)] = quantile_sorted(&buf, alpha / 2.0);
                upper[(j, k)] = quantile_sorted(&buf, 1.0 - alpha / 2.0);
            }
        }
        let mut out = ForecastResult::new(mean, lower, upper, level, seed)?;
        if keep_samples {
            out.samples = Some(samples);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn interval_widths(&self) -> DMatrix<f64> {
        &self.upper - &self.lower
    }
}
