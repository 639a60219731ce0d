//! Higher-order DMD: DMD on time-delay stacked snapshots.

use nalgebra::{DMatrix, DVector};

use super::{fit_pair, forecast_warnings, gaussian_bands, DmdModel};
use crate::forecast::{check_level, ForecastResult};
use crate::{Error, Result, SnapshotMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HodmdModel {
    /// Number of stacked snapshots.
    pub d: usize,
    /// Skip between consecutive training pairs.
    pub delta_t: usize,
    /// DMD fitted on the md-dimensional augmented snapshots.
    pub inner: DmdModel,
    /// Snapshot dimension m.
    pub m: usize,
}

impl HodmdModel {
    pub fn tau2_aug(&self) -> f64 {
        self.inner.tau2_hat
    }
}

/// Augmented pair `(Ỹ₁, Ỹ₂)`, each md × q. Column i of Ỹ₁ stacks snapshots
/// `1 + iΔt ..= d + iΔt` (1-based) and Ỹ₂ the same window shifted by one.
pub fn build_augmented(
    y: &SnapshotMatrix,
    d: usize,
    delta_t: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if d == 0 || delta_t == 0 {
        return Err(Error::invalid(format!(
            "lag depth and skip must be at least 1, got d = {d}, delta_t = {delta_t}"
        )));
    }
    let (m, n) = y.shape();
    let min_n = d + 1 + delta_t;
    if n < min_n {
        return Err(Error::invalid(format!(
            "HODMD with d = {d}, delta_t = {delta_t} needs at least {min_n} snapshots, got {n}"
        )));
    }
    let q = (n - d - 1) / delta_t + 1;
    let mut y1 = DMatrix::zeros(m * d, q);
    let mut y2 = DMatrix::zeros(m * d, q);
    for i in 0..q {
        let start = i * delta_t;
        for b in 0..d {
            y1.view_mut((b * m, i), (m, 1)).copy_from(&y.column(start + b));
            y2.view_mut((b * m, i), (m, 1)).copy_from(&y.column(start + b + 1));
        }
    }
    Ok((y1, y2))
}

pub fn fit_hodmd(
    y: &SnapshotMatrix,
    d: usize,
    delta_t: usize,
    energy: f64,
    rank_override: Option<usize>,
) -> Result<HodmdModel> {
    let (y1, y2) = build_augmented(y, d, delta_t)?;
    let inner = fit_pair(&y1, &y2, energy, rank_override, y.ncols())?;
    Ok(HodmdModel {
        d,
        delta_t,
        inner,
        m: y.nrows(),
    })
}

/// Forecast from the `d` most recent snapshots (m × d, oldest first). Each
/// step advances the augmented state once and reads its newest block.
pub fn forecast_hodmd(
    model: &HodmdModel,
    recent: &DMatrix<f64>,
    horizon: usize,
    level: f64,
) -> Result<ForecastResult> {
    check_level(level)?;
    if recent.shape() != (model.m, model.d) {
        return Err(Error::invalid(format!(
            "recent snapshots must be {}x{}, got {}x{}",
            model.m,
            model.d,
            recent.nrows(),
            recent.ncols()
        )));
    }
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    let m = model.m;
    let newest = (model.d - 1) * m;
    let mut z = DVector::from_column_slice(recent.as_slice());
    let mut mean = DMatrix::zeros(m, horizon);
    for k in 0..horizon {
        z = model.inner.apply(&z);
        mean.set_column(k, &z.rows(newest, m));
    }
    let var = model.inner.variance_path(horizon, None).rows(newest, m).into_owned();
    gaussian_bands(mean, &var, level, forecast_warnings(&model.inner, &[]))
}
