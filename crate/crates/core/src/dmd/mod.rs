//! Exact, higher-order and extended dynamic mode decomposition.
//!
//! Each variant is read as the maximum likelihood estimator of a linear
//! Gaussian state-space model `y_{t+1} = A y_t + ε`, `ε ~ N(0, τ²I)`, which
//! gives the Gaussian forecast posterior used for predictive intervals.

mod edmd;
mod hodmd;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::forecast::{check_level, ForecastResult};
use crate::linalg::{eigen_real, pinv_complex, thin_svd};
use crate::{Error, Result, SnapshotMatrix};

pub use edmd::{fit_edmd, forecast_edmd, lift, Dictionary, EdmdModel};
pub use hodmd::{build_augmented, fit_hodmd, forecast_hodmd, HodmdModel};

/// Default fraction of squared singular-value energy retained.
pub const DEFAULT_ENERGY: f64 = 0.99;

/// Largest row count for which the m×m operator is stored densely, as a
/// multiple of the rank.
const DENSE_FACTOR: usize = 4;

/// Smallest `r` whose leading squared singular values reach `energy` of the
/// total.
pub fn choose_rank(singular_values: &[f64], energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::invalid(format!("energy must lie in (0, 1], got {energy}")));
    }
    if singular_values.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("singular values must be finite and non-negative"));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::invalid("all singular values are zero"));
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc / total >= energy {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.iter().filter(|s| **s > 0.0).count())
}

/// Fitted DMD operator `Â = left · u_rᵀ` with its spectral decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdModel {
    pub rank: usize,
    /// m × r leading left singular vectors of the lagged snapshots.
    pub u_r: DMatrix<f64>,
    pub sigma_r: DVector<f64>,
    /// (n − 1) × r leading right singular vectors.
    pub v_r: DMatrix<f64>,
    /// m × r factor `Y₂ V_r Σ_r⁻¹`.
    pub left: DMatrix<f64>,
    /// r × r projected operator `u_rᵀ · left`.
    pub a_tilde: DMatrix<f64>,
    pub eigvals: Vec<Complex64>,
    /// m × r DMD modes.
    pub modes: DMatrix<Complex64>,
    pub amplitudes: DVector<Complex64>,
    pub tau2_hat: f64,
    /// Number of snapshots the model was fitted on.
    pub n_train: usize,
    pub warnings: Vec<String>,
    dense: Option<DMatrix<f64>>,
}

impl DmdModel {
    /// Rebuilds a model from stored factors, recomputing the derived pieces
    /// that are cheap (projected operator, dense form).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        u_r: DMatrix<f64>,
        sigma_r: DVector<f64>,
        v_r: DMatrix<f64>,
        left: DMatrix<f64>,
        eigvals: Vec<Complex64>,
        modes: DMatrix<Complex64>,
        amplitudes: DVector<Complex64>,
        tau2_hat: f64,
        n_train: usize,
    ) -> Result<Self> {
        let r = sigma_r.len();
        let m = u_r.nrows();
        let checks = [
            ("u_r columns", r, u_r.ncols()),
            ("v_r columns", r, v_r.ncols()),
            ("operator factor rows", m, left.nrows()),
            ("operator factor columns", r, left.ncols()),
            ("eigenvalue count", r, eigvals.len()),
            ("mode rows", m, modes.nrows()),
            ("mode columns", r, modes.ncols()),
            ("amplitude count", r, amplitudes.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        if !(tau2_hat.is_finite() && tau2_hat >= 0.0) {
            return Err(Error::invalid(format!("noise variance must be non-negative, got {tau2_hat}")));
        }
        let a_tilde = u_r.tr_mul(&left);
        let dense = (m <= DENSE_FACTOR * r).then(|| &left * u_r.transpose());
        Ok(DmdModel {
            rank: r,
            u_r,
            sigma_r,
            v_r,
            left,
            a_tilde,
            eigvals,
            modes,
            amplitudes,
            tau2_hat,
            n_train,
            warnings: Vec::new(),
            dense,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.u_r.nrows()
    }

    /// `Â y`, through the factored form unless the dense operator is cached.
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.dense {
            Some(a) => a * y,
            None => &self.left * self.u_r.tr_mul(y),
        }
    }

    /// The m × m operator `Â`.
    pub fn operator_dense(&self) -> DMatrix<f64> {
        match &self.dense {
            Some(a) => a.clone(),
            None => &self.left * self.u_r.transpose(),
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigvals.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn check_state(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "state vector",
                expected: self.state_dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Per-step diagonals of the forecast covariance `τ̂² Σᵢ Âⁱ(Âᵀ)ⁱ`,
    /// mapped through `project` (rows of a p × m matrix) when given.
    ///
    /// The covariance is kept as `τ̂²I + L G Lᵀ` with `L = left` and the r × r
    /// recursion `G ← τ̂²I + Ã G Ãᵀ`, which is exact because `Â = L U_rᵀ` and
    /// `U_rᵀU_r = I`.
    pub(crate) fn variance_path(
        &self,
        horizon: usize,
        project: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let r = self.rank;
        let (lp, base) = match project {
            Some(p) => (
                p * &self.left,
                DVector::from_iterator(p.nrows(), p.row_iter().map(|row| row.norm_squared())),
            ),
            None => (self.left.clone(), DVector::from_element(self.state_dim(), 1.0)),
        };
        let tau2 = self.tau2_hat;
        let mut g = DMatrix::<f64>::zeros(r, r);
        let mut out = DMatrix::zeros(lp.nrows(), horizon);
        for k in 0..horizon {
            let lg = &lp * &g;
            for i in 0..lp.nrows() {
                out[(i, k)] = tau2 * base[i] + lg.row(i).dot(&lp.row(i));
            }
            g = &self.a_tilde * &g * self.a_tilde.transpose();
            for d in 0..r {
                g[(d, d)] += tau2;
            }
        }
        out
    }
}

/// Core estimator: the DMD operator mapping `y1` columns to `y2` columns.
pub(crate) fn fit_pair(
    y1: &DMatrix<f64>,
    y2: &DMatrix<f64>,
    energy: f64,
    rank_override: Option<usize>,
    n_train: usize,
) -> Result<DmdModel> {
    if y1.shape() != y2.shape() {
        return Err(Error::invalid("snapshot pair matrices differ in shape"));
    }
    if y1.iter().chain(y2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("snapshots must be finite"));
    }
    if y1.amax() == 0.0 {
        return Err(Error::invalid("the lagged snapshot matrix is all zero"));
    }
    let (m, q) = y1.shape();
    let svd = thin_svd(y1);
    let s = svd.s.as_slice();
    let tol = s[0] * (m.max(q) as f64) * f64::EPSILON;
    let numeric_rank = s.iter().filter(|v| **v > tol).count();
    let mut warnings = Vec::new();
    let mut r = match rank_override {
        Some(r) => {
            if r == 0 || r > m.min(q) {
                return Err(Error::invalid(format!(
                    "rank override {r} outside 1..={}",
                    m.min(q)
                )));
            }
            r
        }
        None => choose_rank(s, energy)?,
    };
    if r > numeric_rank {
        warnings.push(format!(
            "rank {r} exceeds the numerical rank {numeric_rank} of the snapshots; truncated"
        ));
        r = numeric_rank;
    }
    let u_r = svd.u.columns(0, r).into_owned();
    let sigma_r = DVector::from_column_slice(&s[..r]);
    let v_r = svd.v.columns(0, r).into_owned();
    let mut left = y2 * &v_r;
    for (mut c, sv) in left.column_iter_mut().zip(sigma_r.iter()) {
        c /= *sv;
    }
    let (eigvals, omegas) = eigen_real(&u_r.tr_mul(&left))?;
    let left_c = left.map(|v| Complex64::new(v, 0.0));
    let mut modes = &left_c * &omegas;
    for (mut c, lam) in modes.column_iter_mut().zip(eigvals.iter()) {
        // Zero eigenvalues have no well-defined scaling; keep the raw vector.
        if lam.norm() > tol {
            c /= *lam;
        }
    }
    let (phi_pinv, _) = pinv_complex(&modes, 1e-12);
    let y_first = y1.column(0).map(|v| Complex64::new(v, 0.0));
    let amplitudes = phi_pinv * y_first;

    let resid = y2 - &left * u_r.tr_mul(y1);
    let tau2_hat = resid.norm_squared() / (m * q) as f64;
    let mut model = DmdModel::from_parts(
        u_r, sigma_r, v_r, left, eigvals, modes, amplitudes, tau2_hat, n_train,
    )?;
    if model.spectral_radius() > 1.0 + 1e-12 {
        warnings.push(format!(
            "spectral radius {:.6} exceeds 1; long forecasts grow without bound",
            model.spectral_radius()
        ));
    }
    model.warnings = warnings;
    Ok(model)
}

/// Exact DMD of an m × n snapshot matrix.
pub fn fit_dmd(y: &SnapshotMatrix, energy: f64, rank_override: Option<usize>) -> Result<DmdModel> {
    let n = y.ncols();
    if n < 2 {
        return Err(Error::invalid("DMD needs at least 2 snapshots"));
    }
    let y1 = y.columns(0, n - 1).into_owned();
    let y2 = y.columns(1, n - 1).into_owned();
    fit_pair(&y1, &y2, energy, rank_override, n)
}

/// Least-squares amplitudes over the whole trajectory, and whether the
/// stacked system was rank deficient (a minimum-norm solution is returned).
pub fn amplitudes_lsq(model: &DmdModel, y: &SnapshotMatrix) -> Result<(DVector<Complex64>, bool)> {
    let m = model.state_dim();
    if y.nrows() != m {
        return Err(Error::DimensionMismatch {
            what: "snapshot rows",
            expected: m,
            got: y.nrows(),
        });
    }
    let n = y.ncols();
    let r = model.rank;
    let mut stacked = DMatrix::<Complex64>::zeros(m * n, r);
    let mut pw = vec![Complex64::new(1.0, 0.0); r];
    for t in 0..n {
        for i in 0..r {
            for j in 0..m {
                stacked[(t * m + j, i)] = model.modes[(j, i)] * pw[i];
            }
            pw[i] *= model.eigvals[i];
        }
    }
    let rhs = DVector::from_iterator(m * n, y.iter().map(|v| Complex64::new(*v, 0.0)));
    let (p, rank) = pinv_complex(&stacked, 1e-12);
    Ok((p * rhs, rank < r))
}

/// `Φ Λ^{t−1} b` with 1-based `t`; the real part is returned.
pub fn reconstruct(model: &DmdModel, t: usize) -> Result<DVector<f64>> {
    if t < 1 {
        return Err(Error::invalid("reconstruction index is 1-based"));
    }
    let coef = DVector::from_iterator(
        model.rank,
        model
            .amplitudes
            .iter()
            .zip(&model.eigvals)
            .map(|(b, l)| b * l.powu((t - 1) as u32)),
    );
    Ok((&model.modes * coef).map(|z| z.re))
}

/// `Âᵏ y_n` for k = 1..=horizon, one column per step.
pub fn forecast_dmd(model: &DmdModel, y_n: &DVector<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    model.check_state(y_n)?;
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    let mut out = DMatrix::zeros(y_n.len(), horizon);
    let mut y = y_n.clone();
    for k in 0..horizon {
        y = model.apply(&y);
        out.set_column(k, &y);
    }
    Ok(out)
}

/// Gaussian forecast posterior `steps_ahead` steps past the last training
/// snapshot: mean `Âᵏ y_n` and covariance `τ̂² Σ_{i<k} Âⁱ(Âᵀ)ⁱ`.
pub fn dmd_posterior(
    model: &DmdModel,
    y_n: &DVector<f64>,
    steps_ahead: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.check_state(y_n)?;
    if steps_ahead == 0 {
        return Err(Error::invalid("the posterior target must lie after the training data"));
    }
    let mean = forecast_dmd(model, y_n, steps_ahead)?.column(steps_ahead - 1).into_owned();
    let r = model.rank;
    let tau2 = model.tau2_hat;
    let mut g = DMatrix::<f64>::zeros(r, r);
    for _ in 1..steps_ahead {
        g = &model.a_tilde * &g * model.a_tilde.transpose();
        for d in 0..r {
            g[(d, d)] += tau2;
        }
    }
    let m = model.state_dim();
    let mut cov = &model.left * g * model.left.transpose();
    for i in 0..m {
        cov[(i, i)] += tau2;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Intervals from per-step mean and variance paths.
pub(crate) fn gaussian_bands(
    mean: DMatrix<f64>,
    var: &DMatrix<f64>,
    level: f64,
    warnings: Vec<String>,
) -> Result<ForecastResult> {
    check_level(level)?;
    let z = normal_quantile(0.5 + level / 2.0);
    let half = var.map(|v| z * v.max(0.0).sqrt());
    let lower = &mean - &half;
    let upper = &mean + &half;
    let mut out = ForecastResult::new(mean, lower, upper, level, None)?;
    out.warnings = warnings;
    Ok(out)
}

/// DMD forecast with Gaussian intervals at `level`.
pub fn forecast_dmd_intervals(
    model: &DmdModel,
    y_n: &DVector<f64>,
    horizon: usize,
    level: f64,
) -> Result<ForecastResult> {
    check_level(level)?;
    let mean = forecast_dmd(model, y_n, horizon)?;
    let var = model.variance_path(horizon, None);
    gaussian_bands(mean, &var, level, forecast_warnings(model, &[]))
}

pub(crate) fn forecast_warnings(model: &DmdModel, extra: &[String]) -> Vec<String> {
    let mut w: Vec<String> = model
        .warnings
        .iter()
        .filter(|s| s.starts_with("spectral radius"))
        .cloned()
        .collect();
    w.extend_from_slice(extra);
    w
}

/// Summary written next to model payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdSummary {
    pub rank: usize,
    /// Eigenvalues as `[re, im]` pairs.
    pub eigenvalues: Vec<[f64; 2]>,
    pub tau2_hat: f64,
    pub n_train: usize,
    pub spectral_radius: f64,
}

impl DmdModel {
    pub fn summary(&self) -> DmdSummary {
        DmdSummary {
            rank: self.rank,
            eigenvalues: self.eigvals.iter().map(|z| [z.re, z.im]).collect(),
            tau2_hat: self.tau2_hat,
            n_train: self.n_train,
            spectral_radius: self.spectral_radius(),
        }
    }
}

#[cfg(test)]
mod tests;
