//! Parallel partial Gaussian process emulator.
//!
//! All output coordinates share one correlation matrix K̃ = K + ηI, so after a
//! single Cholesky factorization every coordinate's predictive distribution
//! costs O(n) extra work. Means and variances are integrated out, giving a
//! Student-t predictive distribution with n − 1 degrees of freedom.

mod fit;
mod forecast;
mod objective;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{cross_corr, cross_corr_batch, InputMatrix, KernelSpec};
use crate::linalg::{cholesky_with_jitter, lower_tri_mul, JitteredCholesky};
use crate::{Error, Result, SnapshotMatrix};

pub use fit::{fit_ppgp, FitConfig, FitReport, Optimizer};
pub use forecast::{
    forecast_chains, forecast_plugin_mean, forecast_rk4_emulated, forecast_rk4_plugin_mean, ChainConfig, IdentityInput,
    InputBuilder, LaggedInput, StencilSpec, DEFAULT_CHAINS, subsample_columns,
};
pub use objective::{log_jr_prior, log_marginal_lik, JrPrior, DEFAULT_PRIOR_A};

/// How the per-coordinate mean is estimated when building a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanEstimate {
    /// Generalized least squares, μ̂ⱼ = 1ᵀK̃⁻¹yⱼ / 1ᵀK̃⁻¹1.
    #[default]
    Gls,
    /// μ̂ⱼ = 0; the predictive mean is then kernel ridge regression.
    Zero,
}

/// Marginal Student-t predictive distribution of one output coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveT {
    pub location: f64,
    pub scale2: f64,
    pub dof: u64,
}

impl PredictiveT {
    /// Central interval holding `level` of the probability mass.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let q = student_t_quantile(self.dof, 0.5 + level / 2.0);
        let half = q * self.scale2.sqrt();
        (self.location - half, self.location + half)
    }
}

pub(crate) fn student_t_quantile(dof: u64, p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("dof >= 1")
        .inverse_cdf(p)
}

/// Fitted emulator.
#[derive(Debug, Clone)]
pub struct PpgpModel {
    x: InputMatrix,
    y: SnapshotMatrix,
    spec: KernelSpec,
    mean_estimate: MeanEstimate,
    chol: JitteredCholesky,
    /// Explicit L⁻¹, used to batch predictive variances as a matrix product.
    l_inv: DMatrix<f64>,
    l_inv_ones: DVector<f64>,
    ones_quad: f64,
    mu_hat: DVector<f64>,
    sigma2_hat: DVector<f64>,
    /// Row j is (yⱼ − μ̂ⱼ1)ᵀK̃⁻¹.
    weights: DMatrix<f64>,
    data_scale: f64,
    pub report: FitReport,
}

/// Means and K* for a batch of inputs.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    /// m × B predictive locations.
    pub mean: DMatrix<f64>,
    /// K* per input (B entries); the scale² of coordinate j is σ̂ⱼ²·K*.
    pub kstar: Option<DVector<f64>>,
}

impl PpgpModel {
    /// Builds the model at fixed kernel parameters.
    pub fn with_params(
        x: InputMatrix,
        y: SnapshotMatrix,
        spec: KernelSpec,
        mean_estimate: MeanEstimate,
    ) -> Result<Self> {
        let n = x.len();
        if n < 2 {
            return Err(Error::invalid("the emulator needs at least 2 training points"));
        }
        if y.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "training outputs (columns)",
                expected: n,
                got: y.ncols(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("training outputs must be finite"));
        }
        spec.check_input_dim(x.dim())?;
        let (chol, l_inv_ones, ones_quad, mu_hat, s2, mut z) = match mean_estimate {
            MeanEstimate::Gls => {
                let f = objective::factorize(&spec, &x, &y)?;
                (f.chol, f.l_inv_ones, f.ones_quad, f.mu_hat, f.s2, f.whitened_resid)
            }
            MeanEstimate::Zero => {
                let k = crate::kernels::corr_matrix(&spec, &x)?;
                let chol = cholesky_with_jitter(k, spec.nugget)?;
                let l1 = chol.forward_solve_vec(&DVector::from_element(n, 1.0));
                let q = l1.norm_squared();
                let mut z = y.transpose();
                chol.forward_solve_mut(&mut z);
                let s2 = DVector::from_iterator(y.nrows(), z.column_iter().map(|c| c.norm_squared()));
                (chol, l1, q, DVector::zeros(y.nrows()), s2, z)
            }
        };
        // K̃⁻¹(yⱼ − μ̂ⱼ1) = L⁻ᵀ L⁻¹(yⱼ − μ̂ⱼ1)
        chol.factor.l_dirty().tr_solve_lower_triangular_mut(&mut z);
        let weights = z.transpose();
        let mut l_inv = DMatrix::<f64>::identity(n, n);
        chol.forward_solve_mut(&mut l_inv);
        let l_inv = l_inv.lower_triangle();
        let sigma2_hat = s2 / (n as f64 - 1.0);
        let data_scale = x.as_matrix().amax().max(y.amax());
        Ok(PpgpModel {
            x,
            y,
            spec,
            mean_estimate,
            chol,
            l_inv,
            l_inv_ones,
            ones_quad,
            mu_hat,
            sigma2_hat,
            weights,
            data_scale,
            report: FitReport::default(),
        })
    }

    pub fn inputs(&self) -> &InputMatrix {
        &self.x
    }

    pub fn outputs(&self) -> &SnapshotMatrix {
        &self.y
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn mean_estimate(&self) -> MeanEstimate {
        self.mean_estimate
    }

    pub fn n_train(&self) -> usize {
        self.x.len()
    }

    pub fn input_dim(&self) -> usize {
        self.x.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn dof(&self) -> u64 {
        self.n_train() as u64 - 1
    }

    /// Diagonal jitter added on top of the nugget to factor K̃ (0 if none).
    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    /// Nugget actually on the diagonal of K̃: estimated nugget plus jitter.
    pub fn effective_nugget(&self) -> f64 {
        self.spec.nugget + self.chol.jitter
    }

    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn mu_hat(&self) -> &DVector<f64> {
        &self.mu_hat
    }

    pub fn sigma2_hat(&self) -> &DVector<f64> {
        &self.sigma2_hat
    }

    pub fn weight_matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn ones_quad(&self) -> f64 {
        self.ones_quad
    }

    /// Largest absolute value in the training inputs and outputs.
    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    fn check_point(&self, x_star: &[f64]) -> Result<()> {
        if x_star.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "test input",
                expected: self.input_dim(),
                got: x_star.len(),
            });
        }
        Ok(())
    }

    fn kstar_from(&self, z: &DVector<f64>) -> f64 {
        let ones_k = self.l_inv_ones.dot(z);
        let v = 1.0 + self.effective_nugget() - z.norm_squared()
            + (1.0 - ones_k).powi(2) / self.ones_quad;
        v.max(0.0)
    }

    /// Per-coordinate predictive distributions at `x_star`.
    pub fn predict(&self, x_star: &[f64]) -> Result<Vec<PredictiveT>> {
        self.check_point(x_star)?;
        let k = cross_corr(&self.spec, &self.x, x_star)?;
        let z = self.chol.forward_solve_vec(&k);
        let kstar = self.kstar_from(&z);
        let loc = &self.mu_hat + &self.weights * &k;
        Ok((0..self.output_dim())
            .map(|j| PredictiveT {
                location: loc[j],
                scale2: self.sigma2_hat[j] * kstar,
                dof: self.dof(),
            })
            .collect())
    }

    /// Predictive locations (and optionally K*) for every column of `queries`.
    pub fn predict_batch(&self, queries: &DMatrix<f64>, with_variance: bool) -> Result<BatchPrediction> {
        let k = self.cross_corr_par(queries)?;
        let mut mean = &self.weights * &k;
        for (j, mut row) in mean.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.mu_hat[j]);
        }
        let kstar = with_variance.then(|| {
            let z = lower_tri_mul(&self.l_inv, &k);
            let nug = 1.0 + self.effective_nugget();
            let ones_k = z.tr_mul(&self.l_inv_ones);
            DVector::from_iterator(
                z.ncols(),
                z.column_iter().zip(ones_k.iter()).map(|(c, o)| {
                    (nug - c.norm_squared() + (1.0 - o).powi(2) / self.ones_quad).max(0.0)
                }),
            )
        });
        Ok(BatchPrediction { mean, kstar })
    }

    fn cross_corr_par(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        const CHUNK: usize = 256;
        let b = queries.ncols();
        if b <= CHUNK || rayon::current_num_threads() == 1 {
            return cross_corr_batch(&self.spec, &self.x, queries);
        }
        let parts: Vec<DMatrix<f64>> = (0..b)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|s| {
                let w = CHUNK.min(b - s);
                cross_corr_batch(&self.spec, &self.x, &queries.columns(s, w).into_owned())
            })
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(self.n_train(), b);
        for (i, part) in parts.into_iter().enumerate() {
            out.columns_mut(i * CHUNK, part.ncols()).copy_from(&part);
        }
        Ok(out)
    }

    /// Weight vector `v` with `ŷ(x*) = Y vᵀ`, and the residual part `W k(x*)`.
    pub fn prediction_weights(&self, x_star: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_point(x_star)?;
        let k = cross_corr(&self.spec, &self.x, x_star)?;
        let kinv_k = self.chol.solve_vec(&k);
        let kinv_ones = self.chol.solve_vec(&DVector::from_element(self.n_train(), 1.0));
        let ones_k = kinv_k.sum();
        let v = match self.mean_estimate {
            MeanEstimate::Gls => kinv_ones * ((1.0 - ones_k) / self.ones_quad) + kinv_k,
            MeanEstimate::Zero => kinv_k,
        };
        Ok((v, &self.weights * k))
    }
}
