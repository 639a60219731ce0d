//! Marginal likelihood and jointly robust prior for the kernel parameters.

use nalgebra::{DMatrix, DVector};

use crate::kernels::{corr_matrix, InputMatrix, KernelSpec, KernelStructure};
use crate::linalg::{cholesky_with_jitter, JitteredCholesky};
use crate::{Error, Result, SnapshotMatrix};

pub const DEFAULT_PRIOR_A: f64 = 0.2;

/// Quantities shared by the likelihood and the fitted model: factor of K̃,
/// L⁻¹1, 1ᵀK̃⁻¹1, GLS means and the per-row quadratic forms S².
#[derive(Debug, Clone)]
pub(crate) struct Factorized {
    pub chol: JitteredCholesky,
    pub l_inv_ones: DVector<f64>,
    pub ones_quad: f64,
    pub mu_hat: DVector<f64>,
    pub s2: DVector<f64>,
    /// L⁻¹(yⱼ − μ̂ⱼ1) stored as columns (n × m).
    pub whitened_resid: DMatrix<f64>,
}

/// Rows whose training outputs are all identical.
pub(crate) fn constant_rows(y: &SnapshotMatrix) -> Vec<bool> {
    y.row_iter()
        .map(|r| r.iter().all(|v| *v == r[0]))
        .collect()
}

pub(crate) fn factorize(spec: &KernelSpec, x: &InputMatrix, y: &SnapshotMatrix) -> Result<Factorized> {
    let n = x.len();
    if y.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "training outputs (columns)",
            expected: n,
            got: y.ncols(),
        });
    }
    let k = corr_matrix(spec, x)?;
    let chol = cholesky_with_jitter(k, spec.nugget).map_err(|e| {
        Error::Numerical(format!("{e} (ranges {:?}, nugget {:e})", spec.ranges, spec.nugget))
    })?;
    let l_inv_ones = chol.forward_solve_vec(&DVector::from_element(n, 1.0));
    let ones_quad = l_inv_ones.norm_squared();
    let mut z = y.transpose();
    chol.forward_solve_mut(&mut z);
    let consts = constant_rows(y);
    let m = y.nrows();
    let mut mu_hat = DVector::zeros(m);
    let mut s2 = DVector::zeros(m);
    for j in 0..m {
        if consts[j] {
            // Exact constants: the GLS mean is the constant and the residual vanishes.
            mu_hat[j] = y[(j, 0)];
            z.column_mut(j).fill(0.0);
            continue;
        }
        let mu = l_inv_ones.dot(&z.column(j)) / ones_quad;
        let mut col = z.column_mut(j);
        col.axpy(-mu, &l_inv_ones, 1.0);
        mu_hat[j] = mu;
        s2[j] = col.norm_squared();
    }
    Ok(Factorized {
        chol,
        l_inv_ones,
        ones_quad,
        mu_hat,
        s2,
        whitened_resid: z,
    })
}

fn log_lik_from(f: &Factorized, consts: &[bool], n: usize) -> f64 {
    let active = consts.iter().filter(|c| !**c).count() as f64;
    let sum_log_s2: f64 = f
        .s2
        .iter()
        .zip(consts)
        .filter(|(_, c)| !**c)
        .map(|(s, _)| s.ln())
        .sum();
    -0.5 * active * f.chol.log_det() - 0.5 * active * f.ones_quad.ln()
        - 0.5 * (n as f64 - 1.0) * sum_log_s2
}

/// Log marginal likelihood of (ranges, nugget) with the means and variances
/// integrated out, up to an additive constant.
///
/// Rows of `y` that are exactly constant carry no information about the
/// kernel and are left out.
pub fn log_marginal_lik(
    spec: &KernelSpec,
    x: &InputMatrix,
    y: &SnapshotMatrix,
) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::invalid("marginal likelihood needs at least 2 training points"));
    }
    let f = factorize(spec, x, y)?;
    Ok(log_lik_from(&f, &constant_rows(y), x.len()))
}

/// Jointly robust prior on inverse ranges and nugget.
#[derive(Debug, Clone, PartialEq)]
pub struct JrPrior {
    pub a: f64,
    pub b: f64,
    pub c: Vec<f64>,
}

impl JrPrior {
    /// Default scaling from the input spread. With one inverse range for a
    /// multi-dimensional input (isotropic kernel), the spread is the diagonal
    /// of the bounding box.
    pub fn from_inputs(x: &InputMatrix, n_ranges: usize, a: f64) -> Result<Self> {
        let n = x.len() as f64;
        let p = x.dim();
        let pt = n_ranges as f64;
        let scale = n.powf(-1.0 / pt);
        let spread: Vec<f64> = x
            .as_matrix()
            .row_iter()
            .map(|r| r.max() - r.min())
            .collect();
        let c: Vec<f64> = if n_ranges == p {
            spread.iter().map(|s| scale * s).collect()
        } else if n_ranges == 1 {
            vec![scale * spread.iter().map(|s| s * s).sum::<f64>().sqrt()]
        } else {
            return Err(Error::DimensionMismatch {
                what: "prior inverse ranges",
                expected: p,
                got: n_ranges,
            });
        };
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid(
                "every input coordinate is constant; the prior scale is degenerate",
            ));
        }
        Ok(JrPrior {
            a,
            b: scale * (a + pt),
            c,
        })
    }

    pub fn log_density(&self, betas: &[f64], eta: f64) -> f64 {
        let s: f64 = self.c.iter().zip(betas).map(|(c, b)| c * b).sum::<f64>() + eta;
        self.a * s.ln() - self.b * s
    }

    /// The value of `sum(C·β) + η` that maximizes the prior.
    pub fn mode_total(&self) -> f64 {
        self.a / self.b
    }
}

/// `a log(s) − b s` with `s = ΣCₗβₗ + η` and default scaling from `x`.
pub fn log_jr_prior(betas: &[f64], eta: f64, x: &InputMatrix, prior_a: f64) -> Result<f64> {
    if betas.iter().any(|b| !(*b > 0.0)) || !(eta >= 0.0) {
        return Err(Error::invalid("inverse ranges must be positive and the nugget non-negative"));
    }
    Ok(JrPrior::from_inputs(x, betas.len(), prior_a)?.log_density(betas, eta))
}

/// Log posterior over `theta = (log β, [log η])` used by the optimizer.
pub(crate) struct Objective<'a> {
    pub template: &'a KernelSpec,
    pub x: &'a InputMatrix,
    pub y: &'a SnapshotMatrix,
    pub prior: JrPrior,
    pub consts: Vec<bool>,
    pub fix_nugget_zero: bool,
}

pub(crate) const THETA_BOUND: f64 = 30.0;

impl<'a> Objective<'a> {
    pub fn new(
        template: &'a KernelSpec,
        x: &'a InputMatrix,
        y: &'a SnapshotMatrix,
        prior_a: f64,
        fix_nugget_zero: bool,
    ) -> Result<Self> {
        let n_ranges = match template.structure {
            KernelStructure::Isotropic => 1,
            KernelStructure::Product => x.dim(),
        };
        template.check_input_dim(x.dim())?;
        Ok(Objective {
            template,
            x,
            y,
            prior: JrPrior::from_inputs(x, n_ranges, prior_a)?,
            consts: constant_rows(y),
            fix_nugget_zero,
        })
    }

    pub fn n_ranges(&self) -> usize {
        self.prior.c.len()
    }

    pub fn dim(&self) -> usize {
        self.n_ranges() + usize::from(!self.fix_nugget_zero)
    }

    /// (inverse ranges, nugget) for a parameter vector.
    pub fn params(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let t: Vec<f64> = theta.iter().map(|v| v.clamp(-THETA_BOUND, THETA_BOUND)).collect();
        let p = self.n_ranges();
        let betas = t[..p].iter().map(|v| v.exp()).collect();
        let eta = if self.fix_nugget_zero { 0.0 } else { t[p].exp() };
        (betas, eta)
    }

    pub fn spec_at(&self, theta: &[f64]) -> Result<KernelSpec> {
        let (betas, eta) = self.params(theta);
        self.template
            .with_params(betas.iter().map(|b| 1.0 / b).collect(), eta)
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let (betas, eta) = self.params(theta);
        let spec = self.spec_at(theta)?;
        let f = factorize(&spec, self.x, self.y)?;
        let v = log_lik_from(&f, &self.consts, self.x.len()) + self.prior.log_density(&betas, eta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "non-finite objective at ranges {:?}, nugget {eta:e}",
                spec.ranges
            )))
        }
    }
}
