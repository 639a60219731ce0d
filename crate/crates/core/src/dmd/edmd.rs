//! Extended DMD with a pluggable dictionary of lifting functions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{fit_pair, forecast_warnings, gaussian_bands, DmdModel};
use crate::forecast::{check_level, ForecastResult};
use crate::linalg::pinv;
use crate::{Error, Result, SnapshotMatrix};

/// A scalar observable on the output space.
pub type Observable = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Lifting dictionary.
#[derive(Clone)]
pub enum Dictionary {
    /// The coordinates themselves.
    Identity,
    /// Every monomial of total degree 0..=k, graded, lexicographic within a
    /// degree.
    Polynomial(usize),
    /// `exp(−γ‖y − c‖²)` for each center column c.
    Rbf { centers: DMatrix<f64>, gamma: f64 },
    Custom(Vec<Observable>),
}

impl fmt::Debug for Dictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dictionary::Identity => write!(f, "identity"),
            Dictionary::Polynomial(k) => write!(f, "polynomial:{k}"),
            Dictionary::Rbf { centers, gamma } => {
                write!(f, "rbf({} centers, gamma {gamma})", centers.ncols())
            }
            Dictionary::Custom(v) => write!(f, "custom({} functions)", v.len()),
        }
    }
}

/// Exponent vectors of all monomials in `m` variables up to total degree `k`.
fn monomials(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, left: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            let mut e = vec![0; m];
            for &i in cur.iter() {
                e[i] += 1;
            }
            out.push(e);
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(m, left - 1, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 0..=k {
        rec(m, deg, 0, &mut Vec::new(), &mut out);
    }
    out
}

impl Dictionary {
    /// Number of lifted features for an m-dimensional output.
    pub fn size(&self, m: usize) -> usize {
        match self {
            Dictionary::Identity => m,
            Dictionary::Polynomial(k) => monomials(m, *k).len(),
            Dictionary::Rbf { centers, .. } => centers.ncols(),
            Dictionary::Custom(v) => v.len(),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        match self {
            Dictionary::Rbf { centers, gamma } => {
                if centers.nrows() != m {
                    return Err(Error::DimensionMismatch {
                        what: "rbf center dimension",
                        expected: m,
                        got: centers.nrows(),
                    });
                }
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::invalid(format!("rbf gamma must be positive, got {gamma}")));
                }
            }
            Dictionary::Custom(v) if v.is_empty() => {
                return Err(Error::invalid("custom dictionary is empty"));
            }
            _ => {}
        }
        if self.size(m) == 0 {
            return Err(Error::invalid("dictionary has no functions"));
        }
        Ok(())
    }
}

/// Lifts every column of `y`; errors name the first dictionary entry that
/// produced a non-finite value.
pub fn lift(dict: &Dictionary, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = y.nrows();
    dict.validate(m)?;
    let out = match dict {
        Dictionary::Identity => y.clone(),
        Dictionary::Polynomial(k) => {
            let mons = monomials(m, *k);
            DMatrix::from_fn(mons.len(), y.ncols(), |f, t| {
                mons[f]
                    .iter()
                    .zip(y.column(t).iter())
                    .map(|(e, v)| v.powi(*e as i32))
                    .product()
            })
        }
        Dictionary::Rbf { centers, gamma } => DMatrix::from_fn(centers.ncols(), y.ncols(), |f, t| {
            (-gamma * (y.column(t) - centers.column(f)).norm_squared()).exp()
        }),
        Dictionary::Custom(fs) => DMatrix::from_fn(fs.len(), y.ncols(), |f, t| {
            fs[f](y.column(t).as_slice())
        }),
    };
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        let (f, t) = (i % out.nrows(), i / out.nrows());
        return Err(Error::invalid(format!(
            "dictionary function {f} is not finite at snapshot {t}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EdmdModel {
    pub dictionary: Dictionary,
    /// DMD of the lifted snapshots.
    pub lifted: DmdModel,
    /// m × m̃ least-squares map from lifted features back to outputs.
    pub p_matrix: DMatrix<f64>,
}

impl EdmdModel {
    /// m̃ × m̃ lifted operator.
    pub fn a_edmd(&self) -> DMatrix<f64> {
        self.lifted.operator_dense()
    }

    pub fn tau2_edmd(&self) -> f64 {
        self.lifted.tau2_hat
    }
}

pub fn fit_edmd(
    y: &SnapshotMatrix,
    dictionary: Dictionary,
    energy: f64,
    rank_override: Option<usize>,
) -> Result<EdmdModel> {
    let n = y.ncols();
    if n < 2 {
        return Err(Error::invalid("EDMD needs at least 2 snapshots"));
    }
    let k = lift(&dictionary, y)?;
    let k1 = k.columns(0, n - 1).into_owned();
    let k2 = k.columns(1, n - 1).into_owned();
    let lifted = fit_pair(&k1, &k2, energy, rank_override, n)?;
    let (k_pinv, _) = pinv(&k, 1e-12);
    let p_matrix = y * k_pinv;
    Ok(EdmdModel {
        dictionary,
        lifted,
        p_matrix,
    })
}

/// Lift `y_n`, advance in the lifted space, project back. Intervals use the
/// lifted Gaussian posterior pushed through the projection.
pub fn forecast_edmd(
    model: &EdmdModel,
    y_n: &DVector<f64>,
    horizon: usize,
    level: f64,
) -> Result<ForecastResult> {
    check_level(level)?;
    if y_n.len() != model.p_matrix.nrows() {
        return Err(Error::DimensionMismatch {
            what: "state vector",
            expected: model.p_matrix.nrows(),
            got: y_n.len(),
        });
    }
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    let mut z: DVector<f64> = lift(&model.dictionary, &DMatrix::from_column_slice(y_n.len(), 1, y_n.as_slice()))?
        .column(0)
        .into_owned();
    let mut mean = DMatrix::zeros(y_n.len(), horizon);
    for k in 0..horizon {
        z = model.lifted.apply(&z);
        mean.set_column(k, &(&model.p_matrix * &z));
    }
    let var = model.lifted.variance_path(horizon, Some(&model.p_matrix));
    gaussian_bands(mean, &var, level, forecast_warnings(&model.lifted, &[]))
}
