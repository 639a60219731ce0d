//! Dense linear-algebra helpers shared by the emulator and the DMD family.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::{Error, Result};

/// Smallest diagonal jitter tried when a correlation matrix is not numerically
/// positive definite.
pub const JITTER_FLOOR: f64 = 1e-10;
const JITTER_CEILING: f64 = 1e-6;

/// Cholesky factor of `K + nugget I`, plus whatever extra diagonal jitter was
/// needed to make the factorization succeed (0 when none).
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward_solve_mut(&self, b: &mut DMatrix<f64>) {
        self.factor.l_dirty().solve_lower_triangular_mut(b);
    }

    pub fn forward_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut z = b.clone();
        self.factor.l_dirty().solve_lower_triangular_mut(&mut z);
        z
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }
}

/// Factors `k + nugget I`, escalating a diagonal jitter from [`JITTER_FLOOR`]
/// by decades when the plain factorization fails.
pub fn cholesky_with_jitter(mut k: DMatrix<f64>, nugget: f64) -> Result<JitteredCholesky> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::invalid("cholesky of a non-square matrix"));
    }
    for i in 0..n {
        k[(i, i)] += nugget;
    }
    if let Some(factor) = Cholesky::new(k.clone()) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let mut jitter = JITTER_FLOOR;
    while jitter <= JITTER_CEILING * 1.0001 {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(kj) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "cholesky failed for a {n}x{n} matrix with nugget {nugget:e} even with jitter up to {JITTER_CEILING:e}"
    )))
}

/// Moore-Penrose pseudo-inverse through the SVD, treating singular values
/// below `rcond * s_max` as zero. Returns the rank alongside.
pub fn pinv(a: &DMatrix<f64>, rcond: f64) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rcond * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            rank += 1;
            out += (vt.row(i).transpose() / *s) * u.column(i).transpose();
        }
    }
    (out, rank)
}

/// Complex counterpart of [`pinv`].
pub fn pinv_complex(a: &DMatrix<Complex64>, rcond: f64) -> (DMatrix<Complex64>, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rcond * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            rank += 1;
            let vcol = vt.row(i).adjoint();
            let urow = u.column(i).adjoint();
            out += (vcol * urow).map(|z| z / *s);
        }
    }
    (out, rank)
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(a: &DMatrix<f64>) -> SortedSvd {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = DVector::from_iterator(order.len(), order.iter().map(|&i| svd.singular_values[i]));
    let u = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = DMatrix::from_columns(&order.iter().map(|&i| vt.row(i).transpose()).collect::<Vec<_>>());
    SortedSvd { u, s, v }
}

/// Eigenvalues and unit-norm eigenvectors of a small real (generally
/// nonsymmetric) matrix.
///
/// Eigenvalues come from the real Schur form; each eigenvector is then
/// recovered by inverse iteration on the complex shifted matrix. Conjugate
/// eigenvalue pairs get conjugate eigenvectors.
pub fn eigen_real(a: &DMatrix<f64>) -> Result<(Vec<Complex64>, DMatrix<Complex64>)> {
    let r = a.nrows();
    if r != a.ncols() {
        return Err(Error::invalid("eigendecomposition of a non-square matrix"));
    }
    if r == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("real Schur decomposition did not converge".into()))?;
    let mut eig: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    // Deterministic order: decreasing modulus, then positive imaginary part first.
    eig.sort_by(|x, y| {
        y.norm()
            .total_cmp(&x.norm())
            .then(y.re.total_cmp(&x.re))
            .then(y.im.total_cmp(&x.im))
    });
    for z in eig.iter_mut() {
        if z.im.abs() <= 1e-14 * (1.0 + z.norm()) {
            z.im = 0.0;
        }
    }

    let ac: DMatrix<Complex64> = a.map(|v| Complex64::new(v, 0.0));
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut vecs = DMatrix::<Complex64>::zeros(r, r);
    let mut i = 0;
    while i < r {
        let lambda = eig[i];
        let v = inverse_iteration(&ac, lambda, i, scale)?;
        vecs.set_column(i, &v);
        if lambda.im != 0.0 && i + 1 < r && (eig[i + 1] - lambda.conj()).norm() <= 1e-10 * (1.0 + lambda.norm()) {
            eig[i + 1] = lambda.conj();
            vecs.set_column(i + 1, &v.map(|z| z.conj()));
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok((eig, vecs))
}

fn inverse_iteration(
    a: &DMatrix<Complex64>,
    lambda: Complex64,
    seed_index: usize,
    scale: f64,
) -> Result<DVector<Complex64>> {
    let r = a.nrows();
    // Start vector: the unit vector for this slot plus a small dense part, so
    // repeated eigenvalues with several eigenvectors pick independent ones.
    let mut v = DVector::<Complex64>::from_fn(r, |k, _| {
        let base = if k == seed_index % r { 1.0 } else { 0.0 };
        Complex64::new(base + 1e-3 * (((k * 7 + 3) % 11) as f64 / 11.0), 0.0)
    });
    let mut shift = 1e-10 * scale;
    for _attempt in 0..8 {
        let mut m = a.clone();
        let mu = lambda + Complex64::new(shift, 0.0);
        for k in 0..r {
            m[(k, k)] -= mu;
        }
        let lu = m.lu();
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => {
                    let nrm = w.norm();
                    if nrm == 0.0 {
                        ok = false;
                        break;
                    }
                    v = w / Complex64::new(nrm, 0.0);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            // Fix the phase so the largest entry is real and positive.
            let (imax, _) = v
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.norm().total_cmp(&y.1.norm()))
                .expect("nonempty");
            let phase = v[imax] / Complex64::new(v[imax].norm(), 0.0);
            return Ok(v.map(|z| z / phase));
        }
        shift *= 100.0;
    }
    Err(Error::Numerical(format!("inverse iteration failed for eigenvalue {lambda}")))
}

/// `l * k` for lower-triangular `l`, skipping the blocks above the diagonal.
pub fn lower_tri_mul(l: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    const BLOCK: usize = 128;
    let n = l.nrows();
    let mut z = DMatrix::zeros(n, k.ncols());
    let mut r = 0;
    while r < n {
        let h = BLOCK.min(n - r);
        let end = r + h;
        z.rows_mut(r, h)
            .gemm(1.0, &l.view((r, 0), (h, end)), &k.rows(0, end), 0.0);
        r = end;
    }
    z
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
