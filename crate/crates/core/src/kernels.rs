//! Correlation kernels and the matrices built from them.
//!
//! Two families are supported, the power-exponential kernel
//! `exp(-d^alpha / gamma)` and the closed-form Matérn kernel with roughness
//! 2.5. Either can be isotropic (one range, Euclidean distance) or a product
//! of one-dimensional kernels with a range per input coordinate.
//!
//! The nugget is carried by [`KernelSpec`] but is never added by the kernel
//! itself: `kernel_eval(x, x) == 1` always.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default roughness for the power-exponential family.
pub const DEFAULT_POW_EXP_ALPHA: f64 = 1.9;

const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    PowExp { alpha: f64 },
    Matern25,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStructure {
    Isotropic,
    Product,
}

impl KernelFamily {
    /// One-dimensional correlation at distance `d >= 0` with range `gamma`.
    #[inline]
    pub fn correlation(self, d: f64, gamma: f64) -> f64 {
        match self {
            KernelFamily::Matern25 => {
                let r = SQRT_5 * d / gamma;
                (1.0 + r + r * r / 3.0) * (-r).exp()
            }
            KernelFamily::PowExp { alpha } => (-d.powf(alpha) / gamma).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecRepr", into = "KernelSpecRepr")]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub structure: KernelStructure,
    /// One entry for isotropic kernels, one per input coordinate for product kernels.
    pub ranges: Vec<f64>,
    pub nugget: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FamilyName {
    PowExp,
    #[serde(rename = "matern_2_5")]
    Matern25,
}

#[derive(Serialize, Deserialize)]
struct KernelSpecRepr {
    family: FamilyName,
    structure: KernelStructure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    ranges: Vec<f64>,
    nugget: f64,
}

impl TryFrom<KernelSpecRepr> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelSpecRepr) -> Result<Self> {
        let family = match (r.family, r.alpha) {
            (FamilyName::Matern25, None) => KernelFamily::Matern25,
            (FamilyName::Matern25, Some(_)) => {
                return Err(Error::invalid("alpha is only valid for the pow_exp family"))
            }
            (FamilyName::PowExp, alpha) => KernelFamily::PowExp {
                alpha: alpha.unwrap_or(DEFAULT_POW_EXP_ALPHA),
            },
        };
        KernelSpec::new(family, r.structure, r.ranges, r.nugget)
    }
}

impl From<KernelSpec> for KernelSpecRepr {
    fn from(s: KernelSpec) -> Self {
        let (family, alpha) = match s.family {
            KernelFamily::Matern25 => (FamilyName::Matern25, None),
            KernelFamily::PowExp { alpha } => (FamilyName::PowExp, Some(alpha)),
        };
        KernelSpecRepr {
            family,
            structure: s.structure,
            alpha,
            ranges: s.ranges,
            nugget: s.nugget,
        }
    }
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        structure: KernelStructure,
        ranges: Vec<f64>,
        nugget: f64,
    ) -> Result<Self> {
        if let KernelFamily::PowExp { alpha } = family {
            if !(alpha > 0.0 && alpha <= 2.0) {
                return Err(Error::invalid(format!(
                    "power-exponential roughness must lie in (0, 2], got {alpha}"
                )));
            }
        }
        if ranges.is_empty() {
            return Err(Error::invalid("kernel needs at least one range parameter"));
        }
        if structure == KernelStructure::Isotropic && ranges.len() != 1 {
            return Err(Error::invalid(format!(
                "isotropic kernel takes exactly one range, got {}",
                ranges.len()
            )));
        }
        if let Some(bad) = ranges.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::invalid(format!("range parameters must be positive, got {bad}")));
        }
        if !(nugget.is_finite() && nugget >= 0.0) {
            return Err(Error::invalid(format!("nugget must be non-negative, got {nugget}")));
        }
        Ok(KernelSpec {
            family,
            structure,
            ranges,
            nugget,
        })
    }

    pub fn matern_isotropic(range: f64, nugget: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern25, KernelStructure::Isotropic, vec![range], nugget)
    }

    pub fn matern_product(ranges: Vec<f64>, nugget: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern25, KernelStructure::Product, ranges, nugget)
    }

    /// Checks that this kernel can be evaluated on `p`-dimensional inputs.
    pub fn check_input_dim(&self, p: usize) -> Result<()> {
        if self.structure == KernelStructure::Product && self.ranges.len() != p {
            return Err(Error::DimensionMismatch {
                what: "product kernel ranges",
                expected: p,
                got: self.ranges.len(),
            });
        }
        Ok(())
    }

    /// Same family and structure, new ranges and nugget.
    pub fn with_params(&self, ranges: Vec<f64>, nugget: f64) -> Result<Self> {
        Self::new(self.family, self.structure, ranges, nugget)
    }

    /// Kernel value on raw coordinate slices; dimensions are not checked.
    #[inline]
    pub(crate) fn eval_slices(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.structure {
            KernelStructure::Isotropic => {
                let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                self.family.correlation(d2.sqrt(), self.ranges[0])
            }
            KernelStructure::Product => match self.family {
                // Collapse the per-dimension exponentials into one.
                KernelFamily::Matern25 => {
                    let mut poly = 1.0;
                    let mut rsum = 0.0;
                    for ((u, v), g) in a.iter().zip(b).zip(&self.ranges) {
                        let r = (u - v).abs() * (SQRT_5 / g);
                        poly *= 1.0 + r + r * r / 3.0;
                        rsum += r;
                    }
                    poly * (-rsum).exp()
                }
                KernelFamily::PowExp { alpha } => {
                    let s: f64 = a
                        .iter()
                        .zip(b)
                        .zip(&self.ranges)
                        .map(|((u, v), g)| (u - v).abs().powf(alpha) / g)
                        .sum();
                    (-s).exp()
                }
            },
        }
    }
}

/// p×n matrix of inputs, one column per point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMatrix(DMatrix<f64>);

impl InputMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(Error::invalid("input matrix must have at least one row and one column"));
        }
        if let Some((i, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (i % data.nrows(), i / data.nrows());
            return Err(Error::invalid(format!("non-finite input at row {r}, column {c}")));
        }
        Ok(InputMatrix(data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Coordinates of point `i`.
    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let p = self.dim();
        &self.0.as_slice()[i * p..(i + 1) * p]
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::DimensionMismatch {
            what: "kernel arguments",
            expected: x.len(),
            got: x_prime.len(),
        });
    }
    spec.check_input_dim(x.len())?;
    Ok(spec.eval_slices(x, x_prime))
}

/// n×n correlation matrix of the columns of `x`, without nugget.
pub fn corr_matrix(spec: &KernelSpec, x: &InputMatrix) -> Result<DMatrix<f64>> {
    spec.check_input_dim(x.dim())?;
    let n = x.len();
    let mut k = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        let xj = x.point(j);
        for i in (j + 1)..n {
            let v = spec.eval_slices(x.point(i), xj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Correlations between every training input and the test point `x_star`.
pub fn cross_corr(spec: &KernelSpec, x: &InputMatrix, x_star: &[f64]) -> Result<DVector<f64>> {
    if x_star.len() != x.dim() {
        return Err(Error::DimensionMismatch {
            what: "test input",
            expected: x.dim(),
            got: x_star.len(),
        });
    }
    spec.check_input_dim(x.dim())?;
    Ok(DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|t| spec.eval_slices(x.point(t), x_star)),
    ))
}

/// n×B matrix of correlations between the training inputs and each column of
/// `queries` (p×B).
pub fn cross_corr_batch(
    spec: &KernelSpec,
    x: &InputMatrix,
    queries: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if queries.nrows() != x.dim() {
        return Err(Error::DimensionMismatch {
            what: "test inputs",
            expected: x.dim(),
            got: queries.nrows(),
        });
    }
    spec.check_input_dim(x.dim())?;
    let n = x.len();
    let p = x.dim();
    let mut out = DMatrix::<f64>::zeros(n, queries.ncols());
    let q = queries.as_slice();
    if let (KernelStructure::Product, KernelFamily::Matern25) = (spec.structure, spec.family) {
        product_matern_batch(spec, x, q, &mut out);
        return Ok(out);
    }
    for (b, col) in out.column_iter_mut().enumerate() {
        let xs = &q[b * p..(b + 1) * p];
        for (t, v) in col.into_iter().enumerate() {
            *v = spec.eval_slices(x.point(t), xs);
        }
    }
    Ok(out)
}

/// Tight loop for the product Matérn kernel, bit-identical to `eval_slices`.
fn product_matern_batch(spec: &KernelSpec, x: &InputMatrix, q: &[f64], out: &mut DMatrix<f64>) {
    let p = x.dim();
    let n = x.len();
    let factors: Vec<f64> = spec.ranges.iter().map(|g| SQRT_5 / g).collect();
    // Per-dimension contiguous copy so the inner loop runs over unit stride.
    let train = x.as_matrix().transpose();
    let train = train.as_slice();
    let mut poly = vec![1.0; n];
    let mut rsum = vec![0.0; n];
    for (b, col) in out.column_iter_mut().enumerate() {
        let xs = &q[b * p..(b + 1) * p];
        poly.fill(1.0);
        rsum.fill(0.0);
        for l in 0..p {
            let (c, f) = (xs[l], factors[l]);
            let dim = &train[l * n..(l + 1) * n];
            for ((pl, rs), u) in poly.iter_mut().zip(rsum.iter_mut()).zip(dim) {
                let r = (u - c).abs() * f;
                *pl *= 1.0 + r + r * r / 3.0;
                *rs += r;
            }
        }
        for ((v, pl), rs) in col.into_iter().zip(&poly).zip(&rsum) {
            *v = pl * (-rs).exp();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn matern_closed_form_at_unit_distance() -> f64 {
        let s5 = 5f64.sqrt();
        (1.0 + s5 + 5.0 / 3.0) * (-s5).exp()
    }

    #[test]
    fn matern_identity_and_unit_distance() {
        let spec = KernelSpec::matern_isotropic(3.7, 0.0).unwrap();
        assert_eq!(kernel_eval(&spec, &[1.0, -2.0], &[1.0, -2.0]).unwrap(), 1.0);

        let spec = KernelSpec::matern_isotropic(1.0, 0.0).unwrap();
        let v = kernel_eval(&spec, &[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert_relative_eq!(v, matern_closed_form_at_unit_distance(), epsilon = 1e-14);
        assert_relative_eq!(v, 0.52399, epsilon = 5e-6);
    }

    #[test]
    fn pow_exp_matches_closed_form() {
        let spec = KernelSpec::new(
            KernelFamily::PowExp { alpha: 1.0 },
            KernelStructure::Isotropic,
            vec![2.0],
            0.0,
        )
        .unwrap();
        let v = kernel_eval(&spec, &[0.0], &[2.0]).unwrap();
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = KernelSpec::matern_isotropic(1.0, 0.0).unwrap();
        assert!(matches!(
            kernel_eval(&spec, &[0.0, 1.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let prod = KernelSpec::matern_product(vec![1.0, 1.0], 0.0).unwrap();
        assert!(kernel_eval(&prod, &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(KernelSpec::matern_isotropic(0.0, 0.0).is_err());
        assert!(KernelSpec::matern_isotropic(1.0, -1e-3).is_err());
        assert!(KernelSpec::new(KernelFamily::Matern25, KernelStructure::Isotropic, vec![1.0, 2.0], 0.0).is_err());
        assert!(KernelSpec::new(
            KernelFamily::PowExp { alpha: 2.5 },
            KernelStructure::Isotropic,
            vec![1.0],
            0.0
        )
        .is_err());
    }

    #[test]
    fn corr_matrix_diagonal_duplicates_and_closed_form() {
        let spec = KernelSpec::matern_isotropic(1.0, 0.0).unwrap();
        let x = InputMatrix::new(DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 5.0])).unwrap();
        let k = corr_matrix(&spec, &x).unwrap();
        for i in 0..4 {
            assert_eq!(k[(i, i)], 1.0);
        }
        assert_eq!(k[(0, 2)], 1.0);
        assert_relative_eq!(k[(0, 1)], matern_closed_form_at_unit_distance(), epsilon = 1e-14);
        assert_eq!(k, k.transpose());
    }

    #[test]
    fn cross_corr_cases() {
        let spec = KernelSpec::matern_isotropic(1.0, 0.0).unwrap();
        let x = InputMatrix::new(DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 0.0, 0.5, -1.0])).unwrap();
        let k = cross_corr(&spec, &x, x.point(1)).unwrap();
        assert_eq!(k[1], 1.0);

        let far = cross_corr(&spec, &x, &[100.0 + 2.0, 0.0]).unwrap();
        assert!(far.iter().all(|v| *v < 1e-12 && *v > 0.0 || *v == 0.0));

        let single = InputMatrix::new(DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        let k1 = cross_corr(&spec, &single, &[1.0]).unwrap();
        assert_relative_eq!(k1[0], 0.52399, epsilon = 5e-6);

        assert!(cross_corr(&spec, &x, &[0.0]).is_err());
    }

    #[test]
    fn matern_tail_below_threshold_at_hundred_ranges() {
        let gamma = 0.37;
        let v = KernelFamily::Matern25.correlation(100.0 * gamma, gamma);
        assert!(v < 1e-12, "{v}");
    }

    #[test]
    fn json_schema_round_trip() {
        let spec = KernelSpec::new(
            KernelFamily::PowExp { alpha: 1.5 },
            KernelStructure::Product,
            vec![1.0, 2.5],
            1e-4,
        )
        .unwrap();
        let js = serde_json::to_value(&spec).unwrap();
        assert_eq!(js["family"], "pow_exp");
        assert_eq!(js["structure"], "product");
        assert_eq!(js["alpha"], 1.5);
        let back: KernelSpec = serde_json::from_value(js).unwrap();
        assert_eq!(back, spec);

        let m = KernelSpec::matern_isotropic(2.0, 0.0).unwrap();
        let js = serde_json::to_value(&m).unwrap();
        assert_eq!(js["family"], "matern_2_5");
        assert!(js.get("alpha").is_none());

        let bad = r#"{"family":"matern_2_5","structure":"isotropic","ranges":[-1.0],"nugget":0.0}"#;
        assert!(serde_json::from_str::<KernelSpec>(bad).is_err());
    }

    #[test]
    fn product_matern_equals_per_dimension_product() {
        let spec = KernelSpec::matern_product(vec![0.7, 2.0, 5.0], 0.0).unwrap();
        let a = [0.3f64, -1.2, 4.0];
        let b = [1.1, 0.5, -2.0];
        let direct: f64 = (0..3)
            .map(|l| KernelFamily::Matern25.correlation((a[l] - b[l]).abs(), spec.ranges[l]))
            .product();
        assert_relative_eq!(kernel_eval(&spec, &a, &b).unwrap(), direct, max_relative = 1e-14);
    }

    #[test]
    fn batch_matches_single_queries() {
        let spec = KernelSpec::matern_product(vec![0.5, 1.5], 0.0).unwrap();
        let x = InputMatrix::new(DMatrix::from_fn(2, 6, |i, j| (i * 7 + j * 3) as f64 * 0.13)).unwrap();
        let q = DMatrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.4);
        let kb = cross_corr_batch(&spec, &x, &q).unwrap();
        for b in 0..4 {
            let col: Vec<f64> = q.column(b).iter().copied().collect();
            assert_eq!(kb.column(b).into_owned(), cross_corr(&spec, &x, &col).unwrap());
        }
        assert!(cross_corr_batch(&spec, &x, &DMatrix::zeros(3, 1)).is_err());
    }

    fn points(p: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, p * n)
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(a in points(3, 1), b in points(3, 1), g in 0.1f64..10.0) {
            for spec in [
                KernelSpec::matern_isotropic(g, 0.0).unwrap(),
                KernelSpec::matern_product(vec![g, 2.0 * g, 0.5 * g], 0.0).unwrap(),
                KernelSpec::new(KernelFamily::PowExp { alpha: 1.9 }, KernelStructure::Isotropic, vec![g], 0.0).unwrap(),
            ] {
                let ab = kernel_eval(&spec, &a, &b).unwrap();
                let ba = kernel_eval(&spec, &b, &a).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab > 0.0 || ab == 0.0);
                prop_assert!(ab <= 1.0);
            }
        }

        #[test]
        fn squared_exponential_product_equals_isotropic(a in points(3, 1), b in points(3, 1), g in 0.1f64..10.0) {
            let fam = KernelFamily::PowExp { alpha: 2.0 };
            let iso = KernelSpec::new(fam, KernelStructure::Isotropic, vec![g], 0.0).unwrap();
            let prod = KernelSpec::new(fam, KernelStructure::Product, vec![g; 3], 0.0).unwrap();
            let u = kernel_eval(&iso, &a, &b).unwrap();
            let v = kernel_eval(&prod, &a, &b).unwrap();
            prop_assert!((u - v).abs() < 1e-12);
        }

        #[test]
        fn isotropic_is_nonincreasing_in_distance(d1 in 0.0f64..20.0, d2 in 0.0f64..20.0, g in 0.1f64..10.0, alpha in 0.1f64..2.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            for fam in [KernelFamily::Matern25, KernelFamily::PowExp { alpha }] {
                prop_assert!(fam.correlation(lo, g) >= fam.correlation(hi, g));
            }
        }

        #[test]
        fn nugget_makes_correlation_matrix_factorizable(pts in points(2, 12), g in 0.05f64..50.0, alpha in 0.5f64..2.0) {
            let x = InputMatrix::new(DMatrix::from_column_slice(2, 12, &pts)).unwrap();
            for spec in [
                KernelSpec::matern_isotropic(g, 0.0).unwrap(),
                KernelSpec::matern_product(vec![g, g * 0.3], 0.0).unwrap(),
                KernelSpec::new(KernelFamily::PowExp { alpha }, KernelStructure::Isotropic, vec![g], 0.0).unwrap(),
            ] {
                let mut k = corr_matrix(&spec, &x).unwrap();
                for i in 0..12 { k[(i, i)] += 1e-8; }
                prop_assert!(k.cholesky().is_some());
            }
        }
    }
}
