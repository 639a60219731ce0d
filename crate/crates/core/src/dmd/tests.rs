use super::*;
use crate::stochastics::{standard_normal, RngStream};
use approx::assert_relative_eq;
use rand::Rng;

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

/// Random matrix rescaled to the given spectral radius.
fn stable_matrix(m: usize, radius: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = RngStream::new(seed, 0).generator();
    let a = random_matrix(m, m, &mut rng);
    let rho = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    a * (radius / rho)
}

fn trajectory(a: &DMatrix<f64>, y0: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(a.nrows(), n);
    y.set_column(0, y0);
    for t in 1..n {
        let next = a * y.column(t - 1);
        y.set_column(t, &next);
    }
    y
}

fn exact_linear(m: usize, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = stable_matrix(m, 0.95, seed);
    let mut rng = RngStream::new(seed, 1).generator();
    let y0 = DVector::from_fn(m, |_, _| standard_normal(&mut rng));
    (a.clone(), trajectory(&a, &y0, n))
}

#[test]
fn rank_rule_examples() {
    assert_eq!(choose_rank(&[1.0, 0.0, 0.0], 0.99).unwrap(), 1);
    assert_eq!(choose_rank(&[3.0, 1.0], 0.99).unwrap(), 2);
    assert_eq!(choose_rank(&[3.0, 1.0], 0.9).unwrap(), 1);
    assert_eq!(choose_rank(&[2.0, 1.0, 0.5, 0.0, 0.0], 1.0).unwrap(), 3);
    assert!(choose_rank(&[0.0, 0.0], 0.99).is_err());
    assert!(choose_rank(&[1.0], 0.0).is_err());
}

#[test]
fn exact_operator_recovery() {
    let (a, y) = exact_linear(8, 50, 11);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    assert_eq!(model.rank, 8);
    let rel = (model.operator_dense() - &a).norm() / a.norm();
    assert!(rel < 1e-8, "relative error {rel}");
    assert!(model.tau2_hat < 1e-16, "tau2 {}", model.tau2_hat);
}

#[test]
fn constant_snapshots() {
    let c = DVector::from_vec(vec![2.0, -1.0, 0.5]);
    let y = DMatrix::from_fn(3, 10, |i, _| c[i]);
    let model = fit_dmd(&y, 0.99, None).unwrap();
    assert_eq!(model.rank, 1);
    assert_relative_eq!(model.eigvals[0].re, 1.0, epsilon = 1e-12);
    assert!(model.eigvals[0].im.abs() < 1e-12);
    for t in [1, 4, 10, 30] {
        assert_relative_eq!(reconstruct(&model, t).unwrap(), c, epsilon = 1e-10);
    }
    let f = forecast_dmd(&model, &c, 5).unwrap();
    for k in 0..5 {
        assert_relative_eq!(f.column(k).into_owned(), c, epsilon = 1e-12);
    }
}

#[test]
fn geometric_rank_one() {
    let rho: f64 = 0.8;
    let u = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
    let y = DMatrix::from_fn(4, 12, |i, t| rho.powi(t as i32) * u[i]);
    let model = fit_dmd(&y, 0.99, None).unwrap();
    assert_eq!(model.rank, 1);
    assert_relative_eq!(model.eigvals[0].re, rho, epsilon = 1e-12);
}

#[test]
fn amplitude_estimators_agree_on_exact_data() {
    let (_, y) = exact_linear(6, 30, 3);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let (b, deficient) = amplitudes_lsq(&model, &y).unwrap();
    assert!(!deficient);
    let scale = model.amplitudes.norm();
    assert!((&b - &model.amplitudes).norm() / scale < 1e-8);
}

#[test]
fn scalar_amplitude_closed_form() {
    // m = 1: y_t = φ λ^{t−1} b + noise, least squares b = Σ gₜ yₜ / Σ gₜ².
    let mut rng = RngStream::new(5, 0).generator();
    let y = DMatrix::from_fn(1, 15, |_, t| 3.0 * 0.9f64.powi(t as i32) + 0.05 * standard_normal(&mut rng));
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let (phi, lam) = (model.modes[(0, 0)].re, model.eigvals[0].re);
    let g: Vec<f64> = (0..15).map(|t| phi * lam.powi(t)).collect();
    let num: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    let den: f64 = g.iter().map(|a| a * a).sum();
    let (b, _) = amplitudes_lsq(&model, &y).unwrap();
    assert_relative_eq!(b[0].re, num / den, epsilon = 1e-10);
    assert!(b[0].im.abs() < 1e-12);
}

#[test]
fn amplitudes_recover_constructed_values() {
    // Y = Φ Λ^{t−1} b with real diagonal dynamics in a rotated basis.
    let m = 4;
    let mut rng = RngStream::new(8, 0).generator();
    let q = random_matrix(m, m, &mut rng).qr().q();
    let lams: [f64; 4] = [0.95, 0.7, -0.5, 0.3];
    let b_true = [1.0, -2.0, 0.5, 1.5];
    let y = DMatrix::from_fn(m, 25, |i, t| {
        (0..m).map(|k| q[(i, k)] * lams[k].powi(t as i32) * b_true[k]).sum()
    });
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let (b, _) = amplitudes_lsq(&model, &y).unwrap();
    // Modes are scaled arbitrarily, so compare Φ_i b_i with q_i b_true_i.
    for (i, lam) in model.eigvals.iter().enumerate() {
        let k = lams.iter().position(|l| (l - lam.re).abs() < 1e-8).expect("eigenvalue recovered");
        let got = model.modes.column(i).map(|z| (z * b[i]).re);
        let want = q.column(k) * b_true[k];
        assert!((got - want).amax() < 1e-8);
    }
}

#[test]
fn reconstruction_matches_snapshots() {
    let (_, y) = exact_linear(5, 20, 21);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    for t in 1..=20 {
        let col = y.column(t - 1);
        let rec = reconstruct(&model, t).unwrap();
        assert!((&rec - col).norm() / col.norm() < 1e-6, "t = {t}");
    }
    assert!(reconstruct(&model, 0).is_err());
}

#[test]
fn forecast_continues_exact_data() {
    let (_, full) = exact_linear(8, 60, 4);
    let y = full.columns(0, 50).into_owned();
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let f = forecast_dmd(&model, &y.column(49).into_owned(), 10).unwrap();
    for k in 0..10 {
        let truth = full.column(50 + k);
        assert!((f.column(k) - truth).norm() / truth.norm() < 1e-6);
    }
}

#[test]
fn half_radius_halves_norms() {
    let (c, s) = (0.6, 0.8);
    let a = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * 0.5;
    let y = trajectory(&a, &DVector::from_vec(vec![1.0, 0.0]), 10);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    assert_relative_eq!(model.spectral_radius(), 0.5, epsilon = 1e-10);
    let yn = y.column(9).into_owned();
    let f = forecast_dmd(&model, &yn, 6).unwrap();
    let mut prev = yn.norm();
    for k in 0..6 {
        let nrm = f.column(k).norm();
        assert_relative_eq!(nrm / prev, 0.5, epsilon = 1e-8);
        prev = nrm;
    }
}

fn manual_model(left: DMatrix<f64>, u: DMatrix<f64>, tau2: f64) -> DmdModel {
    let r = u.ncols();
    let m = u.nrows();
    DmdModel::from_parts(
        u,
        DVector::from_element(r, 1.0),
        DMatrix::zeros(1, r),
        left,
        vec![Complex64::new(0.0, 0.0); r],
        DMatrix::zeros(m, r),
        DVector::zeros(r),
        tau2,
        2,
    )
    .unwrap()
}

fn dense_cov(a: &DMatrix<f64>, tau2: f64, k: usize) -> DMatrix<f64> {
    let m = a.nrows();
    let mut c = DMatrix::identity(m, m) * tau2;
    for _ in 1..k {
        c = a * c * a.transpose() + DMatrix::identity(m, m) * tau2;
    }
    c
}

#[test]
fn posterior_first_step_is_isotropic() {
    let (_, y) = exact_linear(4, 20, 6);
    let mut rng = RngStream::new(6, 2).generator();
    let noisy = y.map(|v| v + 0.01 * standard_normal(&mut rng));
    let model = fit_dmd(&noisy, 0.99, None).unwrap();
    let yn = noisy.column(19).into_owned();
    let (mean, cov) = dmd_posterior(&model, &yn, 1).unwrap();
    assert_relative_eq!(mean, model.apply(&yn), epsilon = 1e-14);
    assert_relative_eq!(cov, DMatrix::identity(4, 4) * model.tau2_hat, epsilon = 1e-18);
}

#[test]
fn posterior_zero_operator() {
    let model = manual_model(DMatrix::zeros(3, 2), DMatrix::identity(3, 2), 0.7);
    let yn = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    for k in [1, 2, 7] {
        let (mean, cov) = dmd_posterior(&model, &yn, k).unwrap();
        assert_eq!(mean, DVector::zeros(3));
        assert_relative_eq!(cov, DMatrix::identity(3, 3) * 0.7, epsilon = 1e-15);
    }
}

#[test]
fn posterior_scaled_identity_geometric_sum() {
    let rho = 0.9;
    let tau2 = 0.25;
    let model = manual_model(DMatrix::identity(3, 3) * rho, DMatrix::identity(3, 3), tau2);
    let yn = DVector::from_vec(vec![1.0, -1.0, 2.0]);
    for k in 1..=8 {
        let (_, cov) = dmd_posterior(&model, &yn, k).unwrap();
        let sum: f64 = (0..k).map(|i| rho.powi(2 * i as i32)).sum();
        let closed = tau2 * (1.0 - rho.powi(2 * k as i32)) / (1.0 - rho * rho);
        assert_relative_eq!(sum * tau2, closed, epsilon = 1e-14);
        assert_relative_eq!(cov, DMatrix::identity(3, 3) * closed, epsilon = 1e-13);
    }
}

#[test]
fn factored_covariance_matches_power_sum() {
    // Truncated operator (r < m): compare against Σ Âⁱ(Âᵀ)ⁱ with the dense Â.
    let mut rng = RngStream::new(9, 0).generator();
    let y = random_matrix(6, 30, &mut rng);
    let model = fit_dmd(&y, 1.0, Some(3)).unwrap();
    let a = model.operator_dense();
    let yn = y.column(29).into_owned();
    let var = model.variance_path(20, None);
    for k in 1..=20 {
        let mut power_sum = DMatrix::<f64>::zeros(6, 6);
        let mut p = DMatrix::<f64>::identity(6, 6);
        for _ in 0..k {
            power_sum += &p * p.transpose();
            p = &a * p;
        }
        power_sum *= model.tau2_hat;
        let (_, cov) = dmd_posterior(&model, &yn, k).unwrap();
        let scale = power_sum.amax();
        assert!((&cov - &power_sum).amax() / scale < 1e-10, "k = {k}");
        assert!((&cov - dense_cov(&a, model.tau2_hat, k)).amax() / scale < 1e-10);
        let diag = power_sum.diagonal();
        assert!((var.column(k - 1) - diag).amax() / scale < 1e-10);
    }
}

#[test]
fn zero_noise_gives_zero_width() {
    let (_, y) = exact_linear(5, 30, 2);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let f = forecast_dmd_intervals(&model, &y.column(29).into_owned(), 5, 0.95).unwrap();
    assert!((f.upper - f.lower).amax() < 1e-7);
}

#[test]
fn one_step_halfwidth() {
    let mut rng = RngStream::new(12, 0).generator();
    let y = random_matrix(4, 40, &mut rng);
    let model = fit_dmd(&y, 0.99, None).unwrap();
    let f = forecast_dmd_intervals(&model, &y.column(39).into_owned(), 3, 0.95).unwrap();
    let z = 1.959963984540054;
    for j in 0..4 {
        let half = (f.upper[(j, 0)] - f.lower[(j, 0)]) / 2.0;
        assert_relative_eq!(half, z * model.tau2_hat.sqrt(), epsilon = 1e-12);
    }
}

/// Simulates `y_{t+1} = Â y_t + τ̂ ε` from `y_n`; returns the draws per step.
fn simulate(model: &DmdModel, yn: &DVector<f64>, steps: usize, reps: usize, seed: u64) -> Vec<Vec<DVector<f64>>> {
    let mut rng = RngStream::new(seed, 0).generator();
    let tau = model.tau2_hat.sqrt();
    let a = model.operator_dense();
    let mut out = vec![Vec::with_capacity(reps); steps];
    for _ in 0..reps {
        let mut y = yn.clone();
        for step in out.iter_mut() {
            y = &a * &y + DVector::from_fn(y.len(), |_, _| tau * standard_normal(&mut rng));
            step.push(y.clone());
        }
    }
    out
}

#[test]
fn monte_carlo_interval_coverage() {
    let (_, y) = exact_linear(3, 40, 14);
    let mut rng = RngStream::new(14, 5).generator();
    let noisy = y.map(|v| v + 0.1 * standard_normal(&mut rng));
    let model = fit_dmd(&noisy, 1.0, None).unwrap();
    let yn = noisy.column(39).into_owned();
    let f = forecast_dmd_intervals(&model, &yn, 5, 0.95).unwrap();
    let sims = simulate(&model, &yn, 5, 10_000, 99);
    for (k, draws) in sims.iter().enumerate() {
        let inside = draws
            .iter()
            .flat_map(|d| (0..3).map(move |j| (j, d[j])))
            .filter(|(j, v)| *v >= f.lower[(*j, k)] && *v <= f.upper[(*j, k)])
            .count();
        let cov = inside as f64 / (3.0 * draws.len() as f64);
        assert!((0.94..=0.96).contains(&cov), "step {} coverage {cov}", k + 1);
    }
}

#[test]
fn least_squares_minimizer() {
    let mut rng = RngStream::new(17, 0).generator();
    let y = random_matrix(5, 12, &mut rng);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let a = model.operator_dense();
    let y1 = y.columns(0, 11);
    let y2 = y.columns(1, 11);
    let best = (&y2 - &a * &y1).norm();
    for _ in 0..1000 {
        let e = random_matrix(5, 5, &mut rng);
        let r = (&y2 - (&a + e * 1e-3) * &y1).norm();
        assert!(r >= best - 1e-12);
    }
}

#[test]
fn eigenpairs_and_conjugate_symmetry() {
    let (_, y) = exact_linear(8, 50, 23);
    let model = fit_dmd(&y, 1.0, None).unwrap();
    let a = model.operator_dense().map(|v| Complex64::new(v, 0.0));
    let a_t = model.a_tilde.map(|v| Complex64::new(v, 0.0));
    let (_, omegas) = crate::linalg::eigen_real(&model.a_tilde).unwrap();
    for (i, lam) in model.eigvals.iter().enumerate() {
        let phi = model.modes.column(i);
        let res = (&a * phi - phi * *lam).norm() / phi.norm();
        assert!(res < 1e-6, "mode {i} residual {res}");
        let w = omegas.column(i);
        assert!((&a_t * w - w * *lam).norm() / w.norm() < 1e-8);
        if lam.im.abs() > 1e-10 {
            assert!(model.eigvals.iter().any(|z| (z - lam.conj()).norm() < 1e-8));
        }
    }
    for t in [1, 10, 60] {
        let coef = DVector::from_iterator(
            model.rank,
            model.amplitudes.iter().zip(&model.eigvals).map(|(b, l)| b * l.powu(t - 1)),
        );
        let full = &model.modes * coef;
        let im = full.map(|z| z.im).norm();
        let re = full.map(|z| z.re).norm();
        assert!(im <= 1e-6 * re.max(1e-300), "t = {t}: im {im} re {re}");
    }
}

#[test]
fn appending_exact_column_keeps_noise_estimate() {
    let (a, y) = exact_linear(4, 20, 31);
    let before = fit_dmd(&y, 1.0, None).unwrap().tau2_hat;
    let mut longer = y.clone().insert_column(20, 0.0);
    let next = &a * y.column(19);
    longer.set_column(20, &next);
    let after = fit_dmd(&longer, 1.0, None).unwrap().tau2_hat;
    assert!(after <= before + 1e-25, "{after} > {before}");
}

#[test]
fn rejects_degenerate_inputs() {
    assert!(fit_dmd(&DMatrix::zeros(3, 5), 0.99, None).is_err());
    assert!(fit_dmd(&DMatrix::from_element(3, 1, 1.0), 0.99, None).is_err());
    let y = DMatrix::from_fn(3, 6, |i, j| (i * j) as f64 + 1.0);
    assert!(fit_dmd(&y, 0.99, Some(4)).is_err());
    let model = fit_dmd(&y, 0.99, None).unwrap();
    assert!(forecast_dmd(&model, &DVector::zeros(2), 3).is_err());
    assert!(forecast_dmd(&model, &DVector::zeros(3), 0).is_err());
    assert!(dmd_posterior(&model, &DVector::zeros(3), 0).is_err());
}
