//! Maximum marginal posterior estimation of the kernel parameters.

use std::sync::Mutex;
use std::time::Instant;

use argmin::core::{CostFunction, Executor, Gradient, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::neldermead::NelderMead;
use argmin::solver::quasinewton::BFGS;
use serde::{Deserialize, Serialize};

use super::objective::{Objective, DEFAULT_PRIOR_A};
use super::{MeanEstimate, PpgpModel};
use crate::kernels::{InputMatrix, KernelSpec};
use crate::stochastics::{standard_normal, RngStream};
use crate::{Error, Result, SnapshotMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// BFGS with central-difference gradients.
    #[default]
    QuasiNewtonNumericGrad,
    NelderMead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub restarts: usize,
    pub max_iters: u64,
    pub prior_a: f64,
    pub fix_nugget_zero: bool,
    /// Seeds the restart perturbations.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: Optimizer::default(),
            restarts: 3,
            max_iters: 200,
            prior_a: DEFAULT_PRIOR_A,
            fix_nugget_zero: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.prior_a.is_finite() && self.prior_a > 0.0) {
            return Err(Error::invalid(format!("prior_a must be positive, got {}", self.prior_a)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Log posterior (up to a constant) at the returned parameters.
    pub objective: f64,
    pub converged: bool,
    pub evaluations: usize,
    /// Objective at each restart's starting point (None if it failed).
    pub initial_objectives: Vec<Option<f64>>,
    pub elapsed_secs: f64,
    pub warnings: Vec<String>,
    /// Seed of the training subsample, when one was drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_seed: Option<u64>,
}

struct Best {
    theta: Vec<f64>,
    value: f64,
    evaluations: usize,
}

/// Negated objective for the minimizers, remembering the best point seen.
struct Problem<'a> {
    obj: &'a Objective<'a>,
    best: Mutex<Best>,
}

const GRAD_STEP: f64 = 1e-5;

impl Problem<'_> {
    fn eval(&self, theta: &[f64]) -> Result<f64> {
        let r = self.obj.value(theta);
        let mut b = self.best.lock().expect("not poisoned");
        b.evaluations += 1;
        if let Ok(v) = r {
            if v > b.value {
                b.value = v;
                b.theta = theta.to_vec();
            }
        }
        r
    }
}

impl CostFunction for &Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        self.eval(theta)
            .map(|v| -v)
            .map_err(|e| argmin::core::Error::msg(e.to_string()))
    }
}

impl Gradient for &Problem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, theta: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let mut g = vec![0.0; theta.len()];
        let mut t = theta.clone();
        for i in 0..theta.len() {
            t[i] = theta[i] + GRAD_STEP;
            let up = self.cost(&t)?;
            t[i] = theta[i] - GRAD_STEP;
            let down = self.cost(&t)?;
            t[i] = theta[i];
            g[i] = (up - down) / (2.0 * GRAD_STEP);
        }
        Ok(g)
    }
}

/// Starting point at the prior mode with the mass split evenly over the
/// inverse ranges and the nugget.
fn prior_mode_start(obj: &Objective<'_>) -> Vec<f64> {
    let terms = obj.dim() as f64;
    let share = obj.prior.mode_total() / terms;
    let mut theta: Vec<f64> = obj
        .prior
        .c
        .iter()
        .map(|c| if *c > 0.0 { (share / c).ln() } else { 0.0 })
        .collect();
    if !obj.fix_nugget_zero {
        theta.push(share.ln());
    }
    theta
}

/// Ranges equal to the input spread, nugget as at the prior mode. The prior
/// mode can sit where the likelihood is flat (ranges far below the input
/// spacing), which stalls gradient-based search; the scan around this point
/// gives the second restart a start inside the likelihood's main basin.
fn spread_start(obj: &Objective<'_>, mode: &[f64]) -> Vec<f64> {
    let scale = (obj.x.len() as f64).powf(-1.0 / obj.n_ranges() as f64);
    let mut theta: Vec<f64> = obj
        .prior
        .c
        .iter()
        .map(|c| if *c > 0.0 { (scale / c).ln() } else { 0.0 })
        .collect();
    if !obj.fix_nugget_zero {
        theta.push(mode[mode.len() - 1]);
    }
    theta
}

/// Best point of a coarse scan that scales every range of `spread` by a
/// common factor, crossed with a few nugget values.
fn scan_start(problem: &Problem<'_>, spread: &[f64]) -> Option<Vec<f64>> {
    let ranges = problem.obj.n_ranges();
    let nuggets: &[f64] = if problem.obj.fix_nugget_zero {
        &[f64::NAN]
    } else {
        &[1e-12, 1e-9, 1e-6, 1e-3, 1e-1]
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in -8..=16 {
        // log β shifts by −log(factor) for a range factor 10^(k/4).
        let shift = -(k as f64) * std::f64::consts::LN_10 / 4.0;
        for &eta in nuggets {
            let mut theta: Vec<f64> = spread[..ranges].iter().map(|t| t + shift).collect();
            if !eta.is_nan() {
                theta.push(eta.ln());
            }
            if let Ok(v) = problem.eval(&theta) {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, theta));
                }
            }
        }
    }
    best.map(|(_, t)| t)
}

fn run_solver(problem: &Problem<'_>, start: Vec<f64>, cfg: &FitConfig) -> bool {
    let d = start.len();
    match cfg.optimizer {
        Optimizer::QuasiNewtonNumericGrad => {
            let eye: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            let solver = BFGS::new(MoreThuenteLineSearch::new())
                .with_tolerance_grad(1e-6)
                .and_then(|s| s.with_tolerance_cost(1e-10));
            let Ok(solver) = solver else { return false };
            let res = Executor::new(problem, solver)
                .configure(|s| s.param(start).inv_hessian(eye).max_iters(cfg.max_iters))
                .run();
            converged(res.map(|r| r.state.termination_status.clone()))
        }
        Optimizer::NelderMead => {
            let mut simplex = vec![start.clone()];
            for i in 0..d {
                let mut v = start.clone();
                v[i] += 1.0;
                simplex.push(v);
            }
            let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(1e-8) else {
                return false;
            };
            let res = Executor::new(problem, solver)
                .configure(|s| s.max_iters(cfg.max_iters))
                .run();
            converged(res.map(|r| r.state.termination_status.clone()))
        }
    }
}

fn converged(status: std::result::Result<TerminationStatus, argmin::core::Error>) -> bool {
    match status {
        Ok(TerminationStatus::Terminated(TerminationReason::MaxItersReached)) => false,
        Ok(TerminationStatus::Terminated(_)) => true,
        _ => false,
    }
}

/// Fits range and nugget by maximizing log marginal likelihood plus log
/// jointly robust prior over log inverse ranges and log nugget.
///
/// The returned parameters are the best point evaluated across all restarts,
/// so the objective is never below any restart's starting value.
pub fn fit_ppgp(
    x: InputMatrix,
    y: SnapshotMatrix,
    template: &KernelSpec,
    cfg: &FitConfig,
) -> Result<PpgpModel> {
    cfg.validate()?;
    if x.len() < 2 {
        return Err(Error::invalid("fitting needs at least 2 training points"));
    }
    if y.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "training outputs (columns)",
            expected: x.len(),
            got: y.ncols(),
        });
    }
    let started = Instant::now();
    let obj = Objective::new(template, &x, &y, cfg.prior_a, cfg.fix_nugget_zero)?;
    let problem = Problem {
        obj: &obj,
        best: Mutex::new(Best {
            theta: Vec::new(),
            value: f64::NEG_INFINITY,
            evaluations: 0,
        }),
    };
    let mode = prior_mode_start(&obj);
    let mut rng = RngStream::new(cfg.seed, 0).generator();
    let mut initial_objectives = Vec::with_capacity(cfg.restarts);
    let mut all_converged = true;
    let spread = spread_start(&obj, &mode);
    for r in 0..cfg.restarts {
        let start: Vec<f64> = match r {
            0 => mode.clone(),
            1 => scan_start(&problem, &spread).unwrap_or_else(|| spread.clone()),
            _ => mode.iter().map(|t| t + standard_normal(&mut rng)).collect(),
        };
        let init = problem.eval(&start).ok();
        initial_objectives.push(init);
        if init.is_none() {
            all_converged = false;
            continue;
        }
        all_converged &= run_solver(&problem, start, cfg);
    }
    let best = problem.best.into_inner().expect("not poisoned");
    if best.theta.is_empty() {
        return Err(Error::Numerical(
            "the objective could not be evaluated at any restart (Cholesky failed)".into(),
        ));
    }
    let spec = obj.spec_at(&best.theta)?;
    let mut model = PpgpModel::with_params(x, y, spec, MeanEstimate::Gls)?;
    let mut warnings = Vec::new();
    if !all_converged {
        warnings.push(format!(
            "optimizer did not converge within {} iterations on every restart; best parameters returned",
            cfg.max_iters
        ));
    }
    if model.jitter() > 0.0 {
        warnings.push(format!("diagonal jitter {:e} added to factor the correlation matrix", model.jitter()));
    }
    model.report = FitReport {
        objective: best.value,
        converged: all_converged,
        evaluations: best.evaluations,
        initial_objectives,
        elapsed_secs: started.elapsed().as_secs_f64(),
        warnings,
        subsample_seed: None,
    };
    Ok(model)
}
