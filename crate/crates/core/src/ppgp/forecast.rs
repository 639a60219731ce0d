//! Multi-step forecasts by iterating the one-step predictive distribution.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use super::{BatchPrediction, PpgpModel};
use crate::forecast::{check_level, DEFAULT_LEVEL};
use crate::kernels::InputMatrix;
use crate::stochastics::{sample_student_t, RngStream};
use crate::{Error, ForecastResult, Result, SnapshotMatrix};

pub const DEFAULT_CHAINS: usize = 100;

/// Chains whose values exceed this multiple of the training max-abs are
/// treated as diverged.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Maps the recent output history (oldest first) to an emulator input.
pub trait InputBuilder: Sync {
    /// Number of past output vectors the map reads.
    fn history_len(&self) -> usize;
    fn build(&self, history: &[&DVector<f64>]) -> DVector<f64>;
}

/// The input at the next step is the current output.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityInput;

impl InputBuilder for IdentityInput {
    fn history_len(&self) -> usize {
        1
    }

    fn build(&self, history: &[&DVector<f64>]) -> DVector<f64> {
        history[history.len() - 1].clone()
    }
}

/// Stacks the last `depth` outputs, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct LaggedInput {
    pub depth: usize,
}

impl InputBuilder for LaggedInput {
    fn history_len(&self) -> usize {
        self.depth
    }

    fn build(&self, history: &[&DVector<f64>]) -> DVector<f64> {
        let m = history[0].len();
        let mut out = DVector::zeros(m * history.len());
        for (i, h) in history.iter().enumerate() {
            out.rows_mut(i * m, m).copy_from(h);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub horizon: usize,
    pub chains: usize,
    pub level: f64,
    pub seed: u64,
    pub keep_samples: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            horizon: 1,
            chains: DEFAULT_CHAINS,
            level: DEFAULT_LEVEL,
            seed: 0,
            keep_samples: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("forecast horizon must be positive"));
        }
        if self.chains == 0 {
            return Err(Error::invalid("number of chains must be positive"));
        }
        check_level(self.level)
    }
}

fn divergence_limit(scale: f64) -> f64 {
    DIVERGENCE_FACTOR * if scale > 0.0 { scale } else { 1.0 }
}

fn chain_rngs(seed: u64, chains: usize) -> Vec<ChaCha8Rng> {
    (0..chains)
        .map(|s| RngStream::new(seed, s as u64).generator())
        .collect()
}

struct ChainBook {
    alive: Vec<bool>,
    diverged: usize,
    paths: Vec<DMatrix<f64>>,
}

impl ChainBook {
    fn new(chains: usize, m: usize, horizon: usize) -> Self {
        ChainBook {
            alive: vec![true; chains],
            diverged: 0,
            paths: (0..chains).map(|_| DMatrix::zeros(m, horizon)).collect(),
        }
    }

    fn alive_indices(&self) -> Vec<usize> {
        (0..self.alive.len()).filter(|c| self.alive[*c]).collect()
    }

    fn kill(&mut self, c: usize) {
        self.alive[c] = false;
        self.diverged += 1;
    }

    fn check_failure(&self, step: usize) -> Result<()> {
        if 2 * self.diverged > self.alive.len() {
            return Err(Error::ForecastFailure {
                step,
                reason: format!("{} of {} chains diverged", self.diverged, self.alive.len()),
            });
        }
        Ok(())
    }

    fn finish(self, cfg: &ChainConfig) -> Result<ForecastResult> {
        let ChainBook { alive, diverged, paths } = self;
        let kept: Vec<DMatrix<f64>> = paths
            .into_iter()
            .zip(alive)
            .filter_map(|(p, a)| a.then_some(p))
            .collect();
        let mut out = ForecastResult::from_samples(kept, cfg.level, Some(cfg.seed), cfg.keep_samples)?;
        out.diverged_chains = diverged;
        if diverged > 0 {
            out.warnings.push(format!("{diverged} of {} chains diverged and were excluded", cfg.chains));
        }
        Ok(out)
    }
}

fn check_history(model: &PpgpModel, history: &[DVector<f64>], input_map: &dyn InputBuilder) -> Result<()> {
    let need = input_map.history_len();
    if history.len() < need {
        return Err(Error::invalid(format!(
            "input map needs {need} past outputs, got {}",
            history.len()
        )));
    }
    let m = model.output_dim();
    if let Some(bad) = history.iter().find(|h| h.len() != m) {
        return Err(Error::DimensionMismatch {
            what: "initial output vector",
            expected: m,
            got: bad.len(),
        });
    }
    let refs: Vec<&DVector<f64>> = history[history.len() - need..].iter().collect();
    let x = input_map.build(&refs);
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "emulator input built from history",
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Samples `chains` trajectories, drawing each output coordinate from its
/// marginal predictive distribution given the chain's own past.
///
/// `history` holds the most recent observed outputs, oldest first.
pub fn forecast_chains(
    model: &PpgpModel,
    history: &[DVector<f64>],
    input_map: &dyn InputBuilder,
    cfg: &ChainConfig,
) -> Result<ForecastResult> {
    cfg.validate()?;
    check_history(model, history, input_map)?;
    let m = model.output_dim();
    let need = input_map.history_len();
    let dof = model.dof();
    let limit = divergence_limit(model.data_scale());
    let mut rngs = chain_rngs(cfg.seed, cfg.chains);
    let start: VecDeque<DVector<f64>> = history[history.len() - need..].iter().cloned().collect();
    let mut hist: Vec<VecDeque<DVector<f64>>> = vec![start; cfg.chains];
    let mut book = ChainBook::new(cfg.chains, m, cfg.horizon);

    for step in 0..cfg.horizon {
        let idx = book.alive_indices();
        let mut queries = DMatrix::zeros(model.input_dim(), idx.len());
        for (col, &c) in idx.iter().enumerate() {
            let refs: Vec<&DVector<f64>> = hist[c].iter().collect();
            queries.set_column(col, &input_map.build(&refs));
        }
        let BatchPrediction { mean, kstar } = model.predict_batch(&queries, true)?;
        let kstar = kstar.expect("variance requested");
        for (col, &c) in idx.iter().enumerate() {
            let mut y = DVector::zeros(m);
            for j in 0..m {
                let t = sample_student_t(dof, &mut rngs[c]);
                y[j] = mean[(j, col)] + (model.sigma2_hat()[j] * kstar[col]).sqrt() * t;
            }
            if y.iter().any(|v| !(v.abs() <= limit)) {
                book.kill(c);
                continue;
            }
            book.paths[c].set_column(step, &y);
            hist[c].pop_front();
            hist[c].push_back(y);
        }
        book.check_failure(step + 1)?;
    }
    book.finish(cfg)
}

/// Deterministic trajectory from iterating the predictive mean.
pub fn forecast_plugin_mean(
    model: &PpgpModel,
    history: &[DVector<f64>],
    input_map: &dyn InputBuilder,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    check_history(model, history, input_map)?;
    let need = input_map.history_len();
    let mut hist: VecDeque<DVector<f64>> = history[history.len() - need..].iter().cloned().collect();
    let mut out = DMatrix::zeros(model.output_dim(), horizon);
    for step in 0..horizon {
        let refs: Vec<&DVector<f64>> = hist.iter().collect();
        let x = input_map.build(&refs);
        let q = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let y: DVector<f64> = model.predict_batch(&q, false)?.mean.column(0).into_owned();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::ForecastFailure {
                step: step + 1,
                reason: "non-finite predictive mean".into(),
            });
        }
        out.set_column(step, &y);
        hist.pop_front();
        hist.push_back(y);
    }
    Ok(out)
}

/// Cyclic neighbourhood offsets defining a scalar emulator's input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StencilSpec {
    pub offsets: Vec<isize>,
}

impl Default for StencilSpec {
    /// The Lorenz 96 neighbourhood (j−2, j−1, j, j+1).
    fn default() -> Self {
        StencilSpec { offsets: vec![-2, -1, 0, 1] }
    }
}

impl StencilSpec {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::invalid("stencil needs at least one offset"));
        }
        let mut seen: Vec<usize> = self.offsets.iter().map(|o| o.rem_euclid(m as isize) as usize).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.offsets.len() {
            return Err(Error::invalid(format!(
                "stencil offsets {:?} are not distinct modulo m = {m}",
                self.offsets
            )));
        }
        Ok(())
    }

    #[inline]
    fn write_input(&self, y: &[f64], j: usize, out: &mut [f64]) {
        let m = y.len() as isize;
        for (o, v) in self.offsets.iter().zip(out.iter_mut()) {
            *v = y[(j as isize + o).rem_euclid(m) as usize];
        }
    }

    /// p × (m·B) inputs for every coordinate of every column of `states`,
    /// ordered column-major as (coordinate, column).
    fn inputs(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, b) = states.shape();
        let p = self.len();
        let mut q = DMatrix::zeros(p, m * b);
        let qs = q.as_mut_slice();
        for (c, col) in states.column_iter().enumerate() {
            let y = col.as_slice();
            for j in 0..m {
                let off = (c * m + j) * p;
                self.write_input(y, j, &mut qs[off..off + p]);
            }
        }
        q
    }

    /// Training pairs (stencil input, derivative) pooled over all coordinates
    /// of the given time columns.
    pub fn training_pairs(
        &self,
        states: &DMatrix<f64>,
        derivs: &DMatrix<f64>,
        columns: std::ops::Range<usize>,
    ) -> Result<(InputMatrix, SnapshotMatrix)> {
        if states.shape() != derivs.shape() {
            return Err(Error::invalid("states and derivatives differ in shape"));
        }
        if columns.end > states.ncols() || columns.is_empty() {
            return Err(Error::invalid(format!(
                "training columns {columns:?} outside 0..{}",
                states.ncols()
            )));
        }
        self.validate(states.nrows())?;
        let block = states.columns(columns.start, columns.len()).into_owned();
        let x = self.inputs(&block);
        let d = derivs.columns(columns.start, columns.len());
        let y = DMatrix::from_iterator(1, d.len(), d.iter().copied());
        Ok((InputMatrix::new(x)?, y))
    }
}

/// Uniform subsample of `count` training columns without replacement, kept
/// in their original order.
pub fn subsample_columns(
    x: &InputMatrix,
    y: &SnapshotMatrix,
    count: usize,
    seed: u64,
) -> Result<(InputMatrix, SnapshotMatrix)> {
    let n = x.len();
    if count == 0 || count > n {
        return Err(Error::invalid(format!("cannot subsample {count} of {n} pairs")));
    }
    let mut rng = RngStream::new(seed, 0).generator();
    let mut idx = index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    let xs = x.as_matrix().select_columns(&idx);
    let ys = y.select_columns(&idx);
    Ok((InputMatrix::new(xs)?, ys))
}

/// What the RK4 forecaster needs from a scalar derivative emulator.
pub(crate) trait DerivativeEmulator {
    fn batch(&self, queries: &DMatrix<f64>, with_variance: bool) -> Result<BatchPrediction>;
    fn sigma2(&self) -> f64;
    fn dof(&self) -> u64;
    fn scale(&self) -> f64;
}

impl DerivativeEmulator for PpgpModel {
    fn batch(&self, queries: &DMatrix<f64>, with_variance: bool) -> Result<BatchPrediction> {
        self.predict_batch(queries, with_variance)
    }

    fn sigma2(&self) -> f64 {
        self.sigma2_hat()[0]
    }

    fn dof(&self) -> u64 {
        PpgpModel::dof(self)
    }

    fn scale(&self) -> f64 {
        self.data_scale()
    }
}

/// RK4 integration of an emulated derivative with chain sampling.
///
/// Each step runs RK4 on the emulator's predictive mean, then perturbs every
/// coordinate by `h·ε` with ε drawn from the centred predictive t at the
/// step's starting state.
pub fn forecast_rk4_emulated(
    model: &PpgpModel,
    y_n: &DVector<f64>,
    h: f64,
    stencil: &StencilSpec,
    cfg: &ChainConfig,
) -> Result<ForecastResult> {
    if model.output_dim() != 1 {
        return Err(Error::invalid(format!(
            "the derivative emulator must have a scalar output, got {}",
            model.output_dim()
        )));
    }
    if model.input_dim() != stencil.len() {
        return Err(Error::DimensionMismatch {
            what: "stencil length",
            expected: model.input_dim(),
            got: stencil.len(),
        });
    }
    rk4_chains(model, y_n, h, stencil, cfg)
}

pub(crate) fn rk4_chains<E: DerivativeEmulator>(
    em: &E,
    y_n: &DVector<f64>,
    h: f64,
    stencil: &StencilSpec,
    cfg: &ChainConfig,
) -> Result<ForecastResult> {
    cfg.validate()?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let m = y_n.len();
    stencil.validate(m)?;
    if y_n.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }
    let limit = divergence_limit(em.scale());
    let sigma2 = em.sigma2();
    let dof = em.dof();
    let mut rngs = chain_rngs(cfg.seed, cfg.chains);
    let mut states: Vec<DVector<f64>> = vec![y_n.clone(); cfg.chains];
    let mut book = ChainBook::new(cfg.chains, m, cfg.horizon);

    let derivative = |s: &DMatrix<f64>, var: bool| -> Result<(DMatrix<f64>, Option<DVector<f64>>)> {
        let bp = em.batch(&stencil.inputs(s), var)?;
        let k = DMatrix::from_column_slice(m, s.ncols(), bp.mean.as_slice());
        Ok((k, bp.kstar))
    };

    for step in 0..cfg.horizon {
        let idx = book.alive_indices();
        let mut y = DMatrix::zeros(m, idx.len());
        for (col, &c) in idx.iter().enumerate() {
            y.set_column(col, &states[c]);
        }
        let (k1, kstar) = derivative(&y, true)?;
        let kstar = kstar.expect("variance requested");
        let (k2, _) = derivative(&(&y + &k1 * (h / 2.0)), false)?;
        let (k3, _) = derivative(&(&y + &k2 * (h / 2.0)), false)?;
        let (k4, _) = derivative(&(&y + &k3 * h), false)?;
        let next = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        for (col, &c) in idx.iter().enumerate() {
            let mut v: DVector<f64> = next.column(col).into_owned();
            for j in 0..m {
                let t = sample_student_t(dof, &mut rngs[c]);
                v[j] += h * (sigma2 * kstar[col * m + j]).sqrt() * t;
            }
            if v.iter().any(|x| !(x.abs() <= limit)) {
                book.kill(c);
                continue;
            }
            book.paths[c].set_column(step, &v);
            states[c] = v;
        }
        book.check_failure(step + 1)?;
    }
    book.finish(cfg)
}

/// RK4 on the emulator's predictive mean, without sampling.
pub fn forecast_rk4_plugin_mean(
    model: &PpgpModel,
    y_n: &DVector<f64>,
    h: f64,
    stencil: &StencilSpec,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be positive"));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    if model.output_dim() != 1 || model.input_dim() != stencil.len() {
        return Err(Error::invalid("the derivative emulator must map the stencil to a scalar"));
    }
    let m = y_n.len();
    stencil.validate(m)?;
    let f = |s: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mean = model.predict_batch(&stencil.inputs(s), false)?.mean;
        Ok(DMatrix::from_column_slice(m, 1, mean.as_slice()))
    };
    let mut y = DMatrix::from_column_slice(m, 1, y_n.as_slice());
    let mut out = DMatrix::zeros(m, horizon);
    for step in 0..horizon {
        let k1 = f(&y)?;
        let k2 = f(&(&y + &k1 * (h / 2.0)))?;
        let k3 = f(&(&y + &k2 * (h / 2.0)))?;
        let k4 = f(&(&y + &k3 * h))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::ForecastFailure {
                step: step + 1,
                reason: "non-finite predictive mean".into(),
            });
        }
        out.set_column(step, &y.column(0));
    }
    Ok(out)
}
