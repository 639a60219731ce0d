//! The `dynuq` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or numerical failure, 2 on usage
//! errors. Diagnostics go to standard error.

mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dmd::{fit_dmd, fit_edmd, fit_hodmd, forecast_dmd_intervals, forecast_edmd, forecast_hodmd, DEFAULT_ENERGY};
use crate::forecast::{check_level, DEFAULT_LEVEL};
use crate::io;
use crate::kernels::{InputMatrix, KernelFamily, KernelSpec, KernelStructure, DEFAULT_POW_EXP_ALPHA};
use crate::metrics::evaluate;
use crate::ppgp::{
    fit_ppgp, forecast_chains, forecast_plugin_mean, forecast_rk4_emulated, forecast_rk4_plugin_mean,
    subsample_columns, ChainConfig, FitConfig, IdentityInput, StencilSpec, DEFAULT_CHAINS,
};
use crate::stochastics::{gen_lorenz96, Lorenz96Config};
use crate::{Error, ForecastResult};

const DEFAULT_SUBSAMPLE: usize = 500;
const DEFAULT_D: usize = 6;
const DEFAULT_DT: usize = 3;
const DEFAULT_H: f64 = 0.01;
const DEFAULT_STENCIL: [isize; 4] = [-2, -1, 0, 1];

#[derive(Debug, Parser)]
#[command(
    name = "dynuq",
    version,
    about = "Probabilistic forecasting with PP-GP emulators and the DMD family"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark system and write a dataset.
    Generate(GenerateArgs),
    /// Fit a model to a dataset and save it.
    Fit(FitArgs),
    /// Forecast from a saved model.
    Forecast(ForecastArgs),
    /// Score a forecast against held-out truth.
    Evaluate(EvaluateArgs),
    /// Draw forecast bands as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(subcommand)]
    system: System,
}

#[derive(Debug, Subcommand)]
enum System {
    /// Lorenz 96 integrated with RK4 from a random initial state.
    Lorenz96(Lorenz96Args),
}

#[derive(Debug, Args)]
struct Lorenz96Args {
    /// State dimension.
    #[arg(long, default_value_t = 40)]
    m: usize,
    /// Forcing constant.
    #[arg(long = "f", default_value_t = 8.0, allow_negative_numbers = true)]
    forcing: f64,
    /// RK4 step size.
    #[arg(long, default_value_t = DEFAULT_H)]
    h: f64,
    /// Number of integration steps; the output has steps + 1 columns.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training steps recorded in the manifest (columns 0..=n-train).
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Ppgp,
    Dmd,
    Hodmd,
    Edmd,
}

/// What a PP-GP emulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Target {
    /// Scalar derivative from a cyclic stencil, integrated with RK4.
    Derivative,
    /// The full one-step map y_t -> y_{t+1}.
    Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KernelName {
    #[value(name = "matern_2_5")]
    Matern25,
    #[value(name = "pow_exp")]
    PowExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Structure {
    Product,
    Isotropic,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Dataset manifest (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds subsampling and optimizer restarts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Singular-value energy kept by DMD-family truncation [default: 0.99].
    #[arg(long)]
    energy: Option<f64>,
    /// Fixed truncation rank, overriding --energy [default: from energy].
    #[arg(long)]
    rank: Option<usize>,
    /// HODMD number of stacked snapshots [default: 6].
    #[arg(long)]
    d: Option<usize>,
    /// HODMD skip between training windows [default: 3].
    #[arg(long)]
    dt: Option<usize>,
    /// EDMD dictionary: identity, polynomial:K or rbf:CENTERS_CSV:GAMMA [default: identity].
    #[arg(long)]
    dictionary: Option<String>,
    /// PP-GP training pairs kept after uniform subsampling [default: 500].
    #[arg(long)]
    subsample: Option<usize>,
    /// PP-GP kernel family [default: matern_2_5].
    #[arg(long, value_enum)]
    kernel: Option<KernelName>,
    /// Power-exponential roughness [default: 1.9].
    #[arg(long)]
    alpha: Option<f64>,
    /// PP-GP kernel structure [default: product].
    #[arg(long, value_enum)]
    structure: Option<Structure>,
    /// PP-GP target [default: derivative if the dataset has derivatives, else transition].
    #[arg(long, value_enum)]
    target: Option<Target>,
    /// Comma-separated stencil offsets for the derivative target [default: -2,-1,0,1].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    stencil: Option<Vec<isize>>,
    /// Integration step for the derivative target [default: 0.01].
    #[arg(long)]
    h: Option<f64>,
    /// Optimizer restarts [default: 3].
    #[arg(long)]
    restarts: Option<usize>,
    /// Optimizer iterations per restart [default: 200].
    #[arg(long)]
    max_iters: Option<u64>,
    /// Fix the nugget at zero instead of estimating it.
    #[arg(long)]
    nugget_zero: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Sample trajectories of a transition emulator.
    Chains,
    /// Iterate the predictive mean only; bands collapse onto the mean.
    Plugin,
    /// RK4 on a derivative emulator with sampled perturbations.
    Rk4,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    /// Model directory written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Steps ahead.
    #[arg(long, value_parser = positive)]
    horizon: usize,
    /// Predictive interval level.
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// PP-GP sample trajectories [default: 100].
    #[arg(long, value_parser = positive)]
    chains: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PP-GP forecast mode [default: rk4 for derivative models, chains otherwise].
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// CSV of the most recent snapshots, oldest first [default: end of the training data].
    #[arg(long)]
    initial: Option<PathBuf>,
    /// Output forecast CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("truth_source").required(true).args(["truth", "data"])))]
struct EvaluateArgs {
    /// Forecast CSV.
    #[arg(long)]
    forecast: PathBuf,
    /// Truth matrix CSV; its first `horizon` columns are used.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Dataset manifest; truth is the held-out block.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Level the forecast bands were built at.
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    /// Row label in the printed table.
    #[arg(long, default_value = "forecast")]
    method: String,
    /// Output metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("truth_source").args(["truth", "data"])))]
struct PlotArgs {
    /// Forecast CSV.
    #[arg(long)]
    forecast: PathBuf,
    /// Truth matrix CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Dataset manifest; truth is the held-out block.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated 0-based coordinates to draw.
    #[arg(long, value_delimiter = ',', required = true)]
    coords: Vec<usize>,
    /// Output directory; one `coord_J.svg` per coordinate.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    width: u32,
    #[arg(long, default_value_t = 400)]
    height: u32,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Failure(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Plot(a) => cmd_plot(a),
    });
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Caps rayon's pool at `DYNUQ_THREADS` when set.
fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("DYNUQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("DYNUQ_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when several commands run in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let System::Lorenz96(a) = args.system;
    let cfg = Lorenz96Config {
        m: a.m,
        forcing: a.forcing,
        h: a.h,
        steps: a.steps,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.n_train == 0 || a.n_train >= a.steps {
        return Err(usage(format!(
            "--n-train must lie in 1..{}, got {}",
            a.steps, a.n_train
        )));
    }
    let run = gen_lorenz96(&cfg)?;
    io::write_matrix_csv(&a.out.join("states.csv"), &run.states)?;
    io::write_matrix_csv(&a.out.join("derivs.csv"), &run.derivs)?;
    io::write_json(&a.out.join("config.json"), &cfg)?;
    let manifest = io::DatasetManifest {
        snapshots: "states.csv".into(),
        derivatives: Some("derivs.csv".into()),
        inputs: None,
        n_train: a.n_train + 1,
        description: format!(
            "lorenz96 m={} F={} h={} steps={} seed={}",
            cfg.m, cfg.forcing, cfg.h, cfg.steps, cfg.seed
        ),
    };
    io::write_json(&a.out.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Everything `forecast` needs to know about how a model was fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitRecord {
    method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Target>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stencil: Option<Vec<isize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    seed: u64,
    report: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objective: Option<f64>,
    converged: bool,
    elapsed_secs: f64,
}

fn reject_flags(method: Method, flags: &[(&str, bool)]) -> CliResult {
    match flags.iter().find(|(_, present)| *present) {
        Some((name, _)) => Err(usage(format!(
            "--{name} does not apply to --method {}",
            method.to_possible_value().expect("named").get_name()
        ))),
        None => Ok(()),
    }
}

fn check_energy(energy: f64) -> CliResult<f64> {
    if energy > 0.0 && energy <= 1.0 {
        Ok(energy)
    } else {
        Err(usage(format!("--energy must lie in (0, 1], got {energy}")))
    }
}

fn cmd_fit(a: FitArgs) -> CliResult {
    let ppgp_only = [
        ("subsample", a.subsample.is_some()),
        ("kernel", a.kernel.is_some()),
        ("alpha", a.alpha.is_some()),
        ("structure", a.structure.is_some()),
        ("target", a.target.is_some()),
        ("stencil", a.stencil.is_some()),
        ("h", a.h.is_some()),
        ("restarts", a.restarts.is_some()),
        ("max-iters", a.max_iters.is_some()),
        ("nugget-zero", a.nugget_zero),
    ];
    let dmd_family = [("energy", a.energy.is_some()), ("rank", a.rank.is_some())];
    let hodmd_only = [("d", a.d.is_some()), ("dt", a.dt.is_some())];
    let edmd_only = [("dictionary", a.dictionary.is_some())];
    match a.method {
        Method::Ppgp => {
            reject_flags(a.method, &dmd_family)?;
            reject_flags(a.method, &hodmd_only)?;
            reject_flags(a.method, &edmd_only)?;
        }
        Method::Dmd => {
            reject_flags(a.method, &ppgp_only)?;
            reject_flags(a.method, &hodmd_only)?;
            reject_flags(a.method, &edmd_only)?;
        }
        Method::Hodmd => {
            reject_flags(a.method, &ppgp_only)?;
            reject_flags(a.method, &edmd_only)?;
        }
        Method::Edmd => {
            reject_flags(a.method, &ppgp_only)?;
            reject_flags(a.method, &hodmd_only)?;
        }
    }
    if a.rank == Some(0) {
        return Err(usage("--rank must be at least 1"));
    }
    let (manifest, base) = io::read_manifest(&a.data)?;
    let data = io::load_snapshots(&manifest, &base)?;
    let train = &data.train;
    let n = train.ncols();
    let started = Instant::now();
    let energy = check_energy(a.energy.unwrap_or(DEFAULT_ENERGY))?;

    let (record, initial) = match a.method {
        Method::Ppgp => fit_ppgp_command(&a, &data)?,
        Method::Dmd => {
            let model = fit_dmd(train, energy, a.rank)?;
            io::save_dmd(&model, &a.out, "")?;
            report_warnings(&model.warnings);
            let record = dmd_record(a.method, model.rank, a.seed, started);
            (record, train.columns(n - 1, 1).into_owned())
        }
        Method::Hodmd => {
            let d = a.d.unwrap_or(DEFAULT_D);
            let dt = a.dt.unwrap_or(DEFAULT_DT);
            if d == 0 || dt == 0 {
                return Err(usage("--d and --dt must be at least 1"));
            }
            let model = fit_hodmd(train, d, dt, energy, a.rank)?;
            io::save_hodmd(&model, &a.out)?;
            report_warnings(&model.inner.warnings);
            let record = dmd_record(a.method, model.inner.rank, a.seed, started);
            (record, train.columns(n - d, d).into_owned())
        }
        Method::Edmd => {
            let spec = a.dictionary.as_deref().unwrap_or("identity");
            let dictionary = io::parse_dictionary(spec, &base).map_err(|e| match e {
                Error::InvalidArgument(msg) => usage(msg),
                other => other.into(),
            })?;
            let model = fit_edmd(train, dictionary, energy, a.rank)?;
            io::save_edmd(&model, &a.out)?;
            report_warnings(&model.lifted.warnings);
            let record = dmd_record(a.method, model.lifted.rank, a.seed, started);
            (record, train.columns(n - 1, 1).into_owned())
        }
    };
    io::write_matrix_csv(&a.out.join("initial.csv"), &initial)?;
    io::write_json(&a.out.join("fit.json"), &record)?;
    match record.rank {
        Some(r) => println!("fitted {:?} model with rank {r}", record.method),
        None => println!(
            "fitted ppgp model, objective {:.6}, converged {}",
            record.report.objective.unwrap_or(f64::NAN),
            record.report.converged
        ),
    }
    Ok(())
}

fn dmd_record(method: Method, rank: usize, seed: u64, started: Instant) -> FitRecord {
    FitRecord {
        method,
        target: None,
        stencil: None,
        h: None,
        rank: Some(rank),
        seed,
        report: FitSummary {
            objective: None,
            converged: true,
            elapsed_secs: started.elapsed().as_secs_f64(),
        },
    }
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn fit_ppgp_command(a: &FitArgs, data: &io::Dataset) -> CliResult<(FitRecord, DMatrix<f64>)> {
    let train = &data.train;
    let (m, n) = train.shape();
    let target = a.target.unwrap_or(if data.derivatives.is_some() {
        Target::Derivative
    } else {
        Target::Transition
    });
    if target == Target::Transition {
        reject_flags(Method::Ppgp, &[("stencil", a.stencil.is_some()), ("h", a.h.is_some())])?;
    }
    let family = match (a.kernel.unwrap_or(KernelName::Matern25), a.alpha) {
        (KernelName::Matern25, None) => KernelFamily::Matern25,
        (KernelName::Matern25, Some(_)) => return Err(usage("--alpha only applies to --kernel pow_exp")),
        (KernelName::PowExp, alpha) => KernelFamily::PowExp {
            alpha: alpha.unwrap_or(DEFAULT_POW_EXP_ALPHA),
        },
    };
    let structure = match a.structure.unwrap_or(Structure::Product) {
        Structure::Product => KernelStructure::Product,
        Structure::Isotropic => KernelStructure::Isotropic,
    };
    let defaults = FitConfig::default();
    let cfg = FitConfig {
        restarts: a.restarts.unwrap_or(defaults.restarts),
        max_iters: a.max_iters.unwrap_or(defaults.max_iters),
        fix_nugget_zero: a.nugget_zero,
        seed: a.seed,
        ..defaults
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let h = a.h.unwrap_or(DEFAULT_H);
    if !(h.is_finite() && h > 0.0) {
        return Err(usage(format!("--h must be positive, got {h}")));
    }

    let (x, y, stencil, initial) = match target {
        Target::Derivative => {
            let derivs = data
                .derivatives
                .as_ref()
                .ok_or_else(|| usage("--target derivative needs a dataset with derivatives"))?;
            let stencil = StencilSpec {
                offsets: a.stencil.clone().unwrap_or_else(|| DEFAULT_STENCIL.to_vec()),
            };
            stencil.validate(m).map_err(|e| usage(format!("--stencil: {e}")))?;
            let dtrain = derivs.columns(0, n).into_owned();
            // Column 0 is the random initial draw; training starts after one step.
            let first = usize::from(n > 1);
            let (x, y) = stencil.training_pairs(train, &dtrain, first..n)?;
            (x, y, Some(stencil), train.columns(n - 1, 1).into_owned())
        }
        Target::Transition => {
            if n < 2 {
                return Err(Error::invalid("transition emulation needs at least 2 training snapshots").into());
            }
            let x = InputMatrix::new(train.columns(0, n - 1).into_owned())?;
            let y = train.columns(1, n - 1).into_owned();
            (x, y, None, train.columns(n - 1, 1).into_owned())
        }
    };
    let count = a.subsample.unwrap_or(DEFAULT_SUBSAMPLE);
    if count == 0 {
        return Err(usage("--subsample must be at least 1"));
    }
    let (x, y) = if count < x.len() {
        subsample_columns(&x, &y, count, a.seed)?
    } else {
        (x, y)
    };
    let ranges = match structure {
        KernelStructure::Product => vec![1.0; x.dim()],
        KernelStructure::Isotropic => vec![1.0],
    };
    let template = KernelSpec::new(family, structure, ranges, 0.0).map_err(|e| usage(e.to_string()))?;
    let model = fit_ppgp(x, y, &template, &cfg)?;
    io::save_ppgp(&model, &a.out)?;
    report_warnings(&model.report.warnings);
    let record = FitRecord {
        method: Method::Ppgp,
        target: Some(target),
        h: stencil.as_ref().map(|_| h),
        stencil: stencil.map(|s| s.offsets),
        rank: None,
        seed: a.seed,
        report: FitSummary {
            objective: Some(model.report.objective),
            converged: model.report.converged,
            elapsed_secs: model.report.elapsed_secs,
        },
    };
    Ok((record, initial))
}

fn cmd_forecast(a: ForecastArgs) -> CliResult {
    check_level(a.level).map_err(|e| usage(format!("--level: {e}")))?;
    let record: FitRecord = io::read_json(&a.model.join("fit.json"))?;
    let initial = match &a.initial {
        Some(p) => io::read_matrix_csv(p)?,
        None => io::read_matrix_csv(&a.model.join("initial.csv"))?,
    };
    let last = DVector::from_column_slice(initial.column(initial.ncols() - 1).as_slice());
    if record.method != Method::Ppgp {
        reject_flags(
            record.method,
            &[("chains", a.chains.is_some()), ("mode", a.mode.is_some())],
        )?;
    }
    let result = match record.method {
        Method::Ppgp => forecast_ppgp_command(&a, &record, &last)?,
        Method::Dmd => {
            let model = io::load_dmd(&a.model, "")?;
            check_state_dim(model.state_dim(), last.len())?;
            forecast_dmd_intervals(&model, &last, a.horizon, a.level)?
        }
        Method::Hodmd => {
            let model = io::load_hodmd(&a.model)?;
            if initial.nrows() != model.m || initial.ncols() < model.d {
                return Err(usage(format!(
                    "--initial must hold at least {} snapshots of dimension {}",
                    model.d, model.m
                )));
            }
            let recent = initial.columns(initial.ncols() - model.d, model.d).into_owned();
            forecast_hodmd(&model, &recent, a.horizon, a.level)?
        }
        Method::Edmd => {
            let model = io::load_edmd(&a.model)?;
            check_state_dim(model.p_matrix.nrows(), last.len())?;
            forecast_edmd(&model, &last, a.horizon, a.level)?
        }
    };
    report_warnings(&result.warnings);
    if result.diverged_chains > 0 {
        eprintln!("warning: {} chains diverged and were dropped", result.diverged_chains);
    }
    io::save_forecast(&result, &a.out)?;
    Ok(())
}

fn check_state_dim(expected: usize, got: usize) -> CliResult {
    if expected == got {
        Ok(())
    } else {
        Err(usage(format!(
            "initial state has dimension {got}, the model expects {expected}"
        )))
    }
}

fn forecast_ppgp_command(
    a: &ForecastArgs,
    record: &FitRecord,
    last: &DVector<f64>,
) -> CliResult<ForecastResult> {
    let model = io::load_ppgp(&a.model)?;
    let target = record.target.unwrap_or(Target::Transition);
    let mode = a.mode.unwrap_or(match target {
        Target::Derivative => Mode::Rk4,
        Target::Transition => Mode::Chains,
    });
    let cfg = ChainConfig {
        horizon: a.horizon,
        chains: a.chains.unwrap_or(DEFAULT_CHAINS),
        level: a.level,
        seed: a.seed,
        keep_samples: false,
    };
    let plugin = |mean: DMatrix<f64>| -> CliResult<ForecastResult> {
        let mut r = ForecastResult::new(mean.clone(), mean.clone(), mean, a.level, None)?;
        r.warnings.push("plugin forecast carries no uncertainty; bands equal the mean".into());
        Ok(r)
    };
    match (target, mode) {
        (Target::Derivative, Mode::Rk4) | (Target::Derivative, Mode::Plugin) => {
            let stencil = StencilSpec {
                offsets: record.stencil.clone().unwrap_or_else(|| DEFAULT_STENCIL.to_vec()),
            };
            let h = record.h.unwrap_or(DEFAULT_H);
            if mode == Mode::Plugin {
                return plugin(forecast_rk4_plugin_mean(&model, last, h, &stencil, a.horizon)?);
            }
            Ok(forecast_rk4_emulated(&model, last, h, &stencil, &cfg)?)
        }
        (Target::Transition, Mode::Chains) | (Target::Transition, Mode::Plugin) => {
            check_state_dim(model.output_dim(), last.len())?;
            let history = vec![last.clone()];
            if mode == Mode::Plugin {
                return plugin(forecast_plugin_mean(&model, &history, &IdentityInput, a.horizon)?);
            }
            Ok(forecast_chains(&model, &history, &IdentityInput, &cfg)?)
        }
        (Target::Derivative, Mode::Chains) => Err(usage(
            "--mode chains needs a transition emulator; this model emulates derivatives (use rk4)",
        )),
        (Target::Transition, Mode::Rk4) => Err(usage(
            "--mode rk4 needs a derivative emulator; this model emulates the transition map",
        )),
    }
}

/// Truth block for a forecast: the first `horizon` columns of `--truth`, or
/// of the held-out part of `--data`.
fn load_truth(truth: Option<&Path>, data: Option<&Path>) -> CliResult<Option<DMatrix<f64>>> {
    match (truth, data) {
        (Some(p), _) => Ok(Some(io::read_matrix_csv(p)?)),
        (None, Some(p)) => {
            let (manifest, base) = io::read_manifest(p)?;
            Ok(Some(io::load_snapshots(&manifest, &base)?.test))
        }
        (None, None) => Ok(None),
    }
}

fn truth_block(truth: &DMatrix<f64>, forecast: &ForecastResult) -> crate::Result<DMatrix<f64>> {
    if truth.nrows() != forecast.dim() || truth.ncols() < forecast.horizon {
        return Err(Error::invalid(format!(
            "truth is {}x{} but the forecast needs {}x{}",
            truth.nrows(),
            truth.ncols(),
            forecast.dim(),
            forecast.horizon
        )));
    }
    Ok(truth.columns(0, forecast.horizon).into_owned())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    check_level(a.level).map_err(|e| usage(format!("--level: {e}")))?;
    let forecast = io::load_forecast(&a.forecast, a.level)?;
    let truth = load_truth(a.truth.as_deref(), a.data.as_deref())?.expect("group requires a truth source");
    let report = evaluate(&forecast, &truth_block(&truth, &forecast)?)?;
    io::write_json(&a.out, &report)?;
    print!("{}", report.table(&a.method));
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    if a.coords.is_empty() {
        return Err(usage("--coords needs at least one coordinate"));
    }
    if a.width < 200 || a.height < 150 {
        return Err(usage("--width must be at least 200 and --height at least 150"));
    }
    let forecast = io::load_forecast(&a.forecast, DEFAULT_LEVEL)?;
    if let Some(&bad) = a.coords.iter().find(|&&c| c >= forecast.dim()) {
        return Err(usage(format!(
            "unknown coordinate {bad}; the forecast has coordinates 0..{}",
            forecast.dim()
        )));
    }
    let truth = match load_truth(a.truth.as_deref(), a.data.as_deref())? {
        Some(t) => Some(truth_block(&t, &forecast)?),
        None => None,
    };
    for &j in &a.coords {
        let row = |m: &DMatrix<f64>| -> Vec<f64> { m.row(j).iter().copied().collect() };
        let chart = plot::BandChart {
            title: format!("coordinate {j}"),
            mean: row(&forecast.mean),
            lower: row(&forecast.lower),
            upper: row(&forecast.upper),
            truth: truth.as_ref().map(row),
        };
        let svg = chart.render(a.width, a.height);
        let path = a.out.join(format!("coord_{j}.svg"));
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
