//! File formats: snapshot CSVs, dataset manifests, forecasts, models.
//!
//! Matrices are stored as CSV with one row per coordinate and one column per
//! time point, preceded by a header row of 0-based column indices. Values are
//! written with 17 significant digits so doubles survive a round trip.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dmd::{Dictionary, DmdModel, EdmdModel, HodmdModel};
use crate::forecast::ForecastResult;
use crate::kernels::{InputMatrix, KernelSpec};
use crate::ppgp::{FitReport, MeanEstimate, PpgpModel};
use crate::{Error, Result};

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: u64, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Writes `m` with a header row of column indices.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 24 + 16);
    let header: Vec<String> = (0..m.ncols()).map(|j| j.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Reads a matrix written by [`write_matrix_csv`]. Ragged rows, unparsable
/// and non-finite cells are errors carrying the 1-based line and column.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let width = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_error(
                path,
                line,
                rec.len().min(width) + 1,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, j + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(path, line, j + 1, format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 || width == 0 {
        return Err(parse_error(path, 1, 1, "no data rows"));
    }
    Ok(DMatrix::from_row_slice(rows, width, &values))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (line, column) = match e.kind() {
        csv::ErrorKind::UnequalLengths { pos, len, expected_len } => (
            pos.as_ref().map_or(0, |p| p.line()),
            (*len.min(expected_len) + 1) as usize,
        ),
        _ => (e.position().map_or(0, |p| p.line()), 1),
    };
    match e.into_kind() {
        csv::ErrorKind::Io(err) => Error::io(path, err),
        kind => parse_error(path, line, column, format!("{kind:?}")),
    }
}

fn write_complex_csv(path: &Path, m: &DMatrix<Complex64>) -> Result<()> {
    let mut interleaved = DMatrix::zeros(m.nrows(), 2 * m.ncols());
    for ((i, j), z) in m.iter().enumerate().map(|(k, z)| ((k % m.nrows(), k / m.nrows()), z)) {
        interleaved[(i, 2 * j)] = z.re;
        interleaved[(i, 2 * j + 1)] = z.im;
    }
    write_matrix_csv(path, &interleaved)
}

fn read_complex_csv(path: &Path) -> Result<DMatrix<Complex64>> {
    let raw = read_matrix_csv(path)?;
    if raw.ncols() % 2 != 0 {
        return Err(parse_error(path, 1, raw.ncols(), "complex payload needs an even column count"));
    }
    Ok(DMatrix::from_fn(raw.nrows(), raw.ncols() / 2, |i, j| {
        Complex64::new(raw[(i, 2 * j)], raw[(i, 2 * j + 1)])
    }))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.column(), e.to_string()))
}

/// Dataset description; relative paths resolve against the manifest's folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub snapshots: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivatives: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<PathBuf>,
    /// Number of leading columns used for training.
    pub n_train: usize,
    #[serde(default)]
    pub description: String,
}

/// Snapshots split at `n_train`, plus the full optional companions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DMatrix<f64>,
    pub test: DMatrix<f64>,
    pub derivatives: Option<DMatrix<f64>>,
    pub inputs: Option<DMatrix<f64>>,
}

impl Dataset {
    /// All snapshots, training columns first.
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.train.ncols();
        let mut all = DMatrix::zeros(self.train.nrows(), n + self.test.ncols());
        all.columns_mut(0, n).copy_from(&self.train);
        all.columns_mut(n, self.test.ncols()).copy_from(&self.test);
        all
    }
}

pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest: DatasetManifest = read_json(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_snapshots(manifest: &DatasetManifest, base: &Path) -> Result<Dataset> {
    let snap_path = resolve(base, &manifest.snapshots);
    let all = read_matrix_csv(&snap_path)?;
    let n = all.ncols();
    if manifest.n_train == 0 || manifest.n_train >= n {
        return Err(Error::invalid(format!(
            "n_train must lie in 1..{n} for {}, got {}",
            snap_path.display(),
            manifest.n_train
        )));
    }
    let companion = |p: &Option<PathBuf>| -> Result<Option<DMatrix<f64>>> {
        let Some(p) = p else { return Ok(None) };
        let path = resolve(base, p);
        let m = read_matrix_csv(&path)?;
        if m.ncols() != n {
            return Err(Error::invalid(format!(
                "{} has {} columns but the snapshots have {n}",
                path.display(),
                m.ncols()
            )));
        }
        Ok(Some(m))
    };
    let derivatives = companion(&manifest.derivatives)?;
    if let Some(d) = &derivatives {
        if d.nrows() != all.nrows() {
            return Err(Error::invalid("derivative rows differ from snapshot rows"));
        }
    }
    let inputs = companion(&manifest.inputs)?;
    Ok(Dataset {
        train: all.columns(0, manifest.n_train).into_owned(),
        test: all.columns(manifest.n_train, n - manifest.n_train).into_owned(),
        derivatives,
        inputs,
    })
}

/// One row per (coordinate, step): `coord,step,mean,lower,upper`, with
/// 0-based coordinates and 1-based steps.
pub fn save_forecast(result: &ForecastResult, path: &Path) -> Result<()> {
    let mut out = String::from("coord,step,mean,lower,upper\n");
    for j in 0..result.dim() {
        for k in 0..result.horizon {
            out.push_str(&format!(
                "{j},{},{},{},{}\n",
                k + 1,
                fmt_value(result.mean[(j, k)]),
                fmt_value(result.lower[(j, k)]),
                fmt_value(result.upper[(j, k)])
            ));
        }
    }
    write_text(path, &out)
}

pub fn load_forecast(path: &Path, level: f64) -> Result<ForecastResult> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["coord", "step", "mean", "lower", "upper"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_error(path, 1, 1, format!("expected columns {}", expected.join(","))));
    }
    let mut rows: Vec<(usize, usize, [f64; 3])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let int = |j: usize| -> Result<usize> {
            rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, j + 1, format!("not an index: {:?}", &rec[j])))
        };
        let num = |j: usize| -> Result<f64> {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, j + 1, format!("not a number: {:?}", &rec[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_error(path, line, j + 1, "non-finite value"))
            }
        };
        let step = int(1)?;
        if step == 0 {
            return Err(parse_error(path, line, 2, "steps are 1-based"));
        }
        rows.push((int(0)?, step, [num(2)?, num(3)?, num(4)?]));
    }
    let m = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let h = rows.iter().map(|r| r.1).max().unwrap_or(0);
    if m * h != rows.len() || m == 0 {
        return Err(parse_error(path, 1, 1, "forecast rows do not form a full coord x step grid"));
    }
    let mut mean = DMatrix::from_element(m, h, f64::NAN);
    let mut lower = mean.clone();
    let mut upper = mean.clone();
    for (j, k, [a, b, c]) in rows {
        mean[(j, k - 1)] = a;
        lower[(j, k - 1)] = b;
        upper[(j, k - 1)] = c;
    }
    if mean.iter().any(|v| v.is_nan()) {
        return Err(parse_error(path, 1, 1, "duplicate (coord, step) rows"));
    }
    ForecastResult::new(mean, lower, upper, level, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PpgpMeta {
    spec: KernelSpec,
    mean_estimate: MeanEstimate,
    n_train: usize,
    input_dim: usize,
    output_dim: usize,
    mu_hat: Vec<f64>,
    sigma2_hat: Vec<f64>,
    jitter: f64,
    report: FitReport,
}

/// Writes `model.json` plus `inputs.csv`, `outputs.csv` and `chol.csv`.
pub fn save_ppgp(model: &PpgpModel, dir: &Path) -> Result<()> {
    let meta = PpgpMeta {
        spec: model.spec().clone(),
        mean_estimate: model.mean_estimate(),
        n_train: model.n_train(),
        input_dim: model.input_dim(),
        output_dim: model.output_dim(),
        mu_hat: model.mu_hat().iter().copied().collect(),
        sigma2_hat: model.sigma2_hat().iter().copied().collect(),
        jitter: model.jitter(),
        report: model.report.clone(),
    };
    write_json(&dir.join("model.json"), &meta)?;
    write_matrix_csv(&dir.join("inputs.csv"), model.inputs().as_matrix())?;
    write_matrix_csv(&dir.join("outputs.csv"), model.outputs())?;
    write_matrix_csv(&dir.join("chol.csv"), &model.chol_factor())
}

/// Rebuilds a model saved by [`save_ppgp`]; the factorization is recomputed
/// and checked against the stored factor.
pub fn load_ppgp(dir: &Path) -> Result<PpgpModel> {
    let meta: PpgpMeta = read_json(&dir.join("model.json"))?;
    let x = InputMatrix::new(read_matrix_csv(&dir.join("inputs.csv"))?)?;
    let y = read_matrix_csv(&dir.join("outputs.csv"))?;
    if x.len() != meta.n_train || x.dim() != meta.input_dim || y.nrows() != meta.output_dim {
        return Err(Error::invalid(format!(
            "payloads in {} disagree with model.json dimensions",
            dir.display()
        )));
    }
    let mut model = PpgpModel::with_params(x, y, meta.spec, meta.mean_estimate)?;
    let stored = read_matrix_csv(&dir.join("chol.csv"))?;
    let fresh = model.chol_factor();
    if stored.shape() != fresh.shape() || (&stored - &fresh).amax() > 1e-8 * fresh.amax().max(1.0) {
        return Err(Error::Numerical(format!(
            "stored Cholesky factor in {} does not match the recomputed one",
            dir.display()
        )));
    }
    model.report = meta.report;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DmdMeta {
    rank: usize,
    eigenvalues: Vec<[f64; 2]>,
    tau2_hat: f64,
    n_train: usize,
    spectral_radius: f64,
    #[serde(default)]
    warnings: Vec<String>,
}

/// Writes `{prefix}dmd.json` and the factor payloads into `dir`.
pub fn save_dmd(model: &DmdModel, dir: &Path, prefix: &str) -> Result<()> {
    let s = model.summary();
    let meta = DmdMeta {
        rank: s.rank,
        eigenvalues: s.eigenvalues,
        tau2_hat: s.tau2_hat,
        n_train: s.n_train,
        spectral_radius: s.spectral_radius,
        warnings: model.warnings.clone(),
    };
    let f = |name: &str| dir.join(format!("{prefix}{name}"));
    write_json(&f("dmd.json"), &meta)?;
    write_matrix_csv(&f("u_r.csv"), &model.u_r)?;
    write_matrix_csv(&f("sigma_r.csv"), &DMatrix::from_column_slice(model.rank, 1, model.sigma_r.as_slice()))?;
    write_matrix_csv(&f("v_r.csv"), &model.v_r)?;
    write_matrix_csv(&f("operator_left.csv"), &model.left)?;
    write_complex_csv(&f("modes.csv"), &model.modes)?;
    write_complex_csv(
        &f("amplitudes.csv"),
        &DMatrix::from_column_slice(model.rank, 1, model.amplitudes.as_slice()),
    )
}

pub fn load_dmd(dir: &Path, prefix: &str) -> Result<DmdModel> {
    let f = |name: &str| dir.join(format!("{prefix}{name}"));
    let meta: DmdMeta = read_json(&f("dmd.json"))?;
    let sigma = read_matrix_csv(&f("sigma_r.csv"))?;
    let amps = read_complex_csv(&f("amplitudes.csv"))?;
    let mut model = DmdModel::from_parts(
        read_matrix_csv(&f("u_r.csv"))?,
        DVector::from_column_slice(sigma.as_slice()),
        read_matrix_csv(&f("v_r.csv"))?,
        read_matrix_csv(&f("operator_left.csv"))?,
        meta.eigenvalues.iter().map(|[re, im]| Complex64::new(*re, *im)).collect(),
        read_complex_csv(&f("modes.csv"))?,
        DVector::from_column_slice(amps.as_slice()),
        meta.tau2_hat,
        meta.n_train,
    )?;
    if model.rank != meta.rank {
        return Err(Error::invalid(format!(
            "rank {} in {} disagrees with payload rank {}",
            meta.rank,
            f("dmd.json").display(),
            model.rank
        )));
    }
    model.warnings = meta.warnings;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HodmdMeta {
    d: usize,
    delta_t: usize,
    m: usize,
}

pub fn save_hodmd(model: &HodmdModel, dir: &Path) -> Result<()> {
    write_json(
        &dir.join("hodmd.json"),
        &HodmdMeta {
            d: model.d,
            delta_t: model.delta_t,
            m: model.m,
        },
    )?;
    save_dmd(&model.inner, dir, "inner_")
}

pub fn load_hodmd(dir: &Path) -> Result<HodmdModel> {
    let meta: HodmdMeta = read_json(&dir.join("hodmd.json"))?;
    let inner = load_dmd(dir, "inner_")?;
    if inner.state_dim() != meta.m * meta.d {
        return Err(Error::invalid("augmented dimension disagrees with m * d"));
    }
    Ok(HodmdModel {
        d: meta.d,
        delta_t: meta.delta_t,
        inner,
        m: meta.m,
    })
}

/// Parses `identity`, `polynomial:k` or `rbf:centers_file:gamma`; center
/// files resolve against `base`.
pub fn parse_dictionary(spec: &str, base: &Path) -> Result<Dictionary> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["identity"] => Ok(Dictionary::Identity),
        ["polynomial", k] => {
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("polynomial degree must be an integer, got {k:?}")))?;
            if k == 0 {
                return Err(Error::invalid("polynomial degree must be at least 1"));
            }
            Ok(Dictionary::Polynomial(k))
        }
        ["rbf", file, gamma] => {
            let gamma: f64 = gamma
                .parse()
                .map_err(|_| Error::invalid(format!("rbf gamma must be a number, got {gamma:?}")))?;
            let centers = read_matrix_csv(&resolve(base, Path::new(file)))?;
            Ok(Dictionary::Rbf { centers, gamma })
        }
        _ => Err(Error::invalid(format!(
            "unknown dictionary {spec:?}; expected identity, polynomial:k or rbf:centers_file:gamma"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdmdMeta {
    dictionary: String,
}

pub fn save_edmd(model: &EdmdModel, dir: &Path) -> Result<()> {
    let dictionary = match &model.dictionary {
        Dictionary::Identity => "identity".to_string(),
        Dictionary::Polynomial(k) => format!("polynomial:{k}"),
        Dictionary::Rbf { centers, gamma } => {
            write_matrix_csv(&dir.join("rbf_centers.csv"), centers)?;
            format!("rbf:rbf_centers.csv:{gamma:e}")
        }
        Dictionary::Custom(_) => {
            return Err(Error::invalid("custom dictionaries cannot be saved"));
        }
    };
    write_json(&dir.join("edmd.json"), &EdmdMeta { dictionary })?;
    write_matrix_csv(&dir.join("p_matrix.csv"), &model.p_matrix)?;
    save_dmd(&model.lifted, dir, "lifted_")
}

pub fn load_edmd(dir: &Path) -> Result<EdmdModel> {
    let meta: EdmdMeta = read_json(&dir.join("edmd.json"))?;
    Ok(EdmdModel {
        dictionary: parse_dictionary(&meta.dictionary, dir)?,
        lifted: load_dmd(dir, "lifted_")?,
        p_matrix: read_matrix_csv(&dir.join("p_matrix.csv"))?,
    })
}
