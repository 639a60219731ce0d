use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynuq::io;
use dynuq::metrics::MetricsReport;
use nalgebra::DMatrix;

fn dynuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynuq"))
        .args(args)
        .env("DYNUQ_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dynuq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str, steps: &str) {
    ok(&[
        "generate", "lorenz96", "--m", "8", "--steps", steps, "--n-train", "60", "--seed", seed, "--out", p(dir),
    ]);
}

#[test]
fn generate_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["generate", "lorenz96", "--m", "40", "--f", "8", "--h", "0.01", "--steps", "1000", "--seed", "7", "--out", p(&a)]);
    ok(&["generate", "lorenz96", "--seed", "7", "--out", p(&b)]);
    let states = io::read_matrix_csv(&a.join("states.csv")).unwrap();
    assert_eq!(states.shape(), (40, 1001));
    for f in ["states.csv", "derivs.csv", "config.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (manifest, _) = io::read_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.n_train, 101);
}

#[test]
fn missing_out_and_bad_values_exit_two() {
    assert_eq!(dynuq(&["generate", "lorenz96"]).status.code(), Some(2));
    assert_eq!(dynuq(&["generate", "lorenz96", "--m", "3", "--out", "x"]).status.code(), Some(2));
    let out = dynuq(&["fit", "--method", "ppgp", "--d", "6", "--data", "m.json", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--d"));
    assert_eq!(
        dynuq(&["forecast", "--model", "m", "--horizon", "0", "--out", "f.csv"]).status.code(),
        Some(2)
    );
    assert_eq!(dynuq(&["fit", "--help"]).status.code(), Some(0));
}

#[test]
fn dmd_family_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "3", "120");
    let manifest = data.join("manifest.json");
    for (name, extra) in [
        ("dmd", vec!["--energy", "0.99"]),
        ("hodmd", vec!["--d", "6", "--dt", "3"]),
        ("edmd", vec!["--dictionary", "polynomial:2"]),
    ] {
        let model = tmp.path().join(format!("{name}_model"));
        let mut args = vec!["fit", "--method", name, "--data", p(&manifest), "--out", p(&model)];
        args.extend(extra);
        ok(&args);
        assert!(model.join("fit.json").exists());

        let fc = tmp.path().join(format!("{name}.csv"));
        ok(&["forecast", "--model", p(&model), "--horizon", "40", "--level", "0.9", "--out", p(&fc)]);
        let f = io::load_forecast(&fc, 0.9).unwrap();
        assert_eq!(f.mean.shape(), (8, 40));

        let metrics = tmp.path().join(format!("{name}.json"));
        let out = ok(&[
            "evaluate", "--forecast", p(&fc), "--data", p(&manifest), "--level", "0.9", "--method", name, "--out",
            p(&metrics),
        ]);
        let report: MetricsReport = io::read_json(&metrics).unwrap();
        assert_eq!(report.level, 0.9);
        assert!(report.heldout_std > 0.0);
        assert!(String::from_utf8_lossy(&out.stdout).contains(name));
    }
    let text: serde_json::Value = io::read_json(&tmp.path().join("dmd_model/dmd.json")).unwrap();
    assert!(text["rank"].as_u64().unwrap() >= 1);

    // forecasting with PP-GP-only flags on a DMD model is a usage error
    let out = dynuq(&[
        "forecast", "--model", p(&tmp.path().join("dmd_model")), "--horizon", "5", "--chains", "10", "--out",
        p(&tmp.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ppgp_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "5", "100");
    let manifest = data.join("manifest.json");
    let model = tmp.path().join("model");
    ok(&[
        "fit", "--method", "ppgp", "--subsample", "120", "--kernel", "matern_2_5", "--restarts", "1", "--max-iters",
        "30", "--data", p(&manifest), "--out", p(&model),
    ]);
    let run = |name: &str| {
        let fc = tmp.path().join(name);
        ok(&[
            "forecast", "--model", p(&model), "--horizon", "20", "--level", "0.95", "--chains", "20", "--seed", "3",
            "--out", p(&fc),
        ]);
        fs::read(fc).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));

    let plug = tmp.path().join("plug.csv");
    ok(&["forecast", "--model", p(&model), "--horizon", "20", "--mode", "plugin", "--out", p(&plug)]);
    let f = io::load_forecast(&plug, 0.95).unwrap();
    assert_eq!(f.lower, f.mean);
    assert_eq!(
        dynuq(&["forecast", "--model", p(&model), "--horizon", "5", "--mode", "chains", "--out", p(&plug)])
            .status
            .code(),
        Some(2)
    );

    let fc = tmp.path().join("a.csv");
    let metrics = tmp.path().join("m.json");
    ok(&["evaluate", "--forecast", p(&fc), "--data", p(&manifest), "--out", p(&metrics)]);
    let report: MetricsReport = io::read_json(&metrics).unwrap();
    assert!(report.rmse.is_finite() && report.coverage >= 0.0);

    let plots = tmp.path().join("plots");
    ok(&["plot", "--forecast", p(&fc), "--data", p(&manifest), "--coords", "0,7", "--out", p(&plots)]);
    for j in [0, 7] {
        let svg = fs::read_to_string(plots.join(format!("coord_{j}.svg"))).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("path")).count(), 2);
        let poly = doc.descendants().find(|n| n.has_tag_name("polygon")).unwrap();
        assert_eq!(poly.attribute("points").unwrap().split(' ').count(), 2 * 20 + 1);
    }
    assert_eq!(
        dynuq(&["plot", "--forecast", p(&fc), "--coords", "8", "--out", p(&plots)]).status.code(),
        Some(2)
    );
    assert_eq!(
        dynuq(&["plot", "--forecast", p(&fc), "--coords", "", "--out", p(&plots)]).status.code(),
        Some(2)
    );
}

#[test]
fn evaluate_perfect_forecast_and_shape_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = DMatrix::from_fn(3, 6, |i, j| (i * 6 + j) as f64 * 0.5);
    let f = dynuq::ForecastResult::new(truth.clone(), truth.clone(), truth.clone(), 0.95, None).unwrap();
    let fc = tmp.path().join("f.csv");
    io::save_forecast(&f, &fc).unwrap();
    let tp = tmp.path().join("truth.csv");
    io::write_matrix_csv(&tp, &truth).unwrap();
    let out = tmp.path().join("m.json");
    ok(&["evaluate", "--forecast", p(&fc), "--truth", p(&tp), "--out", p(&out)]);
    let r: MetricsReport = io::read_json(&out).unwrap();
    assert_eq!((r.rmse, r.coverage, r.level), (0.0, 1.0, 0.95));

    io::write_matrix_csv(&tp, &truth.rows(0, 2).into_owned()).unwrap();
    assert_eq!(
        dynuq(&["evaluate", "--forecast", p(&fc), "--truth", p(&tp), "--out", p(&out)]).status.code(),
        Some(1)
    );
}
