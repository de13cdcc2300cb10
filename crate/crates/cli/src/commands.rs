use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ggpm::efd::{LikelihoodFamily, Support};
use ggpm::inference::{EngineId, InferenceResult};
use ggpm::model::{
    evaluate, fit, fit_from_starts, predict_with, sample_dataset, taylor_candidates, FitResult, FitStrategy, GgpmModel,
    Metrics, ModelFile, Optimum,
};
use ggpm::numerics::check_gradient;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{csv_bytes, fmt, parse_grid, write_atomic, Axis, Dataset, LATENT_COLUMN, OUTPUT_COLUMN};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Writes `bytes` to `out`, or returns them as text for stdout.
fn emit(out: Option<&Path>, bytes: Vec<u8>) -> Result<String> {
    match out {
        Some(p) => {
            write_atomic(p, &bytes)?;
            Ok(String::new())
        }
        None => String::from_utf8(bytes).map_err(|e| CliError::Numerical(e.to_string())),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn load_config(path: &str, seed: Option<u64>, engine: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(name) = engine {
        let id = EngineId::from_name(name).map_err(|e| CliError::Validation(format!("--engine: {e}")))?;
        cfg.engine = cfg.engine_for(id);
    }
    Ok(cfg)
}

/// Training data checked against the configured likelihood.
fn training_set(cfg: &RunConfig, path: &str) -> Result<Dataset> {
    let mut data = Dataset::load(path)?;
    data.outputs()?;
    if data.is_empty() {
        return Err(CliError::Validation(format!("{path}: no data rows")));
    }
    if data.columns.is_empty() {
        return Err(CliError::Validation(format!("{path}: no input columns")));
    }
    data.validate_outputs(&cfg.lik, cfg.clamp_unit, &cfg.likelihood_id)?;
    Ok(data)
}

fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<GgpmModel> {
    let y = data.outputs()?.to_vec();
    Ok(GgpmModel::new(cfg.lik.clone(), cfg.kernel.clone(), cfg.engine.clone(), data.x.clone(), y)?)
}

fn hyper_names(model: &GgpmModel) -> Vec<String> {
    let mut names = model.kernel.param_names();
    names.push("log_dispersion".into());
    names
}

#[derive(Serialize)]
struct HyperEntry {
    name: String,
    log_value: f64,
    value: f64,
}

fn hyper_entries(model: &GgpmModel, hypers: &[f64]) -> Vec<HyperEntry> {
    hyper_names(model)
        .into_iter()
        .zip(hypers)
        .map(|(name, &h)| HyperEntry { name, log_value: h, value: h.exp() })
        .collect()
}

#[derive(Serialize)]
struct TrainReport<'a> {
    likelihood: &'a str,
    engine: &'static str,
    seed: u64,
    n: usize,
    log_marginal: f64,
    hyperparameters: Vec<HyperEntry>,
    selected: usize,
    optima: &'a [Optimum],
    taylor_stage_starts: usize,
    taylor_iterations: usize,
    target_iterations: usize,
    engine_failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_s: Option<f64>,
}

pub struct TrainArgs<'a> {
    pub config: &'a str,
    pub data: &'a str,
    pub out: &'a Path,
    pub report: Option<&'a Path>,
    pub seed: Option<u64>,
    pub engine: Option<&'a str>,
    pub timing: bool,
}

/// Report path next to the model file: `model.json` -> `model.report.json`.
pub fn default_report_path(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let start = Instant::now();
    let cfg = load_config(a.config, a.seed, a.engine)?;
    let data = training_set(&cfg, a.data)?;
    let model = build_model(&cfg, &data)?;
    let fitted = fit(&model, &cfg.fit)?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut file = ModelFile::from_model(&fitted.model, fitted.result.log_marginal);
    file.likelihood_id = Some(cfg.likelihood_id.clone());
    file.input_columns = data.columns.clone();
    file.data_source = Some(a.data.to_string());
    let mut text = file.to_json()?;
    text.push('\n');
    write_atomic(a.out, text.as_bytes())?;

    let report = TrainReport {
        likelihood: &cfg.likelihood_id,
        engine: fitted.model.engine.id().name(),
        seed: cfg.seed,
        n: data.len(),
        log_marginal: fitted.result.log_marginal,
        hyperparameters: hyper_entries(&fitted.model, &fitted.hypers),
        selected: fitted.selected,
        optima: &fitted.optima,
        taylor_stage_starts: fitted.taylor_stage.len(),
        taylor_iterations: fitted.taylor_iterations,
        target_iterations: fitted.target_iterations,
        engine_failures: fitted.engine_failures,
        wall_time_s: a.timing.then_some(elapsed),
    };
    let report_path = a.report.map_or_else(|| default_report_path(a.out), Path::to_path_buf);
    write_atomic(&report_path, &json_bytes(&report)?)?;

    let mut msg = format!(
        "trained {} / {} on {} rows: log marginal {}\n",
        cfg.likelihood_id,
        report.engine,
        data.len(),
        fmt(fitted.result.log_marginal)
    );
    for h in &report.hyperparameters {
        let _ = writeln!(msg, "  {} = {}", h.name, fmt(h.value));
    }
    if a.timing {
        let _ = writeln!(msg, "  wall time {elapsed:.3} s");
    }
    Ok(msg)
}

/// A model file rebuilt with its inference result.
struct Loaded {
    file: ModelFile,
    model: GgpmModel,
    result: InferenceResult,
}

fn load_model(path: &str) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
    let file = ModelFile::from_json(&text).map_err(|e| CliError::from(e).context(path))?;
    let model = file.to_model().map_err(|e| CliError::from(e).context(path))?;
    let result = model.infer()?;
    Ok(Loaded { file, model, result })
}

fn lik_name(file: &ModelFile) -> String {
    file.likelihood_id.clone().unwrap_or_else(|| file.likelihood.dist.name().to_string())
}

/// Test inputs in model column order, plus outputs checked against the
/// support when present.
fn test_set(loaded: &Loaded, path: &str) -> Result<(Dataset, DMatrix<f64>)> {
    let mut data = Dataset::load(path)?;
    let x = data.inputs_for(&loaded.file.input_columns)?;
    data.validate_outputs(&loaded.model.lik, false, &lik_name(&loaded.file))?;
    Ok((data, x))
}

pub fn predict(model: &str, data: &str, out: Option<&Path>) -> Result<String> {
    let loaded = load_model(model)?;
    let (set, x) = test_set(&loaded, data)?;
    let pred = predict_with(&loaded.model, &loaded.result, &x)?;
    let discrete = loaded.model.lik.support().is_discrete();
    let mut header = loaded.file.input_columns.clone();
    header.push("pred_mean".into());
    if discrete {
        header.push("pred_mode".into());
    }
    header.extend(["pred_var", "latent_mean", "latent_var"].map(String::from));
    if set.y.is_some() {
        header.push("nlp_contrib".into());
    }
    let mut rows = Vec::with_capacity(pred.len());
    for (i, p) in pred.iter().enumerate() {
        let mut row: Vec<String> = x.row(i).iter().map(|&v| fmt(v)).collect();
        row.push(fmt(p.mean));
        if let Some(m) = p.mode {
            row.push(fmt(m));
        }
        row.extend([fmt(p.var), fmt(p.latent_mean), fmt(p.latent_var)]);
        if let Some(y) = &set.y {
            row.push(fmt(p.log_density(y[i])?));
        }
        rows.push(row);
    }
    emit(out, csv_bytes(&header, &rows)?)
}

#[derive(Serialize)]
struct EvalReport {
    n: usize,
    mae: f64,
    mse: f64,
    nlp: f64,
}

pub fn eval(model: &str, data: &str, out: Option<&Path>) -> Result<String> {
    let loaded = load_model(model)?;
    let (set, x) = test_set(&loaded, data)?;
    let y = set.outputs()?;
    if y.is_empty() {
        return Err(ggpm::GgpmError::EmptyTestSet.into());
    }
    let pred = predict_with(&loaded.model, &loaded.result, &x)?;
    let m = evaluate(&pred, y)?;
    emit(out, json_bytes(&EvalReport { n: y.len(), mae: m.mae, mse: m.mse, nlp: m.nlp })?)
}

pub struct SampleArgs<'a> {
    pub config: &'a str,
    pub grid: Option<&'a str>,
    pub inputs: Option<&'a str>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

pub fn sample(a: &SampleArgs) -> Result<String> {
    let cfg = load_config(a.config, a.seed, None)?;
    let (columns, x) = match (a.grid, a.inputs) {
        (Some(g), None) => {
            let x = parse_grid(g)?;
            ((0..x.ncols()).map(|j| format!("x{j}")).collect::<Vec<_>>(), x)
        }
        (None, Some(p)) => {
            let d = Dataset::load(p)?;
            if d.columns.is_empty() {
                return Err(CliError::Validation(format!("{p}: no input columns")));
            }
            (d.columns, d.x)
        }
        _ => return Err(CliError::Validation("sample needs exactly one of --grid or --data".into())),
    };
    let s = sample_dataset(&cfg.lik, &cfg.kernel, &x, cfg.seed)?;
    let mut header = columns;
    header.extend([OUTPUT_COLUMN, LATENT_COLUMN].map(String::from));
    let rows: Vec<Vec<String>> = (0..x.nrows())
        .map(|i| {
            let mut r: Vec<String> = x.row(i).iter().map(|&v| fmt(v)).collect();
            r.extend([fmt(s.y[i]), fmt(s.eta[i])]);
            r
        })
        .collect();
    emit(a.out, csv_bytes(&header, &rows)?)
}

pub struct CompareArgs<'a> {
    pub config: &'a str,
    pub data: &'a str,
    pub test: Option<&'a str>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
    pub timing: bool,
}

/// One engine's row in the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub engine: EngineId,
    pub log_marginal: Option<f64>,
    pub metrics: Option<Metrics>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

fn compare_one(
    base: &GgpmModel,
    cfg: &RunConfig,
    id: EngineId,
    seeds: Option<&[Vec<f64>]>,
    test: &(DMatrix<f64>, Vec<f64>),
) -> std::result::Result<(FitResult, Metrics), CliError> {
    let model = base.with_engine(cfg.engine_for(id));
    let fitted = match seeds {
        Some(s) => fit_from_starts(&model, s, &cfg.fit)?,
        None => fit(&model, &cfg.fit)?,
    };
    let pred = predict_with(&fitted.model, &fitted.result, &test.0)?;
    let metrics = evaluate(&pred, &test.1)?;
    Ok((fitted, metrics))
}

/// Fits every engine from shared Taylor-stage candidates.
pub fn compare_rows(cfg: &RunConfig, train: &Dataset, test: &(DMatrix<f64>, Vec<f64>)) -> Result<Vec<CompareRow>> {
    let base = build_model(cfg, train)?;
    let (stage_iters, seeds) = match cfg.fit.strategy {
        FitStrategy::TaylorInit { n_random, top_k } => {
            let taylor = base.with_engine(cfg.engine_for(EngineId::Taylor));
            let (stage, seeds) = taylor_candidates(&taylor, n_random, top_k, &cfg.fit);
            (stage.iter().map(|o| o.iterations).sum::<usize>(), Some(seeds))
        }
        _ => (0, None),
    };
    let mut rows = Vec::new();
    for id in EngineId::ALL {
        let start = Instant::now();
        let outcome = compare_one(&base, cfg, id, seeds.as_deref(), test);
        let wall = start.elapsed().as_secs_f64();
        rows.push(match outcome {
            Ok((f, m)) => CompareRow {
                engine: id,
                log_marginal: Some(f.result.log_marginal),
                metrics: Some(m),
                iterations: f.target_iterations + if id == EngineId::Taylor { stage_iters } else { 0 },
                wall_time_s: wall,
                error: None,
            },
            Err(e) => CompareRow {
                engine: id,
                log_marginal: None,
                metrics: None,
                iterations: 0,
                wall_time_s: wall,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(rows)
}

pub fn compare(a: &CompareArgs) -> Result<String> {
    let cfg = load_config(a.config, a.seed, None)?;
    let train = training_set(&cfg, a.data)?;
    let test = match a.test {
        Some(p) => {
            let mut t = Dataset::load(p)?;
            let x = t.inputs_for(&train.columns)?;
            t.validate_outputs(&cfg.lik, cfg.clamp_unit, &cfg.likelihood_id)?;
            (x, t.outputs()?.to_vec())
        }
        None => (train.x.clone(), train.outputs()?.to_vec()),
    };
    let rows = compare_rows(&cfg, &train, &test)?;

    let mut header: Vec<String> =
        ["engine", "status", "log_marginal", "mae", "mse", "nlp", "iterations"].map(String::from).to_vec();
    if a.timing {
        header.push("wall_time_s".into());
    }
    header.push("error".into());
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.engine.name().to_string(),
                if r.error.is_none() { "ok" } else { "failed" }.to_string(),
                opt(r.log_marginal),
                opt(r.metrics.map(|m| m.mae)),
                opt(r.metrics.map(|m| m.mse)),
                opt(r.metrics.map(|m| m.nlp)),
                r.iterations.to_string(),
            ];
            if a.timing {
                row.push(fmt(r.wall_time_s));
            }
            row.push(r.error.clone().unwrap_or_default());
            row
        })
        .collect();

    let mut text = String::new();
    let _ = write!(
        text,
        "{:<8} {:>7} {:>14} {:>12} {:>12} {:>12} {:>10}",
        "engine", "status", "log_marginal", "mae", "mse", "nlp", "iters"
    );
    if a.timing {
        let _ = write!(text, " {:>10}", "wall_s");
    }
    text.push('\n');
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    for r in &rows {
        let _ = write!(
            text,
            "{:<8} {:>7} {:>14} {:>12} {:>12} {:>12} {:>10}",
            r.engine.name(),
            if r.error.is_none() { "ok" } else { "failed" },
            num(r.log_marginal),
            num(r.metrics.map(|m| m.mae)),
            num(r.metrics.map(|m| m.mse)),
            num(r.metrics.map(|m| m.nlp)),
            r.iterations
        );
        if a.timing {
            let _ = write!(text, " {:>10.3}", r.wall_time_s);
        }
        if let Some(e) = &r.error {
            let _ = write!(text, "  {e}");
        }
        text.push('\n');
    }
    if let Some(p) = a.out {
        write_atomic(p, &csv_bytes(&header, &table)?)?;
    }
    if rows.iter().all(|r| r.error.is_some()) {
        eprint!("{text}");
        return Err(CliError::Numerical("every engine failed".into()));
    }
    Ok(text)
}

/// Output values at which `curve` tabulates the predictive density when no
/// y-grid is given.
fn default_y_grid(lik: &LikelihoodFamily, y: &[f64]) -> Vec<f64> {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let n = 200;
    match lik.support() {
        Support::Counts => (0..=(2.0 * max + 10.0).ceil() as usize).map(|k| k as f64).collect(),
        Support::Fractions(t) => (0..=t).map(|k| k as f64 / t as f64).collect(),
        Support::UnitInterval => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        Support::PositiveReals => {
            let hi = 2.0 * max;
            (1..=n).map(|i| hi * i as f64 / n as f64).collect()
        }
        Support::Reals => {
            let pad = 0.5 * (max - min) + 4.0 * lik.dispersion().sqrt();
            Axis { lo: min - pad, hi: max + pad, n }.points()
        }
    }
}

pub fn curve(model: &str, grid: &str, y_grid: Option<&str>, out: Option<&Path>) -> Result<String> {
    let loaded = load_model(model)?;
    if loaded.model.x().ncols() != 1 {
        return Err(CliError::Validation(format!(
            "{model}: curve needs a model with one input column, found {}",
            loaded.model.x().ncols()
        )));
    }
    let axis = Axis::parse(grid)?;
    let ys = match y_grid {
        Some(g) => Axis::parse(g)?.points(),
        None => default_y_grid(&loaded.model.lik, loaded.model.y()),
    };
    let xs = axis.points();
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let pred = predict_with(&loaded.model, &loaded.result, &x)?;
    let mut header: Vec<String> =
        ["x", "latent_mean", "latent_lower", "latent_upper", "output_mean"].map(String::from).to_vec();
    header.extend(ys.iter().map(|&y| format!("density@{}", fmt(y))));
    let mut rows = Vec::with_capacity(xs.len());
    for (xv, p) in xs.iter().zip(&pred) {
        let sd = p.latent_var.sqrt();
        let mut row = vec![
            fmt(*xv),
            fmt(p.latent_mean),
            fmt(p.latent_mean - 2.0 * sd),
            fmt(p.latent_mean + 2.0 * sd),
            fmt(p.mean),
        ];
        for &y in &ys {
            row.push(fmt(p.density(y)?));
        }
        rows.push(row);
    }
    emit(out, csv_bytes(&header, &rows)?)
}

#[derive(Serialize)]
struct GradcheckReport {
    likelihood: String,
    engine: &'static str,
    step: f64,
    tolerance: f64,
    coordinates: Vec<GradcheckEntry>,
    max_rel_error: f64,
    pass: bool,
}

#[derive(Serialize)]
struct GradcheckEntry {
    name: String,
    at: f64,
    analytic: f64,
    numeric: f64,
    rel_error: f64,
}

/// Default tolerance: 1e-4 for the deterministic engines, 1e-3 for EP and KLD.
pub fn default_gradcheck_tol(id: EngineId) -> f64 {
    match id {
        EngineId::Taylor | EngineId::Laplace => 1e-4,
        EngineId::Ep | EngineId::Kld => 1e-3,
    }
}

pub fn gradcheck(config: &str, data: &str, engine: Option<&str>, out: Option<&Path>) -> Result<String> {
    let cfg = load_config(config, None, engine)?;
    let set = training_set(&cfg, data)?;
    let model = build_model(&cfg, &set)?;
    let h0 = model.hypers();
    let check = check_gradient(
        |h: &[f64]| -> Result<(f64, Vec<f64>)> {
            let r = model.with_hypers(h)?.infer()?;
            Ok((r.log_marginal, r.grad))
        },
        &h0,
        cfg.fd_step,
        1e-6,
    )?;
    let id = model.engine.id();
    let tolerance = cfg.gradcheck_tol.unwrap_or_else(|| default_gradcheck_tol(id));
    let coordinates: Vec<GradcheckEntry> = hyper_names(&model)
        .into_iter()
        .enumerate()
        .map(|(i, name)| GradcheckEntry {
            name,
            at: h0[i],
            analytic: check.analytic[i],
            numeric: check.numeric[i],
            rel_error: check.rel_error[i],
        })
        .collect();
    let pass = check.max_rel_error < tolerance;
    let report = GradcheckReport {
        likelihood: cfg.likelihood_id.clone(),
        engine: id.name(),
        step: cfg.fd_step,
        tolerance,
        coordinates,
        max_rel_error: check.max_rel_error,
        pass,
    };
    let mut text = String::new();
    for c in &report.coordinates {
        let _ = writeln!(
            text,
            "{:<24} analytic {:>16.9e} numeric {:>16.9e} rel {:.2e}",
            c.name, c.analytic, c.numeric, c.rel_error
        );
    }
    let _ = writeln!(
        text,
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_error,
        tolerance,
        if pass { "pass" } else { "FAIL" }
    );
    if let Some(p) = out {
        write_atomic(p, &json_bytes(&report)?)?;
    }
    if pass {
        Ok(text)
    } else {
        eprint!("{text}");
        Err(CliError::Numerical(format!("gradient check failed: max relative error {:.3e}", report.max_rel_error)))
    }
}
