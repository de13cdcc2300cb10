use std::cell::RefCell;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GgpmModel;
use crate::error::{GgpmError, Result};
use crate::inference::{
    apply_hypers, ep_infer_from, infer, kld_infer_from, kld_joint_objective, Engine, EngineId, EngineState,
    ExpansionRule, InferenceResult, KldOptions,
};
use crate::numerics::{minimize, MinimizeOptions, MinimizeStatus, PsdFactor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitStrategy {
    /// Taylor-engine fits from `n_random` random starts; the best `top_k`
    /// distinct optima seed the target engine.
    TaylorInit { n_random: usize, top_k: usize },
    /// Target-engine fits from `n_starts` random starts.
    RandomMultistart { n_starts: usize },
    /// One target-engine fit from the model's current hyperparameters.
    Single,
}

impl Default for FitStrategy {
    fn default() -> Self {
        FitStrategy::TaylorInit { n_random: 50, top_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub strategy: FitStrategy,
    pub seed: u64,
    /// Random log-hyperparameter starts are uniform on [start_low, start_high].
    pub start_low: f64,
    pub start_high: f64,
    /// Optima closer than this (Euclidean, log space) count as one.
    pub dedupe_tol: f64,
    pub optimizer: MinimizeOptions,
    /// Run independent starts on the rayon pool.
    pub parallel: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            strategy: FitStrategy::default(),
            seed: 0,
            start_low: -3.0,
            start_high: 3.0,
            dedupe_tol: 0.05,
            optimizer: MinimizeOptions { gtol: 1e-5, max_iter: 200, ftol: 1e-10, ..Default::default() },
            parallel: true,
        }
    }
}

/// One optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub engine: EngineId,
    pub start: Vec<f64>,
    pub hypers: Vec<f64>,
    /// -inf for a failed run.
    pub log_marginal: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective evaluations where the engine failed or did not converge.
    pub engine_failures: usize,
    pub error: Option<String>,
    /// Log marginal at the start and after each accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl Optimum {
    fn failed(engine: EngineId, start: &[f64], err: String) -> Self {
        Self {
            engine,
            start: start.to_vec(),
            hypers: start.to_vec(),
            log_marginal: f64::NEG_INFINITY,
            grad_norm: f64::INFINITY,
            iterations: 0,
            evaluations: 0,
            converged: false,
            engine_failures: 1,
            error: Some(err),
            trace: Vec::new(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.log_marginal.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// The model at the selected hyperparameters.
    pub model: GgpmModel,
    pub hypers: Vec<f64>,
    /// Target-engine inference at `hypers`, from a cold start.
    pub result: InferenceResult,
    /// Target-engine candidates.
    pub optima: Vec<Optimum>,
    pub selected: usize,
    /// Taylor-stage runs of the taylor_init strategy.
    pub taylor_stage: Vec<Optimum>,
    /// Optimizer iterations spent in the target engine.
    pub target_iterations: usize,
    pub taylor_iterations: usize,
    /// Target-engine evaluations that failed or did not converge.
    pub engine_failures: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

/// Converged, or stopped by the line search with a small gradient.
fn settled(status: MinimizeStatus, gnorm: f64, gtol: f64) -> bool {
    matches!(status, MinimizeStatus::GradientTolerance | MinimizeStatus::FunctionTolerance)
        || gnorm < gtol
        || (status == MinimizeStatus::LineSearchFailure && gnorm < 1e-3)
}

fn run_engine(
    engine: &Engine,
    model: &GgpmModel,
    hypers: &[f64],
    warm: &mut Option<EngineState>,
) -> Result<InferenceResult> {
    let (lik, kernel) = apply_hypers(&model.lik, &model.kernel, hypers)?;
    let (x, y) = (model.x(), model.y());
    let r = match (engine, warm.as_ref()) {
        (Engine::Ep(o), Some(EngineState::Ep(s))) => {
            ep_infer_from(&lik, &kernel, x, y, o, Some(s)).or_else(|_| infer(engine, &lik, &kernel, x, y))?
        }
        (Engine::Kld(o), Some(EngineState::Kld(p))) => {
            kld_infer_from(&lik, &kernel, x, y, o, Some(p)).or_else(|_| infer(engine, &lik, &kernel, x, y))?
        }
        _ => infer(engine, &lik, &kernel, x, y)?,
    };
    *warm = Some(r.state.clone());
    Ok(r)
}

fn optimize(model: &GgpmModel, engine: &Engine, start: &[f64], opts: &MinimizeOptions) -> Optimum {
    if let Engine::Kld(k) = engine {
        return optimize_kld_joint(model, k, start, opts);
    }
    let warm = RefCell::new(None);
    let failures = RefCell::new(0usize);
    let last_err = RefCell::new(None::<String>);
    let objective = |h: &[f64]| -> Result<(f64, Vec<f64>)> {
        // points outside the hyperparameter domain are rejected, not failures
        if let Err(e) = apply_hypers(&model.lik, &model.kernel, h) {
            *last_err.borrow_mut() = Some(e.to_string());
            return Err(e);
        }
        match run_engine(engine, model, h, &mut warm.borrow_mut()) {
            Ok(r) => {
                if !r.diagnostics.converged {
                    *failures.borrow_mut() += 1;
                }
                Ok((-r.log_marginal, r.grad.iter().map(|g| -g).collect()))
            }
            Err(e) => {
                *failures.borrow_mut() += 1;
                *last_err.borrow_mut() = Some(e.to_string());
                Err(e)
            }
        }
    };
    let Some(m) = minimize(objective, start, opts) else {
        let msg = last_err.into_inner().unwrap_or_else(|| "objective unusable at the start".into());
        return Optimum::failed(engine.id(), start, msg);
    };
    let gnorm = inf_norm(&m.grad);
    Optimum {
        engine: engine.id(),
        start: start.to_vec(),
        hypers: m.x.clone(),
        log_marginal: -m.value,
        grad_norm: gnorm,
        iterations: m.iterations,
        evaluations: m.evaluations,
        converged: settled(m.status, gnorm, opts.gtol),
        engine_failures: failures.into_inner(),
        error: None,
        trace: m.trace.iter().map(|v| -v).collect(),
    }
}

/// KLD fitting maximizes the bound jointly over the hyperparameters and
/// the variational coordinates.
fn optimize_kld_joint(model: &GgpmModel, kopts: &KldOptions, start: &[f64], opts: &MinimizeOptions) -> Optimum {
    let fail = |e: GgpmError| Optimum::failed(EngineId::Kld, start, e.to_string());
    let (x, y) = (model.x(), model.y());
    let nh = start.len();
    let init = (|| -> Result<Vec<f64>> {
        let (lik, kernel) = apply_hypers(&model.lik, &model.kernel, start)?;
        let r = kld_infer_from(&lik, &kernel, x, y, kopts, None)?;
        let EngineState::Kld(p) = r.state else {
            return Err(GgpmError::Convergence("KLD state missing".into()));
        };
        let l = PsdFactor::new(&kernel.gram(x), 1e-10)?.l();
        let beta = l.transpose() * &p.gamma;
        let mut x0 = start.to_vec();
        x0.extend(beta.iter());
        x0.extend(p.lambda.iter().map(|v| v.max(1e-300).ln()));
        Ok(x0)
    })();
    let x0 = match init {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = kld_joint_objective(&model.lik, &model.kernel, x, y, p, kopts.gh_order)?;
        Ok((-v, g.iter().map(|d| -d).collect()))
    };
    let jopts = MinimizeOptions { max_iter: opts.max_iter * 10, ..*opts };
    let Some(m) = minimize(objective, &x0, &jopts) else {
        return fail(GgpmError::Convergence("KLD joint objective unusable at the start".into()));
    };
    // finish the inner problem at the final hyperparameters
    let hypers = m.x[..nh].to_vec();
    let n = y.len();
    let polished = (|| -> Result<InferenceResult> {
        let (lik, kernel) = apply_hypers(&model.lik, &model.kernel, &hypers)?;
        let l = PsdFactor::new(&kernel.gram(x), 1e-10)?.l();
        let beta = DVector::from_column_slice(&m.x[nh..nh + n]);
        let gamma = l.transpose().solve_upper_triangular(&beta).unwrap_or_else(|| DVector::zeros(n));
        let lambda = DVector::from_iterator(n, m.x[nh + n..].iter().map(|r| r.exp()));
        let p = crate::inference::VariationalParams { gamma, lambda };
        kld_infer_from(&lik, &kernel, x, y, kopts, Some(&p))
    })();
    match polished {
        Ok(r) => {
            let gnorm = inf_norm(&r.grad);
            Optimum {
                engine: EngineId::Kld,
                start: start.to_vec(),
                hypers,
                log_marginal: r.log_marginal,
                grad_norm: gnorm,
                iterations: m.iterations,
                evaluations: m.evaluations,
                converged: settled(m.status, inf_norm(&m.grad), opts.gtol) || gnorm < opts.gtol,
                engine_failures: usize::from(!r.diagnostics.converged),
                error: None,
                trace: m.trace.iter().map(|v| -v).collect(),
            }
        }
        Err(e) => fail(e),
    }
}

fn random_starts(model: &GgpmModel, count: usize, opts: &FitOptions) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dim = model.kernel.n_params() + 1;
    let fixed_phi = (!model.lik.has_free_dispersion()).then(|| model.lik.dispersion().ln());
    (0..count)
        .map(|_| {
            let mut s: Vec<f64> = (0..dim).map(|_| rng.random_range(opts.start_low..=opts.start_high)).collect();
            if let Some(lp) = fixed_phi {
                s[dim - 1] = lp;
            }
            s
        })
        .collect()
}

fn run_all(model: &GgpmModel, engine: &Engine, starts: &[Vec<f64>], opts: &FitOptions) -> Vec<Optimum> {
    if opts.parallel {
        starts.par_iter().map(|s| optimize(model, engine, s, &opts.optimizer)).collect()
    } else {
        starts.iter().map(|s| optimize(model, engine, s, &opts.optimizer)).collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Log-marginal agreement under which two optima joined by a flat segment
/// count as one.
const RIDGE_TOL: f64 = 1e-3;

/// Indices of up to `k` distinct optima, best first. Converged runs are
/// preferred; unconverged successes fill in only when none converged. Two
/// optima are the same when closer than `tol`, or when `same_ridge` says
/// they lie on one flat ridge.
fn top_unique(optima: &[Optimum], k: usize, tol: f64, same_ridge: impl Fn(&Optimum, &Optimum) -> bool) -> Vec<usize> {
    let any_converged = optima.iter().any(|o| o.succeeded() && o.converged);
    let mut idx: Vec<usize> =
        (0..optima.len()).filter(|&i| optima[i].succeeded() && (optima[i].converged || !any_converged)).collect();
    idx.sort_by(|&a, &b| optima[b].log_marginal.total_cmp(&optima[a].log_marginal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in idx {
        if kept.len() == k {
            break;
        }
        let distinct =
            |j: usize| distance(&optima[i].hypers, &optima[j].hypers) >= tol && !same_ridge(&optima[i], &optima[j]);
        if kept.iter().all(|&j| distinct(j)) {
            kept.push(i);
        }
    }
    kept
}

/// Equal log marginals at both optima and at their midpoint.
fn on_ridge(model: &GgpmModel, engine: &Engine, a: &Optimum, b: &Optimum) -> bool {
    if (a.log_marginal - b.log_marginal).abs() > RIDGE_TOL {
        return false;
    }
    let mid: Vec<f64> = a.hypers.iter().zip(&b.hypers).map(|(x, y)| 0.5 * (x + y)).collect();
    let Ok((lik, kernel)) = apply_hypers(&model.lik, &model.kernel, &mid) else {
        return false;
    };
    match infer(engine, &lik, &kernel, &model.x, &model.y) {
        Ok(r) => {
            (r.log_marginal - a.log_marginal).abs() <= RIDGE_TOL && (r.log_marginal - b.log_marginal).abs() <= RIDGE_TOL
        }
        Err(_) => false,
    }
}

/// Taylor engine used by the taylor_init stage.
fn stage_engine(model: &GgpmModel) -> Engine {
    match &model.engine {
        Engine::Taylor { .. } => model.engine.clone(),
        _ => Engine::Taylor { expansion: ExpansionRule::Canonical },
    }
}

/// Indices of the Taylor-stage optima that seed the target engine.
fn stage_picks(model: &GgpmModel, stage: &[Optimum], top_k: usize, opts: &FitOptions) -> Vec<usize> {
    let taylor = stage_engine(model);
    top_unique(stage, top_k, opts.dedupe_tol, |a, b| on_ridge(model, &taylor, a, b))
}

fn select(optima: &[Optimum]) -> Option<usize> {
    let any_converged = optima.iter().any(|o| o.succeeded() && o.converged);
    (0..optima.len()).filter(|&i| optima[i].succeeded() && (optima[i].converged || !any_converged)).fold(
        None,
        |best: Option<usize>, i| match best {
            Some(b) if optima[b].log_marginal >= optima[i].log_marginal => Some(b),
            _ => Some(i),
        },
    )
}

/// Taylor-engine fits from random starts and the hyperparameters of the
/// best `top_k` distinct optima (best first). When no Taylor fit succeeds
/// the first `top_k` raw starts are returned instead.
pub fn taylor_candidates(
    model: &GgpmModel,
    n_random: usize,
    top_k: usize,
    opts: &FitOptions,
) -> (Vec<Optimum>, Vec<Vec<f64>>) {
    let starts = random_starts(model, n_random, opts);
    let stage = run_all(model, &stage_engine(model), &starts, opts);
    let picked = stage_picks(model, &stage, top_k, opts);
    let seeds = if picked.is_empty() {
        starts.into_iter().take(top_k).collect()
    } else {
        picked.iter().map(|&i| stage[i].hypers.clone()).collect()
    };
    (stage, seeds)
}

/// Target-engine fits from the given starting hyperparameters.
pub fn fit_from_starts(model: &GgpmModel, starts: &[Vec<f64>], opts: &FitOptions) -> Result<FitResult> {
    let optima = run_all(model, &model.engine, starts, opts);
    assemble(model, optima, Vec::new())
}

fn assemble(model: &GgpmModel, optima: Vec<Optimum>, taylor_stage: Vec<Optimum>) -> Result<FitResult> {
    let attempted = optima.len().max(taylor_stage.len());
    let selected = select(&optima).ok_or(GgpmError::AllStartsFailed(attempted))?;
    let hypers = optima[selected].hypers.clone();
    let fitted = model.with_hypers(&hypers)?;
    let result = fitted.infer()?;
    let taylor_iterations = taylor_stage.iter().map(|o| o.iterations).sum::<usize>();
    let target_iterations = if model.engine.id() == EngineId::Taylor && !taylor_stage.is_empty() {
        taylor_iterations
    } else {
        optima.iter().map(|o| o.iterations).sum()
    };
    let engine_failures = optima.iter().map(|o| o.engine_failures).sum();
    Ok(FitResult {
        model: fitted,
        hypers,
        result,
        optima,
        selected,
        taylor_stage,
        target_iterations,
        taylor_iterations,
        engine_failures,
    })
}

/// Fits the log-hyperparameters by maximizing the model engine's
/// approximate log marginal likelihood.
pub fn fit(model: &GgpmModel, opts: &FitOptions) -> Result<FitResult> {
    match &opts.strategy {
        FitStrategy::Single => {
            assemble(model, vec![optimize(model, &model.engine, &model.hypers(), &opts.optimizer)], Vec::new())
        }
        FitStrategy::RandomMultistart { n_starts } => {
            fit_from_starts(model, &random_starts(model, *n_starts, opts), opts)
        }
        FitStrategy::TaylorInit { n_random, top_k } => {
            let (stage, seeds) = taylor_candidates(model, *n_random, *top_k, opts);
            let optima = if model.engine.id() == EngineId::Taylor {
                stage_picks(model, &stage, *top_k, opts).iter().map(|&i| stage[i].clone()).collect()
            } else {
                run_all(model, &model.engine, &seeds, opts)
            };
            assemble(model, optima, stage)
        }
    }
}
