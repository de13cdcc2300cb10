//! Versioned TOML run configuration.

use std::ops::Range;

use ggpm::efd::{LikelihoodFamily, Link, CATALOG};
use ggpm::inference::{Engine, EngineId, EpOptions, ExpansionRule, KldOptions, LaplaceOptions};
use ggpm::kernels::{KernelSpec, DEFAULT_JITTER};
use ggpm::model::{FitOptions, FitStrategy};
use ggpm::numerics::MinimizeOptions;
use serde::Deserialize;
use toml::Spanned;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
/// Count offset used for Taylor expansion points when the config omits it.
pub const DEFAULT_COUNT_OFFSET: f64 = 0.5;
/// Clamp margin for Beta outputs when `clamp_unit` is on.
pub const UNIT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub version: Spanned<u32>,
    pub seed: u64,
    pub likelihood: LikelihoodBlock,
    #[serde(default)]
    pub kernel: KernelBlock,
    #[serde(default)]
    pub engine: EngineBlock,
    #[serde(default)]
    pub fit: FitBlock,
    #[serde(default)]
    pub numerics: NumericsBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodBlock {
    pub id: Spanned<String>,
    #[serde(default = "one")]
    pub dispersion: Spanned<f64>,
    #[serde(default = "one_u32")]
    pub trials: Spanned<u32>,
    pub link: Option<Spanned<String>>,
    #[serde(default = "default_offset")]
    pub count_offset: Spanned<f64>,
    #[serde(default)]
    pub clamp_unit: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    #[serde(default = "default_kind")]
    pub kind: Spanned<String>,
    #[serde(default)]
    pub log_scale: f64,
    #[serde(default)]
    pub log_bandwidth: f64,
    #[serde(default)]
    pub linear_log_scale: f64,
    #[serde(default = "default_jitter")]
    pub jitter: Spanned<f64>,
}

impl Default for KernelBlock {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            log_scale: 0.0,
            log_bandwidth: 0.0,
            linear_log_scale: 0.0,
            jitter: default_jitter(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineBlock {
    #[serde(default = "default_engine")]
    pub id: Spanned<String>,
    #[serde(default = "default_expansion")]
    pub expansion: Spanned<String>,
}

impl Default for EngineBlock {
    fn default() -> Self {
        Self { id: default_engine(), expansion: default_expansion() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    #[serde(default = "default_strategy")]
    pub strategy: Spanned<String>,
    #[serde(default = "default_n_random")]
    pub n_random: Spanned<usize>,
    #[serde(default = "default_top_k")]
    pub top_k: Spanned<usize>,
    #[serde(default = "default_n_random")]
    pub n_starts: Spanned<usize>,
    #[serde(default = "default_low")]
    pub start_low: f64,
    #[serde(default = "default_high")]
    pub start_high: f64,
    #[serde(default = "default_dedupe")]
    pub dedupe_tol: f64,
    #[serde(default = "default_gtol")]
    pub gtol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_ftol")]
    pub ftol: f64,
    #[serde(default = "yes")]
    pub parallel: bool,
}

impl Default for FitBlock {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            n_random: default_n_random(),
            top_k: default_top_k(),
            n_starts: default_n_random(),
            start_low: default_low(),
            start_high: default_high(),
            dedupe_tol: default_dedupe(),
            gtol: default_gtol(),
            max_iter: default_max_iter(),
            ftol: default_ftol(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsBlock {
    #[serde(default = "default_gh")]
    pub gh_order: Spanned<usize>,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
    #[serde(default = "default_sweeps")]
    pub ep_max_sweeps: usize,
    #[serde(default = "default_ep_tol")]
    pub ep_tol: f64,
    #[serde(default = "default_damping")]
    pub ep_damping: Spanned<f64>,
    #[serde(default = "default_laplace_iter")]
    pub laplace_max_iter: usize,
    #[serde(default = "default_inner_tol")]
    pub laplace_tol: f64,
    #[serde(default = "default_kld_iter")]
    pub kld_max_iter: usize,
    #[serde(default = "default_inner_tol")]
    pub kld_gtol: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    pub gradcheck_tol: Option<f64>,
}

impl Default for NumericsBlock {
    fn default() -> Self {
        Self {
            gh_order: default_gh(),
            quad_tol: default_quad_tol(),
            ep_max_sweeps: default_sweeps(),
            ep_tol: default_ep_tol(),
            ep_damping: default_damping(),
            laplace_max_iter: default_laplace_iter(),
            laplace_tol: default_inner_tol(),
            kld_max_iter: default_kld_iter(),
            kld_gtol: default_inner_tol(),
            fd_step: default_fd_step(),
            gradcheck_tol: None,
        }
    }
}

fn spanned<T>(v: T) -> Spanned<T> {
    Spanned::new(0..0, v)
}
fn one() -> Spanned<f64> {
    spanned(1.0)
}
fn one_u32() -> Spanned<u32> {
    spanned(1)
}
fn yes() -> bool {
    true
}
fn default_offset() -> Spanned<f64> {
    spanned(DEFAULT_COUNT_OFFSET)
}
fn default_kind() -> Spanned<String> {
    spanned("rbf".into())
}
fn default_jitter() -> Spanned<f64> {
    spanned(DEFAULT_JITTER)
}
fn default_engine() -> Spanned<String> {
    spanned("ep".into())
}
fn default_expansion() -> Spanned<String> {
    spanned("canonical".into())
}
fn default_strategy() -> Spanned<String> {
    spanned("taylor_init".into())
}
fn default_n_random() -> Spanned<usize> {
    spanned(50)
}
fn default_top_k() -> Spanned<usize> {
    spanned(3)
}
fn default_low() -> f64 {
    -3.0
}
fn default_high() -> f64 {
    3.0
}
fn default_dedupe() -> f64 {
    0.05
}
fn default_gtol() -> f64 {
    1e-5
}
fn default_max_iter() -> usize {
    200
}
fn default_ftol() -> f64 {
    1e-10
}
fn default_gh() -> Spanned<usize> {
    spanned(KldOptions::default().gh_order)
}
fn default_quad_tol() -> f64 {
    EpOptions::default().quad_tol
}
fn default_sweeps() -> usize {
    EpOptions::default().max_sweeps
}
fn default_ep_tol() -> f64 {
    EpOptions::default().tol
}
fn default_damping() -> Spanned<f64> {
    spanned(EpOptions::default().damping)
}
fn default_laplace_iter() -> usize {
    LaplaceOptions::default().max_iter
}
fn default_inner_tol() -> f64 {
    1e-8
}
fn default_kld_iter() -> usize {
    KldOptions::default().max_iter
}
fn default_fd_step() -> f64 {
    1e-4
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub likelihood_id: String,
    pub lik: LikelihoodFamily,
    pub clamp_unit: bool,
    pub kernel: KernelSpec,
    pub engine: Engine,
    pub fit: FitOptions,
    pub seed: u64,
    pub fd_step: f64,
    pub gradcheck_tol: Option<f64>,
    raw: RawConfig,
}

/// 1-based line of a byte offset.
fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

struct Checker<'a> {
    path: &'a str,
    text: &'a str,
}

impl Checker<'_> {
    fn fail<T>(&self, span: Range<usize>, msg: impl std::fmt::Display) -> Result<T, CliError> {
        if span.is_empty() && span.start == 0 {
            Err(CliError::Validation(format!("{}: {msg}", self.path)))
        } else {
            Err(CliError::Validation(format!("{}:{}: {msg}", self.path, line_of(self.text, span))))
        }
    }
}

fn engine_from(id: EngineId, expansion: ExpansionRule, n: &NumericsBlock) -> Engine {
    match id {
        EngineId::Taylor => Engine::Taylor { expansion },
        EngineId::Laplace => Engine::Laplace(LaplaceOptions { max_iter: n.laplace_max_iter, tol: n.laplace_tol }),
        EngineId::Ep => Engine::Ep(EpOptions {
            max_sweeps: n.ep_max_sweeps,
            tol: n.ep_tol,
            damping: *n.ep_damping.get_ref(),
            quad_tol: n.quad_tol,
        }),
        EngineId::Kld => {
            Engine::Kld(KldOptions { gh_order: *n.gh_order.get_ref(), max_iter: n.kld_max_iter, gtol: n.kld_gtol })
        }
    }
}

impl RunConfig {
    /// Parses and validates; `path` is used in error messages only.
    pub fn parse(text: &str, path: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| format!(":{}", line_of(text, s))).unwrap_or_default();
            CliError::Validation(format!("{path}{line}: {}", e.message()))
        })?;
        let c = Checker { path, text };
        if *raw.version.get_ref() != CONFIG_VERSION {
            return c.fail(
                raw.version.span(),
                format!("unsupported config version {} (expected {CONFIG_VERSION})", raw.version.get_ref()),
            );
        }

        let lb = &raw.likelihood;
        let id = lb.id.get_ref().as_str();
        if !CATALOG.contains(&id) {
            return c.fail(lb.id.span(), format!("unknown likelihood '{id}' (known: {})", CATALOG.join(", ")));
        }
        let mut lik = match LikelihoodFamily::from_id(id, *lb.dispersion.get_ref(), *lb.trials.get_ref()) {
            Ok(l) => l,
            Err(e) => {
                let span = if *lb.trials.get_ref() == 0 { lb.trials.span() } else { lb.dispersion.span() };
                return c.fail(span, e);
            }
        };
        if let Some(link) = &lb.link {
            let parsed = Link::from_name(link.get_ref()).or_else(|e| c.fail(link.span(), e))?;
            lik = lik.with_link(parsed).or_else(|e| c.fail(link.span(), e))?;
        }
        lik = lik.with_count_offset(*lb.count_offset.get_ref()).or_else(|e| c.fail(lb.count_offset.span(), e))?;

        let kb = &raw.kernel;
        let jitter = *kb.jitter.get_ref();
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return c.fail(kb.jitter.span(), format!("jitter {jitter} must be non-negative"));
        }
        for (name, v) in [
            ("log_scale", kb.log_scale),
            ("log_bandwidth", kb.log_bandwidth),
            ("linear_log_scale", kb.linear_log_scale),
        ] {
            if !v.is_finite() {
                return c.fail(kb.kind.span(), format!("kernel {name} must be finite"));
            }
        }
        let rbf = || KernelSpec::rbf(kb.log_scale.exp(), kb.log_bandwidth.exp());
        let linear = || KernelSpec::linear(kb.linear_log_scale.exp());
        let kernel = match kb.kind.get_ref().as_str() {
            "rbf" => rbf(),
            "linear" => linear(),
            "linear+rbf" => KernelSpec::sum(vec![linear(), rbf()]),
            other => {
                return c
                    .fail(kb.kind.span(), format!("unknown kernel kind '{other}' (known: rbf, linear, linear+rbf)"))
            }
        }
        .with_jitter(jitter);

        let nb = &raw.numerics;
        if *nb.gh_order.get_ref() < 2 {
            return c.fail(nb.gh_order.span(), "gh_order must be at least 2");
        }
        let damping = *nb.ep_damping.get_ref();
        if !(damping > 0.0 && damping <= 1.0) {
            return c.fail(nb.ep_damping.span(), format!("ep_damping {damping} must lie in (0, 1]"));
        }
        let eb = &raw.engine;
        let engine_id = EngineId::from_name(eb.id.get_ref()).or_else(|e| c.fail(eb.id.span(), e))?;
        let expansion = match eb.expansion.get_ref().as_str() {
            "canonical" => ExpansionRule::Canonical,
            "agnostic" => ExpansionRule::Agnostic,
            other => {
                return c.fail(eb.expansion.span(), format!("unknown expansion '{other}' (known: canonical, agnostic)"))
            }
        };
        let engine = engine_from(engine_id, expansion, nb);

        let fb = &raw.fit;
        let strategy = match fb.strategy.get_ref().as_str() {
            "taylor_init" => {
                if *fb.n_random.get_ref() == 0 {
                    return c.fail(fb.n_random.span(), "n_random must be positive");
                }
                if *fb.top_k.get_ref() == 0 {
                    return c.fail(fb.top_k.span(), "top_k must be positive");
                }
                FitStrategy::TaylorInit { n_random: *fb.n_random.get_ref(), top_k: *fb.top_k.get_ref() }
            }
            "random_multistart" => {
                if *fb.n_starts.get_ref() == 0 {
                    return c.fail(fb.n_starts.span(), "n_starts must be positive");
                }
                FitStrategy::RandomMultistart { n_starts: *fb.n_starts.get_ref() }
            }
            "single" => FitStrategy::Single,
            other => {
                return c.fail(
                    fb.strategy.span(),
                    format!("unknown fit strategy '{other}' (known: taylor_init, random_multistart, single)"),
                )
            }
        };
        if !(fb.start_low < fb.start_high) {
            return c.fail(fb.strategy.span(), "start_low must be below start_high");
        }
        let fit = FitOptions {
            strategy,
            seed: raw.seed,
            start_low: fb.start_low,
            start_high: fb.start_high,
            dedupe_tol: fb.dedupe_tol,
            optimizer: MinimizeOptions {
                gtol: fb.gtol,
                max_iter: fb.max_iter,
                ftol: fb.ftol,
                ..MinimizeOptions::default()
            },
            parallel: fb.parallel,
        };
        Ok(Self {
            likelihood_id: id.to_string(),
            lik,
            clamp_unit: lb.clamp_unit,
            kernel,
            engine,
            fit,
            seed: raw.seed,
            fd_step: nb.fd_step,
            gradcheck_tol: nb.gradcheck_tol,
            raw,
        })
    }

    pub fn load(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
        Self::parse(&text, path)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fit.seed = seed;
        self
    }

    /// Engine `id` with the configured expansion rule and numerics.
    pub fn engine_for(&self, id: EngineId) -> Engine {
        let expansion = match &self.engine {
            Engine::Taylor { expansion } => *expansion,
            _ => match self.raw.engine.expansion.get_ref().as_str() {
                "agnostic" => ExpansionRule::Agnostic,
                _ => ExpansionRule::Canonical,
            },
        };
        engine_from(id, expansion, &self.raw.numerics)
    }
}
