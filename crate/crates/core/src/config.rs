//! Flat `key = value` run configuration with dotted section keys.
//!
//! ```text
//! # scalar benchmark
//! model.name = scalar_linear
//! model.a = 1
//! model.k = 0.4
//! model.c = 0.3
//! mu = 0.3
//! epsilon = 0.01
//! experiment = manifold
//! ```
//!
//! Lists are comma separated (`epsilons = 0.1, 0.05`). `#` starts a comment.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{
    make_parabolic_hyperbolic, make_parabolic_ode, make_scalar_linear, make_wave_wave, validate_model, Common,
    CouplingParams, ModelSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Manifold,
    Tracking,
    Critical,
    Reduction,
    Scaling,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Manifold => "manifold",
            ExperimentKind::Tracking => "tracking",
            ExperimentKind::Critical => "critical",
            ExperimentKind::Reduction => "reduction",
            ExperimentKind::Scaling => "scaling",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "manifold" => Ok(ExperimentKind::Manifold),
            "tracking" => Ok(ExperimentKind::Tracking),
            "critical" => Ok(ExperimentKind::Critical),
            "reduction" => Ok(ExperimentKind::Reduction),
            "scaling" => Ok(ExperimentKind::Scaling),
            _ => Err(format!(
                "unknown experiment `{s}` (expected manifold, tracking, critical, reduction or scaling)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub a: f64,
    pub k: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub n_modes: usize,
    pub m_slow: usize,
    pub coupling: CouplingParams,
    pub cutoff_radius: Option<f64>,
}

/// Explicit noise grid in original time; derived from the solver windows when absent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridConfig {
    pub t_minus: Option<f64>,
    pub t_plus: Option<f64>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub mu: f64,
    pub epsilon: f64,
    /// Sweep values for `critical`, scales for `scaling`.
    pub epsilons: Vec<f64>,
    pub sigma: f64,
    pub noise_modes: usize,
    pub grid: GridConfig,
    pub tol: f64,
    pub max_iters: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub experiment: ExperimentKind,
    pub out: Option<PathBuf>,
    /// Initial values per seed.
    pub samples: usize,
    /// Radius of the ball the initial values are drawn from.
    pub sample_radius: f64,
    /// Tracking window; `20 eps` when absent.
    pub tracking_horizon: Option<f64>,
    pub reduction_t_plus: f64,
    pub scaling_samples: usize,
}

const KEYS: &[&str] = &[
    "model.name",
    "model.a",
    "model.k",
    "model.c",
    "model.alpha",
    "model.beta",
    "model.nu",
    "model.n_modes",
    "model.m_slow",
    "model.f_u",
    "model.f_s",
    "model.g_u",
    "model.g_s",
    "model.cutoff_radius",
    "mu",
    "epsilon",
    "epsilons",
    "sigma",
    "noise.modes",
    "grid.t_minus",
    "grid.t_plus",
    "grid.dt",
    "solver.tol",
    "solver.max_iters",
    "seeds.count",
    "seeds.base",
    "experiment",
    "output.dir",
    "samples.count",
    "samples.radius",
    "tracking.horizon",
    "reduction.t_plus",
    "scaling.samples",
];

struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                key: body.to_string(),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config {
                    line,
                    key,
                    message: "unknown key".into(),
                });
            }
            if let Some((first, _)) = map.get(&key) {
                return Err(Error::Config {
                    line,
                    key,
                    message: format!("duplicate key (first set on line {first})"),
                });
            }
            map.insert(key, (line, value.trim().to_string()));
        }
        Ok(Entries(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                line: *line,
                key: key.into(),
                message: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| Error::Config {
                        line: *line,
                        key: key.into(),
                        message: format!("cannot parse `{}`: {e}", s.trim()),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }
}

/// Parses the config text. Missing keys take defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let e = Entries::parse(text)?;
    let model = ModelConfig {
        name: e.or("model.name", "scalar_linear".to_string())?,
        a: e.or("model.a", 1.0)?,
        k: e.or("model.k", 0.4)?,
        c: e.or("model.c", 0.3)?,
        alpha: e.or("model.alpha", 2.0)?,
        beta: e.or("model.beta", 1.0)?,
        nu: e.or("model.nu", 0.5)?,
        n_modes: e.or("model.n_modes", 4)?,
        m_slow: e.or("model.m_slow", 1)?,
        coupling: CouplingParams {
            f_u: e.or("model.f_u", 0.0)?,
            f_s: e.or("model.f_s", 0.0)?,
            g_u: e.or("model.g_u", 0.0)?,
            g_s: e.or("model.g_s", 0.0)?,
        },
        cutoff_radius: e.get("model.cutoff_radius")?,
    };
    let experiment = e.or("experiment", ExperimentKind::Manifold)?;
    let default_eps = match experiment {
        ExperimentKind::Scaling => vec![1.0, 0.1, 0.01],
        _ => vec![0.1, 0.05, 0.025, 0.0125],
    };
    Ok(ExperimentConfig {
        model,
        mu: e.or("mu", 0.5)?,
        epsilon: e.or("epsilon", 0.1)?,
        epsilons: e.list("epsilons")?.unwrap_or(default_eps),
        sigma: e.or("sigma", 0.0)?,
        noise_modes: e.or("noise.modes", 0)?,
        grid: GridConfig {
            t_minus: e.get("grid.t_minus")?,
            t_plus: e.get("grid.t_plus")?,
            dt: e.get("grid.dt")?,
        },
        tol: e.or("solver.tol", 1e-10)?,
        max_iters: e.or("solver.max_iters", 500)?,
        seeds: e.or("seeds.count", 1)?,
        base_seed: e.or("seeds.base", 0)?,
        experiment,
        out: e.get::<String>("output.dir")?.map(PathBuf::from),
        samples: e.or("samples.count", 8)?,
        sample_radius: e.or("samples.radius", 1.0)?,
        tracking_horizon: e.get("tracking.horizon")?,
        reduction_t_plus: e.or("reduction.t_plus", 2.0)?,
        scaling_samples: e.or("scaling.samples", 20_000)?,
    })
}

impl ExperimentConfig {
    pub fn common(&self) -> Common {
        Common {
            mu: self.mu,
            epsilon: self.epsilon,
            sigma: self.sigma,
            noise_modes: self.noise_modes,
        }
    }

    /// Builds the configured model at `epsilon` (cutoff included).
    pub fn build_model_at(&self, epsilon: f64) -> Result<ModelSpec> {
        let m = &self.model;
        let common = Common {
            epsilon,
            ..self.common()
        };
        let spec = match m.name.as_str() {
            "scalar_linear" => make_scalar_linear(m.a, m.k, m.c, common)?,
            "parabolic_hyperbolic" => make_parabolic_hyperbolic(m.alpha, m.beta, m.n_modes, m.coupling, common)?,
            "parabolic_ode" => make_parabolic_ode(m.n_modes, m.m_slow, m.coupling, common)?,
            "wave_wave" => make_wave_wave(m.nu, m.beta, m.n_modes, m.coupling, common)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model `{other}` (expected scalar_linear, parabolic_hyperbolic, parabolic_ode or wave_wave)"
                )))
            }
        };
        match m.cutoff_radius {
            Some(r) => spec.with_cutoff(r),
            None => Ok(spec),
        }
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        self.build_model_at(self.epsilon)
    }

    pub fn horizon(&self) -> f64 {
        self.tracking_horizon.unwrap_or(20.0 * self.epsilon)
    }
}

/// Every violated gate; empty iff the run may start.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    let positive = [
        ("solver.tol", cfg.tol),
        ("samples.radius", cfg.sample_radius),
        ("reduction.t_plus", cfg.reduction_t_plus),
        ("sigma + 1", cfg.sigma + 1.0),
    ];
    for (k, v) in positive {
        if !(v > 0.0) {
            out.push(format!("{k} must be positive (got {v})"));
        }
    }
    if cfg.seeds == 0 {
        out.push("seeds.count must be at least 1".into());
    }
    if cfg.samples == 0 {
        out.push("samples.count must be at least 1".into());
    }
    if let Some(h) = cfg.tracking_horizon {
        if !(h > 0.0) {
            out.push(format!("tracking.horizon must be positive (got {h})"));
        }
    }
    if cfg.sigma > 0.0 && cfg.noise_modes == 0 {
        out.push("sigma > 0 needs noise.modes ≥ 1".into());
    }
    let sweep = matches!(cfg.experiment, ExperimentKind::Critical | ExperimentKind::Scaling);
    if sweep {
        if cfg.epsilons.is_empty() || cfg.epsilons.iter().any(|e| !(*e > 0.0)) {
            out.push("epsilons must be positive".into());
        } else if cfg.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            out.push("epsilons must be strictly decreasing".into());
        }
    }
    if cfg.experiment == ExperimentKind::Scaling {
        if !(cfg.sigma > 0.0) {
            out.push("scaling experiment needs sigma > 0".into());
        }
        if cfg.scaling_samples < 100 {
            out.push("scaling.samples must be at least 100".into());
        }
    }
    if !out.is_empty() {
        return out;
    }

    let model = match cfg.build_model() {
        Ok(m) => m,
        Err(Error::Assumption(msg)) => return vec![msg],
        Err(e) => return vec![e.to_string()],
    };
    out.extend(validate_model(&model.system));
    if cfg.noise_modes > model.system.fast.n_modes() {
        out.push(format!(
            "noise.modes = {} exceeds {} fast modes",
            cfg.noise_modes,
            model.system.fast.n_modes()
        ));
    }
    if !out.is_empty() {
        return out;
    }
    match cfg.experiment {
        ExperimentKind::Tracking | ExperimentKind::Reduction => {
            if let Err(e) = model.system.weights().rho_factor() {
                out.push(format!("tracking contraction: {e}"));
            }
        }
        ExperimentKind::Critical => {
            if fast_part_depends_on_eps(&cfg.model.name) {
                out.push(format!(
                    "the {} fast generator depends on ε, so the critical sweep is not defined for it",
                    cfg.model.name
                ));
                return out;
            }
            for &eps in &cfg.epsilons {
                match cfg.build_model_at(eps) {
                    Ok(m) => out.extend(m.system.weights().violations().into_iter().map(|v| format!("at ε = {eps}: {v}"))),
                    Err(e) => out.push(format!("at ε = {eps}: {e}")),
                }
            }
            if let Err(e) = model.system.weights().limit_contraction() {
                out.push(format!("critical manifold: {e}"));
            }
        }
        _ => {}
    }
    if let Some(dt) = cfg.grid.dt {
        if dt > cfg.epsilon / 10.0 * (1.0 + 1e-9) {
            out.push(format!("grid.dt = {dt} does not resolve the fast scale; use grid.dt ≤ {}", cfg.epsilon / 10.0));
            return out;
        }
    }
    if let Err(msg) = crate::experiment::plan_grid(cfg, &model.system) {
        out.push(msg);
    }
    out
}

fn fast_part_depends_on_eps(name: &str) -> bool {
    name == "wave_wave"
}

/// Assumption a gate message belongs to, for diagnostics.
pub fn assumption_label(message: &str) -> Option<&'static str> {
    if message.contains("(A1)") || message.contains("(A2)") || message.contains("(A3)") {
        None
    } else if message.contains("γ₁−μ > K") || message.contains("κ < 1") || message.contains("contraction") {
        Some("(A3)")
    } else if message.contains("μ−εγ₂") {
        Some("(A1)")
    } else {
        None
    }
}
