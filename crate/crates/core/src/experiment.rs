//! Experiment drivers behind the command line.
//!
//! Each run computes everything in memory and returns the files to write, so
//! a failed run leaves no partial output behind.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::critical::{epsilon_sweep, s_bound, s_grid_max, solve_critical_manifold, EpsilonSweep};
use crate::error::{Error, Result};
use crate::integrate::{fitted_decay_exponent, integrate_full, integrate_reduced, invariance_residual, Scheme, Trajectory};
use crate::lyapunov_perron::{
    backward_grid, backward_window, default_step, empirical_lipschitz, evaluate_manifold, sample_manifold_graph,
    ManifoldGraph, Scaling, SolveOptions,
};
use crate::models::{benchmark_slope, exit_time, ModelSpec};
use crate::noise::{check_ou_scaling, NoisePath, OuScalingReport, TimeGrid};
use crate::spectral::StateVector;
use crate::stats::linear_fit;
use crate::system::SystemSpec;
use crate::tracking::{solve_tracking_point, tracking_window, verify_tracking, TrackingOptions, TrackingReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass: value >= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

/// Everything a run produces; nothing is on disk yet.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: ExperimentKind,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub summary: Value,
}

impl RunOutput {
    /// All checks pass; with `strict`, warnings count as failures too.
    pub fn passed(&self, strict: bool) -> bool {
        self.checks.iter().all(|c| c.pass) && !(strict && !self.warnings.is_empty())
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    /// Writes every file plus `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path, strict: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        let mut summary = self.summary.clone();
        summary["pass"] = json!(self.passed(strict));
        summary["strict"] = json!(strict);
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?;
        let mut written = Vec::new();
        for (name, body) in self.files.iter().map(|(n, b)| (n.as_str(), b.as_str())).chain([("summary.json", text.as_str())]) {
            let path = dir.join(name);
            fs::write(&path, format!("{body}\n")).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Noise window a run needs in original time: `(back, forward, dt)`.
/// `None` for runs that build their own fast-time grids.
pub fn required_window(cfg: &ExperimentConfig, sys: &SystemSpec) -> Option<(f64, f64, f64)> {
    let r = cfg.sample_radius;
    match cfg.experiment {
        ExperimentKind::Manifold => {
            let back = backward_window(sys, Scaling::Original, cfg.tol, r);
            Some((back, 0.0, default_step(sys, Scaling::Original, back)))
        }
        ExperimentKind::Tracking | ExperimentKind::Reduction => {
            let back = backward_window(sys, Scaling::Original, cfg.tol * 0.1, orbit_scale(cfg));
            let dt = default_step(sys, Scaling::Original, back);
            let mut forward = tracking_window(sys, cfg.tol, cfg.horizon());
            if cfg.experiment == ExperimentKind::Reduction {
                forward = forward.max(cfg.reduction_t_plus);
            }
            Some((back, forward + dt, dt))
        }
        ExperimentKind::Critical | ExperimentKind::Scaling => None,
    }
}

/// Bound on `|Y|` along the orbits a run visits.
fn orbit_scale(cfg: &ExperimentConfig) -> f64 {
    3.0 * cfg.sample_radius.max(1.0)
}

/// Noise grid from the explicit `grid.*` keys and the derived window.
/// The error string says which key is too short.
pub fn plan_grid(cfg: &ExperimentConfig, sys: &SystemSpec) -> std::result::Result<Option<TimeGrid>, String> {
    let g = cfg.grid;
    let explicit = g.t_minus.is_some() || g.t_plus.is_some() || g.dt.is_some();
    let Some((back, forward, derived_dt)) = required_window(cfg, sys) else {
        if explicit {
            return Err(format!("grid.* keys do not apply to the {} experiment", cfg.experiment));
        }
        return Ok(None);
    };
    let dt = g.dt.unwrap_or(derived_dt);
    let fallback = TimeGrid::covering(back + dt, forward, dt).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(
        g.t_minus.unwrap_or(fallback.t_minus()),
        g.t_plus.unwrap_or(fallback.t_plus()),
        dt,
    )
    .map_err(|e| e.to_string())?;
    let need_back = (back / dt - 1e-9).ceil() * dt;
    if -grid.t_minus() < need_back - 1e-9 * dt {
        return Err(format!(
            "grid.t_minus = {} is shorter than the backward window; use grid.t_minus ≤ {}",
            grid.t_minus(),
            -need_back
        ));
    }
    if grid.t_plus() < forward - 1e-9 * dt {
        return Err(format!(
            "grid.t_plus = {} is shorter than the forward window; use grid.t_plus ≥ {forward}",
            grid.t_plus()
        ));
    }
    Ok(Some(grid))
}

pub fn seed_list(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|i| cfg.base_seed.wrapping_add(i)).collect()
}

const SAMPLE_STREAM: u64 = 11;

/// Uniform direction, radius uniform in `[0, radius]`, measured with `norm`.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64, norm: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            let r = radius * rng.random::<f64>();
            return v.iter().map(|x| x * r / n).collect();
        }
    }
}

/// Initial slow values shared by every seed of a run.
pub fn sample_slow_values(sys: &SystemSpec, n: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM);
    (0..n).map(|_| ball_point(&mut rng, sys.slow_dim(), radius, |y| sys.slow.norm(y))).collect()
}

/// Initial states with both components in balls of radius `radius`.
pub fn sample_states(sys: &SystemSpec, n: usize, radius: f64, seed: u64) -> Vec<StateVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM + 1);
    (0..n)
        .map(|_| {
            let x = ball_point(&mut rng, sys.fast_dim(), radius, |x| sys.fast.norm(x));
            let y = ball_point(&mut rng, sys.slow_dim(), radius, |y| sys.slow.norm(y));
            StateVector::new(x, y)
        })
        .collect()
}

fn opt(v: Result<f64>) -> Value {
    v.map(|x| json!(x)).unwrap_or(Value::Null)
}

fn base_summary(cfg: &ExperimentConfig, model: &ModelSpec) -> Value {
    let w = model.system.weights();
    let params: serde_json::Map<String, Value> =
        model.parameters.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    json!({
        "experiment": cfg.experiment,
        "model": {
            "name": model.name,
            "parameters": params,
            "gamma1": model.gamma1,
            "gamma2": model.gamma2,
            "lipschitz": model.lipschitz,
            "cutoff_radius": model.cutoff_radius,
            "notes": model.notes,
        },
        "settings": {
            "mu": cfg.mu,
            "epsilon": cfg.epsilon,
            "sigma": cfg.sigma,
            "noise_modes": cfg.noise_modes,
            "tol": cfg.tol,
            "max_iters": cfg.max_iters,
            "seeds": seed_list(cfg),
            "samples": cfg.samples,
            "sample_radius": cfg.sample_radius,
        },
        "constants": {
            "kappa": opt(w.contraction_factor()),
            "rho": opt(w.rho_factor()),
            "lipschitz_bound": opt(w.manifold_lipschitz_bound()),
            "critical_kappa": opt(w.limit_contraction()),
        },
    })
}

fn csv(header: &str, rows: Vec<String>) -> String {
    let mut out = String::from(header);
    for r in rows {
        out.push('\n');
        out.push_str(&r);
    }
    out
}

fn solve_options(cfg: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        tol: cfg.tol,
        max_iters: cfg.max_iters,
        window: None,
    }
}

fn tracking_options(cfg: &ExperimentConfig) -> TrackingOptions {
    TrackingOptions {
        max_iters: cfg.max_iters,
        ..TrackingOptions::new(cfg.tol, cfg.horizon())
    }
}

fn noises(sys: &SystemSpec, grid: TimeGrid, seeds: &[u64]) -> Result<Vec<NoisePath>> {
    seeds.par_iter().map(|&s| sys.original_noise(grid, s)).collect()
}

/// Runs the configured experiment. The config must already be valid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let model = cfg.build_model()?;
    let grid = plan_grid(cfg, &model.system).map_err(Error::Assumption)?;
    let mut out = RunOutput {
        experiment: cfg.experiment,
        files: Vec::new(),
        checks: Vec::new(),
        warnings: Vec::new(),
        summary: base_summary(cfg, &model),
    };
    let results = match cfg.experiment {
        ExperimentKind::Manifold => run_manifold(cfg, &model, grid.expect("original-time grid"), &mut out)?,
        ExperimentKind::Tracking => run_tracking(cfg, &model, grid.expect("original-time grid"), &mut out)?,
        ExperimentKind::Reduction => run_reduction(cfg, &model, grid.expect("original-time grid"), &mut out)?,
        ExperimentKind::Critical => run_critical(cfg, &model, &mut out)?,
        ExperimentKind::Scaling => run_scaling(cfg, &model, &mut out)?,
    };
    out.summary["results"] = results;
    out.summary["checks"] = json!(out.checks);
    out.summary["warnings"] = json!(out.warnings);
    Ok(out)
}

/// Slope of `H` along the first slow coordinate, from a least-squares fit.
fn fitted_slope(graph: &ManifoldGraph) -> f64 {
    let x: Vec<f64> = graph.samples.iter().map(|s| s.y0[0]).collect();
    let y: Vec<f64> = graph.samples.iter().map(|s| s.h[0]).collect();
    linear_fit(&x, &y).slope
}

fn run_manifold(cfg: &ExperimentConfig, model: &ModelSpec, grid: TimeGrid, out: &mut RunOutput) -> Result<Value> {
    let sys = &model.system;
    let w = sys.weights();
    let kappa = w.contraction_factor()?;
    let bound = w.manifold_lipschitz_bound()?;
    let opts = solve_options(cfg);
    let seeds = seed_list(cfg);
    let y0s = sample_slow_values(sys, cfg.samples, cfg.sample_radius, cfg.base_seed);
    let paths = noises(sys, grid, &seeds)?;
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_lip: f64 = 0.0;
    let mut worst_slope_err: f64 = 0.0;
    let scalar = model.name == "scalar_linear";
    let expected_slope = benchmark_slope(cfg.model.a, cfg.model.k, cfg.model.c, cfg.epsilon);
    for noise in &paths {
        let graph = sample_manifold_graph(&y0s, sys, noise, Scaling::Original, &opts)?;
        let ratio = graph.samples.iter().map(|s| s.measured_ratio).fold(0.0, f64::max);
        let lip = if y0s.len() >= 2 { Some(empirical_lipschitz(&graph, sys)?) } else { None };
        let slope = (scalar && y0s.len() >= 2).then(|| fitted_slope(&graph));
        worst_ratio = worst_ratio.max(ratio);
        worst_lip = worst_lip.max(lip.unwrap_or(0.0));
        if let Some(s) = slope {
            worst_slope_err = worst_slope_err.max((s - expected_slope).abs());
        }
        per_seed.push(json!({
            "seed": noise.seed(),
            "max_measured_ratio": ratio,
            "empirical_lipschitz": lip,
            "fitted_slope": slope,
            "max_iterations": graph.samples.iter().map(|s| s.iterations).max(),
        }));
        rows.extend(graph.csv_rows());
    }
    out.files.push(("manifold.csv".into(), csv(ManifoldGraph::CSV_HEADER, rows)));
    out.checks.push(Check::at_most(
        "picard_ratio",
        worst_ratio,
        kappa + 0.05,
        "largest ratio of successive Picard differences against κ + 0.05",
    ));
    if y0s.len() >= 2 {
        out.checks.push(Check::at_most(
            "manifold_lipschitz",
            worst_lip,
            bound,
            "largest sampled Lipschitz quotient of H against K/((γ₁−μ)(1−κ))",
        ));
    } else {
        out.warnings.push("one sample per seed: Lipschitz quotient not measured".into());
    }
    if scalar && y0s.len() >= 2 {
        out.checks.push(Check::at_most(
            "benchmark_slope",
            worst_slope_err,
            1e-6,
            format!("|fitted slope − {expected_slope}| for the scalar benchmark"),
        ));
    }
    Ok(json!({
        "per_seed": per_seed,
        "max_measured_ratio": worst_ratio,
        "max_empirical_lipschitz": worst_lip,
        "expected_slope": scalar.then_some(expected_slope),
    }))
}

fn run_tracking(cfg: &ExperimentConfig, model: &ModelSpec, grid: TimeGrid, out: &mut RunOutput) -> Result<Value> {
    let sys = &model.system;
    let rho = sys.weights().rho_factor()?;
    let topts = tracking_options(cfg);
    let seeds = seed_list(cfg);
    let z0s = sample_states(sys, cfg.samples, cfg.sample_radius, cfg.base_seed);
    let paths = noises(sys, grid, &seeds)?;
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..z0s.len()).map(move |z| (s, z))).collect();
    let results = jobs
        .par_iter()
        .map(|&(s, z)| {
            let noise = &paths[s];
            let wrap = |e: Error| Error::Solver {
                module: "tracking",
                sample: format!("seed {} sample {z}", seeds[s]),
                source: Box::new(e),
            };
            let pair = solve_tracking_point(&z0s[z], sys, noise, &topts).map_err(wrap)?;
            let report = verify_tracking(&pair, sys, noise, cfg.horizon()).map_err(wrap)?;
            Ok((pair, report))
        })
        .collect::<Result<Vec<_>>>()?;

    let rate = cfg.mu / cfg.epsilon;
    let mut rows = Vec::new();
    let mut point_rows = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_weighted: f64 = 0.0;
    let mut min_exponent = f64::INFINITY;
    let mut unfitted = 0;
    for (&(s, z), (pair, report)) in jobs.iter().zip(&results) {
        worst_ratio = worst_ratio.max(pair.diagnostics.measured_ratio);
        worst_weighted = worst_weighted.max(report.max_weighted_ratio);
        match report.fitted_exponent {
            Some(e) => min_exponent = min_exponent.min(e),
            None => unfitted += 1,
        }
        rows.extend(report.csv_rows().into_iter().map(|r| format!("{z},{r}")));
        for (block, a, b) in [("fast", &pair.z0.fast, &pair.zbar0.fast), ("slow", &pair.z0.slow, &pair.zbar0.slow)] {
            for (k, (u, v)) in a.iter().zip(b).enumerate() {
                point_rows.push(format!("{},{z},{block},{k},{u:.12e},{v:.12e}", seeds[s]));
            }
        }
    }
    out.files.push(("tracking.csv".into(), csv(&format!("sample_id,{}", TrackingReport::CSV_HEADER), rows)));
    out.files.push((
        "tracking_points.csv".into(),
        csv("seed,sample_id,block,mode_index,z0,zbar0", point_rows),
    ));
    out.checks.push(Check::at_most(
        "picard_ratio",
        worst_ratio,
        rho + 0.05,
        "largest ratio of successive Picard differences against ρ + 0.05",
    ));
    out.checks.push(Check::at_most(
        "tracking_bound",
        worst_weighted,
        1.1,
        "max of ‖Z−Z̄‖(t)·e^{μt/ε}(1−κ)/‖Z0−Z̄0‖",
    ));
    if unfitted < results.len() {
        out.checks.push(Check::at_least(
            "decay_exponent",
            min_exponent,
            0.9 * rate,
            "smallest fitted decay exponent against 0.9 μ/ε",
        ));
    }
    if unfitted > 0 {
        out.warnings.push(format!(
            "{unfitted} of {} tracking distances were too small to fit an exponent",
            results.len()
        ));
    }
    Ok(json!({
        "horizon": cfg.horizon(),
        "t_plus": results.first().map(|(p, _)| p.t_plus),
        "max_measured_ratio": worst_ratio,
        "max_weighted_ratio": worst_weighted,
        "min_fitted_exponent": (unfitted < results.len()).then_some(min_exponent),
        "guaranteed_rate": rate,
    }))
}

fn run_reduction(cfg: &ExperimentConfig, model: &ModelSpec, grid: TimeGrid, out: &mut RunOutput) -> Result<Value> {
    let sys = &model.system;
    let opts = solve_options(cfg);
    let topts = tracking_options(cfg);
    let seeds = seed_list(cfg);
    let dt = grid.dt();
    let horizon = cfg.horizon();
    let y0s = sample_slow_values(sys, 1, cfg.sample_radius, cfg.base_seed);
    let z0s = sample_states(sys, cfg.samples, cfg.sample_radius, cfg.base_seed);
    let paths = noises(sys, grid, &seeds)?;
    let rate = cfg.mu / cfg.epsilon;

    // invariance of the manifold under the full flow, one start per seed
    let every = ((cfg.reduction_t_plus / dt / 20.0).round() as usize).max(1);
    let invariance = paths
        .iter()
        .map(|noise| {
            let wrap = |e: Error| Error::Solver {
                module: "reduction_sim",
                sample: format!("seed {} invariance", noise.seed()),
                source: Box::new(e),
            };
            let x0 = evaluate_manifold(&y0s[0], sys, noise, &opts).map_err(wrap)?;
            let start = StateVector::new(x0, y0s[0].clone());
            let traj = integrate_full(&start, sys, noise, cfg.reduction_t_plus, dt, Scheme::Trapezoidal).map_err(wrap)?;
            let report = invariance_residual(&traj, sys, noise, &opts, every).map_err(wrap)?;
            let exit = match model.cutoff_radius {
                Some(r) => exit_time(&traj, sys, noise, r).map_err(wrap)?,
                None => None,
            };
            Ok((traj, report, exit))
        })
        .collect::<Result<Vec<_>>>()?;

    // full run from an off-manifold start against the reduced run from its tracking point
    let jobs: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|s| (0..z0s.len()).map(move |z| (s, z))).collect();
    let reductions = jobs
        .par_iter()
        .map(|&(s, z)| {
            let noise = &paths[s];
            let wrap = |e: Error| Error::Solver {
                module: "reduction_sim",
                sample: format!("seed {} sample {z}", seeds[s]),
                source: Box::new(e),
            };
            let pair = solve_tracking_point(&z0s[z], sys, noise, &topts).map_err(wrap)?;
            let full = integrate_full(&z0s[z], sys, noise, horizon, dt, Scheme::Trapezoidal).map_err(wrap)?;
            let reduced = integrate_reduced(&pair.zbar0.slow, sys, noise, horizon, dt, Scheme::Trapezoidal, &opts)
                .map_err(wrap)?;
            let d = full.distances(&reduced, sys);
            let floor = (1e-9 * d[0]).max(100.0 * cfg.tol);
            let exponent = fitted_decay_exponent(&full.times, &d, floor);
            Ok((full.times.clone(), d, exponent, reduced))
        })
        .collect::<Result<Vec<(Vec<f64>, Vec<f64>, Option<f64>, Trajectory)>>>()?;

    let threshold = 10.0 * (cfg.tol + dt);
    let worst_residual = invariance.iter().map(|(_, r, _)| r.max_residual).fold(0.0, f64::max);
    let exits: Vec<Option<f64>> = invariance.iter().map(|(_, _, e)| *e).collect();
    if let (Some(r), Some(t)) = (model.cutoff_radius, exits.iter().flatten().cloned().reduce(f64::min)) {
        out.warnings.push(format!(
            "trajectory left the cutoff ball R = {r} at t = {t}; the reduction is only local before that"
        ));
    }
    let mut inv_rows = Vec::new();
    for ((_, r, _), seed) in invariance.iter().zip(&seeds) {
        for (t, v) in r.times.iter().zip(&r.residuals) {
            inv_rows.push(format!("{seed},{t:.10},{v:.12e}"));
        }
    }
    let mut dist_rows = Vec::new();
    let mut min_exponent = f64::INFINITY;
    let mut unfitted = 0;
    for (&(s, z), (times, d, e, _)) in jobs.iter().zip(&reductions) {
        match e {
            Some(e) => min_exponent = min_exponent.min(*e),
            None => unfitted += 1,
        }
        let fit = e.map(|v| format!("{v:.6}")).unwrap_or_default();
        for (t, v) in times.iter().zip(d) {
            dist_rows.push(format!("{},{z},{t:.10},{v:.12e},{fit}", seeds[s]));
        }
    }
    out.files.push(("invariance.csv".into(), csv("seed,t,residual", inv_rows)));
    out.files.push(("reduction.csv".into(), csv("seed,sample_id,t,distance,fitted_exponent", dist_rows)));
    out.files.push(("trajectory.csv".into(), csv(Trajectory::CSV_HEADER, invariance[0].0.csv_rows())));
    out.files.push(("reduced.csv".into(), csv(Trajectory::CSV_HEADER, reductions[0].3.csv_rows())));
    out.checks.push(Check::at_most(
        "invariance",
        worst_residual,
        threshold,
        "largest ‖X(t) − H(θ_t ω, Y(t))‖ against 10(tol + dt)",
    ));
    if unfitted < reductions.len() {
        out.checks.push(Check::at_least(
            "reduction_exponent",
            min_exponent,
            0.9 * rate,
            "smallest fitted decay exponent of full − reduced against 0.9 μ/ε",
        ));
    }
    if unfitted > 0 {
        out.warnings.push(format!(
            "{unfitted} of {} reduction distances were too small to fit an exponent",
            reductions.len()
        ));
    }
    Ok(json!({
        "dt": dt,
        "horizon": horizon,
        "invariance_t_plus": cfg.reduction_t_plus,
        "max_invariance_residual": worst_residual,
        "cutoff_exit_times": model.cutoff_radius.map(|_| exits),
        "min_fitted_exponent": (unfitted < reductions.len()).then_some(min_exponent),
        "guaranteed_rate": rate,
    }))
}

fn run_critical(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut RunOutput) -> Result<Value> {
    let sys = &model.system;
    let opts = solve_options(cfg);
    let seeds = seed_list(cfg);
    let y0s = sample_slow_values(sys, cfg.samples, cfg.sample_radius, cfg.base_seed);
    let sweep = epsilon_sweep(sys, &seeds, &y0s, &cfg.epsilons, &opts)?;
    out.files.push(("critical.csv".into(), csv(EpsilonSweep::CSV_HEADER, sweep.csv_rows())));
    let fit_json = serde_json::to_string_pretty(&json!({
        "epsilons": sweep.epsilons,
        "mean_errors": sweep.mean_errors,
        "fit": sweep.fit,
        "monotone": sweep.monotone,
    }))
    .map_err(|e| Error::Io(e.to_string()))?;
    out.files.push(("sweep.json".into(), fit_json));

    match sweep.slope() {
        Some(slope) => out.checks.push(Check {
            name: "sweep_slope".into(),
            pass: (0.8..=1.2).contains(&slope),
            value: slope,
            threshold: 1.0,
            detail: "log-log slope of the mean manifold error in ε, accepted in [0.8, 1.2]".into(),
        }),
        None => out
            .warnings
            .push("manifold errors vanish at every ε; no slope to fit".into()),
    }
    if !sweep.monotone {
        out.warnings.push("mean manifold error is not monotone in ε".into());
    }

    let (g1, g2) = (sys.gamma1(), sys.gamma2());
    let mut s_excess: f64 = 0.0;
    for &e in &cfg.epsilons {
        let (_, bound) = s_bound(g1, g2, cfg.mu, e)?;
        let sampled = s_grid_max(g1, g2, cfg.mu, e, -60.0 / cfg.mu, 20_000);
        s_excess = s_excess.max(sampled - bound);
    }
    out.checks.push(Check::at_most(
        "s_bound",
        s_excess,
        1e-12,
        "sampled sup of S(t, ε) minus its closed-form bound",
    ));

    let mut extra = json!({});
    if model.name == "scalar_linear" {
        let (a, k, c) = (cfg.model.a, cfg.model.k, cfg.model.c);
        let grid = backward_grid(sys, Scaling::Critical, cfg.tol, 1.0, 0.0)?;
        let noise = sys.unscaled_noise(grid, cfg.base_seed)?;
        let h1 = solve_critical_manifold(&[1.0], sys, &noise, &opts)?;
        let h0 = solve_critical_manifold(&[0.0], sys, &noise, &opts)?;
        let slope = h1[0] - h0[0];
        out.checks.push(Check::at_most(
            "critical_slope",
            (slope - k / a).abs(),
            1e-10,
            format!("|H0 slope − k/a| with k/a = {}", k / a),
        ));
        extra["critical_slope"] = json!(slope);
        if cfg.sigma == 0.0 {
            let mean_y: f64 = y0s.iter().map(|y| y[0].abs()).sum::<f64>() / y0s.len() as f64;
            let mut worst: f64 = 0.0;
            let mut ratios = Vec::new();
            for (e, err) in sweep.epsilons.iter().zip(&sweep.mean_errors) {
                let predicted = k * k * c.abs() * e / (a * a * a) * mean_y;
                let rel = (err / predicted - 1.0).abs();
                ratios.push(json!({"epsilon": e, "error": err, "predicted": predicted}));
                worst = worst.max(rel);
            }
            out.checks.push(Check::at_most(
                "first_order_error",
                worst,
                0.05,
                "relative gap between the mean error and k²|c|ε|Y0|/a³",
            ));
            extra["first_order"] = json!(ratios);
        } else {
            out.warnings
                .push("sigma > 0: first-order error comparison needs the noise-free benchmark".into());
        }
    }
    Ok(json!({
        "epsilons": sweep.epsilons,
        "mean_errors": sweep.mean_errors,
        "fit": sweep.fit,
        "monotone": sweep.monotone,
        "scalar_benchmark": extra,
    }))
}

fn run_scaling(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut RunOutput) -> Result<Value> {
    let sys = &model.system;
    let report = check_ou_scaling(
        &sys.fast,
        sys.noise_modes,
        cfg.sigma,
        &cfg.epsilons,
        cfg.scaling_samples,
        cfg.base_seed,
    )?;
    out.files.push(("scaling.csv".into(), csv(OuScalingReport::CSV_HEADER, report.csv_rows())));
    out.files.push((
        "ks.csv".into(),
        csv(
            "epsilon,statistic,critical_value",
            report.ks.iter().map(|(e, d, c)| format!("{e},{d:.9},{c:.9}")).collect(),
        ),
    ));
    let worst_z = report
        .rows
        .iter()
        .map(|r| (r.variance - r.expected).abs() / r.standard_error)
        .fold(0.0, f64::max);
    out.checks.push(Check::at_most(
        "stationary_variance",
        worst_z,
        3.0,
        "largest |sample − closed-form variance| in standard errors",
    ));
    let worst_ks = report.ks.iter().map(|(_, d, c)| d / c).fold(0.0, f64::max);
    out.checks.push(Check::at_most(
        "ks_distribution",
        worst_ks,
        1.0,
        "largest KS statistic over its level-0.01 critical value",
    ));
    Ok(json!({
        "rows": report.rows,
        "ks": report.ks,
        "variance_pass": report.variance_pass,
        "ks_pass": report.ks_pass,
    }))
}
