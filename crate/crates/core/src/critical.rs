//! Fast-time formulation and the critical manifold.
//!
//! On the fast time scale `s = t/eps` the system reads
//!
//! ```text
//! dX = (A X + f(X + xi, Y)) ds,    dY = eps (B Y + g(X + xi, Y)) ds
//! ```
//!
//! with the unscaled OU process `xi`. Its slow manifold `Hb` has the same law
//! as `H`. Freezing `Y` gives the critical manifold `H0`, and
//! `|Hb(omega, Y0) - H0(omega, Y0)| = O(eps)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lyapunov_perron::{
    backward_grid, eval_along, noise_handle, solve_backward_fixed_point, BackwardSolution, Scaling,
    SolveOptions,
};
use crate::noise::NoisePath;
use crate::stats::{linear_fit, mean, variance, variance_se, LinearFit};
use crate::system::SystemSpec;

/// `H0(omega, Y0)`: fixed point with `Y` frozen at `Y0`, driven by `xi`.
pub fn solve_critical_manifold(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    Ok(solve_backward_fixed_point(y0, sys, noise, Scaling::Critical, opts)?.manifold_value())
}

/// `Hb(omega, Y0)` of the fast-time system at `epsilon`, driven by `xi`.
pub fn solve_breve_manifold(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    epsilon: f64,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    let sys = sys.with_epsilon(epsilon);
    Ok(solve_backward_fixed_point(y0, &sys, noise, Scaling::Rescaled, opts)?.manifold_value())
}

/// `S(t, eps) = e^{mu t} (e^{-eps gamma2 t} / (gamma1 - eps gamma2) - 1/gamma1)` for `t <= 0`.
pub fn s_function(t: f64, gamma1: f64, gamma2: f64, mu: f64, epsilon: f64) -> f64 {
    (mu * t).exp() * ((-epsilon * gamma2 * t).exp() / (gamma1 - epsilon * gamma2) - 1.0 / gamma1)
}

/// Maximiser `t*` and the bound `mu / (gamma1 (mu - eps gamma2)) - 1/gamma1`
/// on `sup_{t <= 0} S(t, eps)`. With `gamma2 = 0`, `S` vanishes identically
/// and `(0, 0)` is returned.
pub fn s_bound(gamma1: f64, gamma2: f64, mu: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(gamma1 > 0.0 && gamma2 >= 0.0 && mu > 0.0 && epsilon > 0.0) {
        return Err(Error::InvalidArgument(
            "need gamma1 > 0, gamma2 >= 0, mu > 0, eps > 0".into(),
        ));
    }
    let eg = epsilon * gamma2;
    if !(mu > eg) {
        return Err(Error::Assumption("μ−εγ₂ ≤ 0".into()));
    }
    if !(gamma1 > eg) {
        return Err(Error::Assumption(format!("γ₁ > εγ₂ violated: {gamma1} ≤ {eg}")));
    }
    if gamma2 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let t_star = -(mu * (gamma1 - eg) / (gamma1 * (mu - eg))).ln() / eg;
    Ok((t_star, mu / (gamma1 * (mu - eg)) - 1.0 / gamma1))
}

/// Maximum of `S` on `n` equally spaced points of `[t_min, 0]`.
pub fn s_grid_max(gamma1: f64, gamma2: f64, mu: f64, epsilon: f64, t_min: f64, n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let t = t_min * (1.0 - i as f64 / (n - 1) as f64);
            s_function(t, gamma1, gamma2, mu, epsilon)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Closed-form bound on `|Yb(t) - Y0|` at fast time `t <= 0`:
/// `(|B Y0| + C_g) (e^{-gamma2 eps t} - 1) / gamma2`, or `(|B Y0| + C_g) eps |t|` when `gamma2 = 0`.
pub fn slow_deviation_bound(sys: &SystemSpec, y0: &[f64], c_g: f64, t: f64) -> f64 {
    let by = sys.slow.norm(&sys.slow.operator().apply_generator(y0));
    let c = by + c_g;
    let g2 = sys.gamma2();
    if g2 == 0.0 {
        c * sys.epsilon * t.abs()
    } else {
        c * ((-g2 * sys.epsilon * t).exp() - 1.0) / g2
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlowDeviation {
    /// Bound on `|g|` used in the estimate.
    pub c_g: f64,
    /// Largest `measured / bound` over the nodes with `t < 0`.
    pub max_ratio: f64,
}

/// Compares a fast-time solution's slow component with the closed-form bound.
/// `c_g = None` takes the sup of `|g|` along the solution.
pub fn slow_deviation(
    solution: &BackwardSolution,
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    c_g: Option<f64>,
) -> Result<SlowDeviation> {
    let traj = &solution.trajectory;
    let c_g = match c_g.or(sys.coupling.g_bound()) {
        Some(c) => c,
        None => {
            let first = noise.node(traj.times[0])?;
            let handle = noise_handle(sys, noise, 1.0, first)?;
            let (_, g) = eval_along(sys, traj, handle, true);
            g.chunks(sys.slow_dim()).map(|v| sys.slow.norm(v)).fold(0.0, f64::max)
        }
    };
    let mut max_ratio: f64 = 0.0;
    for j in 0..traj.len() {
        let t = traj.times[j];
        if t >= 0.0 {
            continue;
        }
        let d = sys.slow.norm(&crate::spectral::sub(traj.slow_at(j), y0));
        let b = slow_deviation_bound(sys, y0, c_g, t);
        if b > 0.0 {
            max_ratio = max_ratio.max(d / b);
        } else if d > 1e-14 {
            max_ratio = f64::INFINITY;
        }
    }
    Ok(SlowDeviation { c_g, max_ratio })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub seed: u64,
    pub y0_id: usize,
    pub error_h1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonSweep {
    pub epsilons: Vec<f64>,
    /// Mean of `|Hb - H0|_1` over seeds and `Y0` samples, per `eps`.
    pub mean_errors: Vec<f64>,
    pub cells: Vec<SweepCell>,
    /// Log-log fit of mean error against `eps`; `None` when every error vanishes.
    pub fit: Option<LinearFit>,
    pub monotone: bool,
}

impl EpsilonSweep {
    pub const CSV_HEADER: &'static str = "epsilon,seed,y0_id,error_h1";

    pub fn csv_rows(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|c| format!("{},{},{},{:.12e}", c.epsilon, c.seed, c.y0_id, c.error_h1))
            .collect()
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }
}

/// Errors vanishing below this are treated as exact zeros in the fit.
const EXACT_ZERO: f64 = 1e-13;

/// Common-random-number sweep: every `(seed, Y0)` uses the same `xi` path for
/// all `eps` and for the critical manifold.
pub fn epsilon_sweep(
    sys: &SystemSpec,
    seeds: &[u64],
    y0s: &[Vec<f64>],
    epsilons: &[f64],
    opts: &SolveOptions,
) -> Result<EpsilonSweep> {
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be positive".into()));
    }
    if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("epsilons must be strictly decreasing".into()));
    }
    if seeds.is_empty() || y0s.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed and one Y0".into()));
    }
    for &e in epsilons {
        let s = sys.with_epsilon(e);
        if let Some(v) = s.weights().violations().into_iter().next() {
            return Err(Error::Assumption(format!("at eps = {e}: {v}")));
        }
    }
    let scale = y0s.iter().map(|y| sys.slow.norm(y)).fold(1.0, f64::max);
    let grid = backward_grid(sys, Scaling::Rescaled, opts.tol, scale, 0.0)?;
    let paths = seeds
        .par_iter()
        .map(|&seed| sys.unscaled_noise(grid, seed))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..y0s.len()).map(move |y| (s, y)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(s, y)| {
            let noise = &paths[s];
            let wrap = |e: Error| Error::Solver {
                module: "critical",
                sample: format!("seed {} y0 {y}", seeds[s]),
                source: Box::new(e),
            };
            let h0 = solve_critical_manifold(&y0s[y], sys, noise, opts).map_err(wrap)?;
            epsilons
                .iter()
                .map(|&e| {
                    let hb = solve_breve_manifold(&y0s[y], sys, noise, e, opts).map_err(wrap)?;
                    Ok(sys.fast.norm(&crate::spectral::sub(&hb, &h0)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(jobs.len() * epsilons.len());
    for (i, &e) in epsilons.iter().enumerate() {
        for (k, &(s, y)) in jobs.iter().enumerate() {
            cells.push(SweepCell {
                epsilon: e,
                seed: seeds[s],
                y0_id: y,
                error_h1: per_job[k][i],
            });
        }
    }
    let mean_errors: Vec<f64> = (0..epsilons.len())
        .map(|i| mean(&per_job.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    if mean_errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver {
            module: "critical",
            sample: "sweep".into(),
            source: Box::new(Error::InvalidArgument("non-finite manifold error".into())),
        });
    }
    let fit = if mean_errors.iter().all(|v| *v > EXACT_ZERO) && epsilons.len() >= 2 {
        let lx: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = mean_errors.iter().map(|e| e.ln()).collect();
        Some(linear_fit(&lx, &ly))
    } else {
        None
    };
    let monotone = mean_errors.windows(2).all(|w| w[1] <= w[0]);
    Ok(EpsilonSweep {
        epsilons: epsilons.to_vec(),
        mean_errors,
        cells,
        fit,
        monotone,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LawComparison {
    pub n_original: usize,
    pub n_rescaled: usize,
    pub mean_original: f64,
    pub mean_rescaled: f64,
    pub var_original: f64,
    pub var_rescaled: f64,
    /// `|mean difference| / SE`.
    pub mean_z: f64,
    /// `|variance difference| / SE`.
    pub var_z: f64,
}

/// Compares the law of one fast coefficient of `H(omega, Y0)` (original
/// scaling, `eta` noise) with that of `Hb(omega', Y0)` (`xi` noise) on
/// independent seed sets.
pub fn compare_laws(
    y0: &[f64],
    sys: &SystemSpec,
    component: usize,
    seeds_original: &[u64],
    seeds_rescaled: &[u64],
    opts: &SolveOptions,
) -> Result<LawComparison> {
    if component >= sys.fast_dim() {
        return Err(Error::InvalidArgument(format!("component {component} out of range")));
    }
    if seeds_original.len() < 4 || seeds_rescaled.len() < 4 {
        return Err(Error::InvalidArgument("need at least four seeds per side".into()));
    }
    if seeds_original.iter().any(|s| seeds_rescaled.contains(s)) {
        return Err(Error::InvalidArgument("seed sets must be disjoint".into()));
    }
    let scale = sys.slow.norm(y0);
    let g_orig = backward_grid(sys, Scaling::Original, opts.tol, scale, 0.0)?;
    let g_resc = backward_grid(sys, Scaling::Rescaled, opts.tol, scale, 0.0)?;
    let a = seeds_original
        .par_iter()
        .map(|&s| {
            let p = sys.original_noise(g_orig, s)?;
            let sol = solve_backward_fixed_point(y0, sys, &p, Scaling::Original, opts)?;
            Ok(sol.manifold_value()[component])
        })
        .collect::<Result<Vec<f64>>>()?;
    let b = seeds_rescaled
        .par_iter()
        .map(|&s| {
            let p = sys.unscaled_noise(g_resc, s)?;
            let sol = solve_backward_fixed_point(y0, sys, &p, Scaling::Rescaled, opts)?;
            Ok(sol.manifold_value()[component])
        })
        .collect::<Result<Vec<f64>>>()?;
    let (ma, mb) = (mean(&a), mean(&b));
    let (va, vb) = (variance(&a), variance(&b));
    let se_mean = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    let se_var = (variance_se(&a).powi(2) + variance_se(&b).powi(2)).sqrt();
    let z = |d: f64, se: f64| if se > 0.0 { d.abs() / se } else if d == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(LawComparison {
        n_original: a.len(),
        n_rescaled: b.len(),
        mean_original: ma,
        mean_rescaled: mb,
        var_original: va,
        var_rescaled: vb,
        mean_z: z(ma - mb, se_mean),
        var_z: z(va - vb, se_var),
    })
}
