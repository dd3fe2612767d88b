//! Backward Lyapunov-Perron fixed point on exponentially weighted spaces and
//! the slow manifold graph it defines.
//!
//! One solver covers three scalings of the same integral equations on `[-T, 0]`:
//!
//! ```text
//! X(t) = (1/tau) int_{-T}^t e^{A (t-s)/tau} F(s) ds
//! Y(t) = e^{lambda B t} Y0 + lambda int_0^t e^{lambda B (t-s)} G(s) ds
//! ```
//!
//! with `F = f(X + noise, Y)`, `G = g(X + noise, Y)` and weighted norm
//! `max_j e^{w t_j} (||X_j||_1 + ||Y_j||_2)`:
//!
//! | scaling    | tau | lambda | w      | noise        |
//! |------------|-----|--------|--------|--------------|
//! | `Original` | eps | 1      | mu/eps | `eta^{1/eps}`|
//! | `Rescaled` | 1   | eps    | mu     | `xi`         |
//! | `Critical` | 1   | 0      | mu     | `xi`         |
//!
//! Both integrals use exponential time differencing with `F`, `G` linear on
//! each step, which is exact against the stiff kernel.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{NoisePath, TimeGrid};
use crate::spectral::{check_len, BlockOps};
use crate::system::SystemSpec;

/// Constants entering the contraction estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightConfig {
    pub mu: f64,
    pub epsilon: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(rename = "K")]
    pub lipschitz: f64,
}

pub(crate) fn fmt_num(x: f64) -> String {
    let s = format!("{:.6}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

impl WeightConfig {
    /// Every violated gate, each naming the offending numbers.
    pub fn violations(&self) -> Vec<String> {
        let WeightConfig {
            mu,
            epsilon,
            gamma1,
            gamma2,
            lipschitz: k,
        } = *self;
        let mut out = Vec::new();
        if !(mu > 0.0) {
            out.push(format!("μ > 0 violated: μ = {}", fmt_num(mu)));
        }
        if !(epsilon > 0.0) {
            out.push(format!("ε > 0 violated: ε = {}", fmt_num(epsilon)));
        }
        if !(k < gamma1) {
            out.push(format!(
                "(A3) K < γ₁ violated: {} ≥ {}",
                fmt_num(k),
                fmt_num(gamma1)
            ));
        }
        if !(gamma1 - mu > k) {
            out.push(format!(
                "γ₁−μ > K violated: {} ≤ {}",
                fmt_num(gamma1 - mu),
                fmt_num(k)
            ));
        }
        if !(mu - epsilon * gamma2 > 0.0) {
            out.push(format!(
                "μ−εγ₂ ≤ 0: {} − {}·{} = {}",
                fmt_num(mu),
                fmt_num(epsilon),
                fmt_num(gamma2),
                fmt_num(mu - epsilon * gamma2)
            ));
        }
        if out.is_empty() {
            let kappa = self.kappa_unchecked();
            if !(kappa < 1.0) {
                let hint = match self.largest_admissible_epsilon() {
                    Some(e) => format!("largest admissible ε is {}", fmt_num(e)),
                    None => "no ε is admissible".into(),
                };
                out.push(format!("κ < 1 violated: κ = {} ({hint})", fmt_num(kappa)));
            }
        }
        out
    }

    fn kappa_unchecked(&self) -> f64 {
        let k = self.lipschitz;
        k / (self.gamma1 - self.mu) + self.epsilon * k / (self.mu - self.epsilon * self.gamma2)
    }

    /// Supremum of the `epsilon` for which `kappa < 1`, if any.
    pub fn largest_admissible_epsilon(&self) -> Option<f64> {
        let a = 1.0 - self.lipschitz / (self.gamma1 - self.mu);
        if !(a > 0.0) || !(self.gamma1 > self.mu) {
            return None;
        }
        Some(a * self.mu / (self.lipschitz + a * self.gamma2))
    }

    /// `kappa = K/(gamma1 - mu) + eps K/(mu - eps gamma2)`.
    pub fn contraction_factor(&self) -> Result<f64> {
        if !(self.mu - self.epsilon * self.gamma2 > 0.0) {
            return Err(Error::Assumption(format!(
                "μ−εγ₂ ≤ 0 (μ = {}, ε = {}, γ₂ = {})",
                fmt_num(self.mu),
                fmt_num(self.epsilon),
                fmt_num(self.gamma2)
            )));
        }
        if !(self.gamma1 > self.mu) {
            return Err(Error::Assumption(format!(
                "μ = {} must be below γ₁ = {}",
                fmt_num(self.mu),
                fmt_num(self.gamma1)
            )));
        }
        let kappa = self.kappa_unchecked();
        if !(kappa < 1.0) {
            let detail = match self.largest_admissible_epsilon() {
                Some(e) => format!("no contraction at this ε; largest admissible ε is {}", fmt_num(e)),
                None => "no contraction for any ε".into(),
            };
            return Err(Error::NoContraction {
                factor: kappa,
                detail,
            });
        }
        Ok(kappa)
    }

    /// The `eps -> 0` factor `K/(gamma1 - mu)` governing the frozen-slow problem.
    pub fn limit_contraction(&self) -> Result<f64> {
        if !(self.gamma1 > self.mu) {
            return Err(Error::Assumption(format!(
                "μ = {} must be below γ₁ = {}",
                fmt_num(self.mu),
                fmt_num(self.gamma1)
            )));
        }
        let k = self.lipschitz / (self.gamma1 - self.mu);
        if !(k < 1.0) {
            return Err(Error::NoContraction {
                factor: k,
                detail: "K/(γ₁−μ) ≥ 1".into(),
            });
        }
        Ok(k)
    }

    /// `rho = kappa + K^2 / [(gamma1 - mu)(mu/eps - gamma2)(1 - kappa)]`.
    pub fn rho_factor(&self) -> Result<f64> {
        let kappa = self.contraction_factor()?;
        let gap = self.mu / self.epsilon - self.gamma2;
        if !(gap > 0.0) {
            return Err(Error::Assumption("μ/ε ≤ γ₂".into()));
        }
        let k = self.lipschitz;
        let rho = kappa + k * k / ((self.gamma1 - self.mu) * gap * (1.0 - kappa));
        if !(rho < 1.0) {
            return Err(Error::NoContraction {
                factor: rho,
                detail: "tracking operator is not contractive".into(),
            });
        }
        Ok(rho)
    }

    /// Lipschitz bound `K / [(gamma1 - mu)(1 - kappa)]` of the manifold graph.
    pub fn manifold_lipschitz_bound(&self) -> Result<f64> {
        let kappa = self.contraction_factor()?;
        Ok(self.lipschitz / ((self.gamma1 - self.mu) * (1.0 - kappa)))
    }
}

pub fn contraction_factor(cfg: &WeightConfig) -> Result<f64> {
    cfg.contraction_factor()
}

pub fn manifold_lipschitz_bound(cfg: &WeightConfig) -> Result<f64> {
    cfg.manifold_lipschitz_bound()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Original time, fast kernel `e^{A t/eps}`.
    Original,
    /// Fast time `t/eps`, slow equation scaled by `eps`.
    Rescaled,
    /// Fast time with the slow variable frozen.
    Critical,
}

impl Scaling {
    pub fn fast_scale(self, epsilon: f64) -> f64 {
        match self {
            Scaling::Original => epsilon,
            _ => 1.0,
        }
    }

    pub fn slow_scale(self, epsilon: f64) -> f64 {
        match self {
            Scaling::Original => 1.0,
            Scaling::Rescaled => epsilon,
            Scaling::Critical => 0.0,
        }
    }

    /// Weight exponent `w` of the norm `max e^{w t} ||z(t)||`.
    pub fn weight(self, mu: f64, epsilon: f64) -> f64 {
        mu / self.fast_scale(epsilon)
    }

    /// Scale the OU samples are expected to carry.
    pub fn noise_scale(self, epsilon: f64) -> f64 {
        self.fast_scale(epsilon)
    }

    pub fn contraction(self, cfg: &WeightConfig) -> Result<f64> {
        match self {
            Scaling::Critical => cfg.limit_contraction(),
            _ => cfg.contraction_factor(),
        }
    }
}

/// Sampled path with the weighted sup norm `max_j e^{w t_j} ||z(t_j)||`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTrajectory {
    pub times: Vec<f64>,
    fast: Vec<f64>,
    slow: Vec<f64>,
    fast_dim: usize,
    slow_dim: usize,
    /// Weight exponent `w`.
    pub weight: f64,
}

impl WeightedTrajectory {
    pub fn zeros(times: Vec<f64>, fast_dim: usize, slow_dim: usize, weight: f64) -> Self {
        let n = times.len();
        Self {
            times,
            fast: vec![0.0; n * fast_dim],
            slow: vec![0.0; n * slow_dim],
            fast_dim,
            slow_dim,
            weight,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn fast_at(&self, j: usize) -> &[f64] {
        &self.fast[j * self.fast_dim..(j + 1) * self.fast_dim]
    }

    pub fn slow_at(&self, j: usize) -> &[f64] {
        &self.slow[j * self.slow_dim..(j + 1) * self.slow_dim]
    }

    pub fn fast_at_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.fast[j * self.fast_dim..(j + 1) * self.fast_dim]
    }

    pub fn slow_at_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.slow[j * self.slow_dim..(j + 1) * self.slow_dim]
    }

    pub fn weighted_norm(&self, sys: &SystemSpec) -> f64 {
        (0..self.len())
            .map(|j| {
                (self.weight * self.times[j]).exp()
                    * (sys.fast.norm(self.fast_at(j)) + sys.slow.norm(self.slow_at(j)))
            })
            .fold(0.0, f64::max)
    }

    pub fn weighted_distance(&self, other: &WeightedTrajectory, sys: &SystemSpec) -> f64 {
        let mut dx = vec![0.0; self.fast_dim];
        let mut dy = vec![0.0; self.slow_dim];
        let mut worst: f64 = 0.0;
        for j in 0..self.len() {
            for (d, (a, b)) in dx.iter_mut().zip(self.fast_at(j).iter().zip(other.fast_at(j))) {
                *d = a - b;
            }
            for (d, (a, b)) in dy.iter_mut().zip(self.slow_at(j).iter().zip(other.slow_at(j))) {
                *d = a - b;
            }
            let n = sys.fast.norm(&dx) + sys.slow.norm(&dy);
            worst = worst.max((self.weight * self.times[j]).exp() * n);
        }
        worst
    }
}

/// Exponential-integrator weights for one step `h`.
pub(crate) struct EtdWeights {
    pub h: f64,
    pub fast_exp: BlockOps,
    pub fast_phi1: BlockOps,
    pub fast_phi2: BlockOps,
    pub slow_exp: BlockOps,
    pub slow_phi1: BlockOps,
    pub slow_phi2: BlockOps,
}

impl EtdWeights {
    /// Fast kernel `e^{A h/tau}`; slow weights for `Z = s_time * B h`.
    pub fn new(sys: &SystemSpec, h: f64, tau: f64, slow_time: f64) -> Self {
        let a = sys.fast.operator();
        let b = sys.slow.operator();
        Self {
            h,
            fast_exp: a.phi(0, h / tau),
            fast_phi1: a.phi(1, h / tau),
            fast_phi2: a.phi(2, h / tau),
            slow_exp: b.phi(0, slow_time * h),
            slow_phi1: b.phi(1, slow_time * h),
            slow_phi2: b.phi(2, slow_time * h),
        }
    }
}

/// Evaluates `F_j = f(X_j + eta_j, Y_j)`, `G_j = g(...)` at every node.
pub(crate) fn eval_along(
    sys: &SystemSpec,
    traj: &WeightedTrajectory,
    noise: Option<(&NoisePath, usize)>,
    need_slow: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
    let n = traj.len();
    let mut f = vec![0.0; n * nf];
    let mut g = vec![0.0; n * ns];
    let mut shifted = vec![0.0; nf];
    let mut scratch = vec![0.0; ns];
    for j in 0..n {
        let x = traj.fast_at(j);
        let xin: &[f64] = match noise {
            Some((p, first)) => {
                let eta = p.ou_at(first + j);
                for ((s, a), b) in shifted.iter_mut().zip(x).zip(eta) {
                    *s = a + b;
                }
                &shifted
            }
            None => x,
        };
        let gout: &mut [f64] = if need_slow {
            &mut g[j * ns..(j + 1) * ns]
        } else {
            &mut scratch
        };
        sys.coupling
            .eval_into(xin, traj.slow_at(j), &mut f[j * nf..(j + 1) * nf], gout);
    }
    (f, g)
}

/// Noise handle for a solve: the OU samples must match the scaling unless `sigma = 0`.
pub(crate) fn noise_handle<'a>(
    sys: &SystemSpec,
    noise: &'a NoisePath,
    expected_scale: f64,
    first: usize,
) -> Result<Option<(&'a NoisePath, usize)>> {
    if sys.sigma == 0.0 && !noise.has_ou() {
        return Ok(None);
    }
    let scale = noise.epsilon().ok_or_else(|| {
        Error::InvalidArgument("noise path has no OU samples; build them first".into())
    })?;
    if (scale - expected_scale).abs() > 1e-12 * expected_scale {
        return Err(Error::InvalidArgument(format!(
            "noise OU samples were built at scale {scale}, solver needs {expected_scale}"
        )));
    }
    if noise.sigma() != Some(sys.sigma) {
        return Err(Error::InvalidArgument(format!(
            "noise intensity {:?} differs from system sigma {}",
            noise.sigma(),
            sys.sigma
        )));
    }
    Ok(Some((noise, first)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Backward window length; derived from the tail bound when `None`.
    pub window: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 500,
            window: None,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    /// Index `n` of the first Picard difference `||z_{n+1} - z_n|| <= tol`.
    pub iterations: usize,
    /// Last Picard difference.
    pub residual: f64,
    /// `||z_1 - z_0||` from the zero start.
    pub first_step: f64,
    /// Largest ratio of successive differences above the roundoff floor.
    pub measured_ratio: f64,
    pub ratios: Vec<f64>,
    pub contraction: f64,
    pub window: f64,
    pub dt: f64,
}

/// Window `T` with `(K/(gamma1 - mu)) e^{-(gamma1 - mu) T / tau} * scale < tol / 10`.
pub fn backward_window(sys: &SystemSpec, scaling: Scaling, tol: f64, scale: f64) -> f64 {
    let tau = scaling.fast_scale(sys.epsilon);
    let gap = sys.gamma1() - sys.mu;
    let lead = sys.lipschitz() / gap * scale.max(1.0);
    let log = (10.0 * lead / tol).ln().max(1.0);
    tau * log / gap
}

/// Truncation tail `(K/(gamma1 - mu)) e^{-(gamma1 - mu) T / tau}`.
pub fn window_tail(sys: &SystemSpec, scaling: Scaling, window: f64) -> f64 {
    let tau = scaling.fast_scale(sys.epsilon);
    let gap = sys.gamma1() - sys.mu;
    sys.lipschitz() / gap * (-gap * window / tau).exp()
}

/// Default step: `min(eps/10, T/100)` in original time, `min(0.1, T/100)` otherwise.
pub fn default_step(sys: &SystemSpec, scaling: Scaling, window: f64) -> f64 {
    let cap = match scaling {
        Scaling::Original => sys.epsilon / 10.0,
        _ => 0.1,
    };
    cap.min(window / 100.0)
}

/// Noise grid covering the backward window (for `|Y0| <= scale`) and `forward` extra time.
pub fn backward_grid(
    sys: &SystemSpec,
    scaling: Scaling,
    tol: f64,
    scale: f64,
    forward: f64,
) -> Result<TimeGrid> {
    let t = backward_window(sys, scaling, tol, scale);
    let dt = default_step(sys, scaling, t);
    // one spare step so rounding never truncates the window
    TimeGrid::covering(t + dt, forward, dt)
}

struct BackwardProblem<'a> {
    sys: &'a SystemSpec,
    y0: &'a [f64],
    noise: Option<(&'a NoisePath, usize)>,
    weights: EtdWeights,
    tau: f64,
    lambda: f64,
    times: Vec<f64>,
    weight: f64,
}

impl<'a> BackwardProblem<'a> {
    fn new(
        y0: &'a [f64],
        sys: &'a SystemSpec,
        noise: &'a NoisePath,
        scaling: Scaling,
        window: f64,
    ) -> Result<Self> {
        check_len("slow initial value", sys.slow_dim(), y0.len())?;
        let h = noise.dt();
        let n = (window / h - 1e-9).ceil().max(1.0) as usize;
        let t_start = -(n as f64) * h;
        let first = noise.node(t_start).map_err(|_| {
            Error::Window(format!(
                "backward window {} exceeds stored noise (t_minus = {}); enlarge t_minus",
                n as f64 * h,
                noise.grid().t_minus()
            ))
        })?;
        let eps = sys.epsilon;
        let tau = scaling.fast_scale(eps);
        let lambda = scaling.slow_scale(eps);
        let noise = noise_handle(sys, noise, scaling.noise_scale(eps), first)?;
        let times = (0..=n).map(|j| t_start + j as f64 * h).collect();
        Ok(Self {
            sys,
            y0,
            noise,
            weights: EtdWeights::new(sys, h, tau, -lambda),
            tau,
            lambda,
            times,
            weight: scaling.weight(sys.mu, eps),
        })
    }

    fn zero(&self) -> WeightedTrajectory {
        WeightedTrajectory::zeros(
            self.times.clone(),
            self.sys.fast_dim(),
            self.sys.slow_dim(),
            self.weight,
        )
    }

    fn apply(&self, z: &WeightedTrajectory) -> WeightedTrajectory {
        let sys = self.sys;
        let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
        let n = self.times.len();
        let need_slow = self.lambda != 0.0;
        let (f, g) = eval_along(sys, z, self.noise, need_slow);
        let w = &self.weights;
        let mut out = self.zero();
        let c = w.h / self.tau;
        let mut df = vec![0.0; nf];
        for j in 0..n - 1 {
            let (lo, hi) = (&f[j * nf..(j + 1) * nf], &f[(j + 1) * nf..(j + 2) * nf]);
            for ((d, a), b) in df.iter_mut().zip(hi).zip(lo) {
                *d = a - b;
            }
            let (prev, next) = out.fast.split_at_mut((j + 1) * nf);
            let next = &mut next[..nf];
            w.fast_exp.apply_add(&prev[j * nf..], 1.0, next);
            w.fast_phi1.apply_add(lo, c, next);
            w.fast_phi2.apply_add(&df, c, next);
        }

        // slow block backward from Y(0) = Y0
        out.slow_at_mut(n - 1).copy_from_slice(self.y0);
        let lh = self.lambda * w.h;
        let mut dg = vec![0.0; ns];
        for j in (0..n - 1).rev() {
            let (lo, hi) = (&g[j * ns..(j + 1) * ns], &g[(j + 1) * ns..(j + 2) * ns]);
            let (head, tail) = out.slow.split_at_mut((j + 1) * ns);
            let cur = &mut head[j * ns..];
            w.slow_exp.apply_add(&tail[..ns], 1.0, cur);
            if need_slow {
                for ((d, a), b) in dg.iter_mut().zip(hi).zip(lo) {
                    *d = a - b;
                }
                w.slow_phi1.apply_add(hi, -lh, cur);
                w.slow_phi2.apply_add(&dg, lh, cur);
            }
        }
        out
    }

    /// Direct (non-recursive) quadrature of the fast integral at `t = 0`.
    fn fast_integral_at_zero(&self, z: &WeightedTrajectory) -> Vec<f64> {
        let sys = self.sys;
        let nf = sys.fast_dim();
        let n = self.times.len();
        let (f, _) = eval_along(sys, z, self.noise, false);
        let h = self.weights.h;
        let a = sys.fast.operator();
        let mut acc = vec![0.0; nf];
        let mut local = vec![0.0; nf];
        for j in 0..n - 1 {
            let (lo, hi) = (&f[j * nf..(j + 1) * nf], &f[(j + 1) * nf..(j + 2) * nf]);
            let df: Vec<f64> = hi.iter().zip(lo).map(|(a, b)| a - b).collect();
            local.iter_mut().for_each(|v| *v = 0.0);
            self.weights.fast_phi1.apply_add(lo, h / self.tau, &mut local);
            self.weights.fast_phi2.apply_add(&df, h / self.tau, &mut local);
            // propagate from t_{j+1} to 0
            a.propagator(-self.times[j + 1] / self.tau)
                .apply_add(&local, 1.0, &mut acc);
        }
        acc
    }
}

/// One application of the backward operator to `traj` (grid taken from `traj`).
#[allow(non_snake_case)]
pub fn apply_J(
    traj: &WeightedTrajectory,
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    scaling: Scaling,
) -> Result<WeightedTrajectory> {
    let window = -traj.times.first().copied().unwrap_or(0.0);
    let problem = BackwardProblem::new(y0, sys, noise, scaling, window)?;
    if problem.times.len() != traj.len() {
        return Err(Error::DimensionMismatch {
            what: "trajectory nodes",
            expected: problem.times.len(),
            got: traj.len(),
        });
    }
    Ok(problem.apply(traj))
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub trajectory: WeightedTrajectory,
    pub diagnostics: SolveDiagnostics,
}

impl BackwardSolution {
    /// Fast component at `t = 0`.
    pub fn manifold_value(&self) -> Vec<f64> {
        self.trajectory.fast_at(self.trajectory.len() - 1).to_vec()
    }
}

/// Picard iteration of the backward operator from the zero trajectory.
pub fn solve_backward_fixed_point(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    scaling: Scaling,
    opts: &SolveOptions,
) -> Result<BackwardSolution> {
    check_len("slow initial value", sys.slow_dim(), y0.len())?;
    let kappa = scaling.contraction(&sys.weights())?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let scale = sys.slow.norm(y0);
    let window = match opts.window {
        Some(t) => {
            let tail = window_tail(sys, scaling, t) * scale.max(1.0);
            if tail > opts.tol {
                return Err(Error::Window(format!(
                    "truncation tail {tail:.3e} exceeds tol {:.3e}; use a window of at least {}",
                    opts.tol,
                    fmt_num(backward_window(sys, scaling, opts.tol, scale))
                )));
            }
            t
        }
        None => backward_window(sys, scaling, opts.tol, scale),
    };
    let problem = BackwardProblem::new(y0, sys, noise, scaling, window)?;
    picard(&problem, kappa, opts, scale, window)
}

fn picard(
    problem: &BackwardProblem<'_>,
    kappa: f64,
    opts: &SolveOptions,
    scale: f64,
    window: f64,
) -> Result<BackwardSolution> {
    let sys = problem.sys;
    let floor = 1e-13 * (1.0 + scale);
    let mut z = problem.zero();
    let mut next = problem.apply(&z);
    let first_step = next.weighted_distance(&z, sys);
    let mut prev_diff = first_step;
    let mut ratios = Vec::new();
    for n in 1..=opts.max_iters {
        z = next;
        next = problem.apply(&z);
        let d = next.weighted_distance(&z, sys);
        if prev_diff > floor && d > floor {
            ratios.push(d / prev_diff);
        }
        if !d.is_finite() {
            break;
        }
        if d <= opts.tol {
            let measured_ratio = ratios.iter().cloned().fold(0.0, f64::max);
            return Ok(BackwardSolution {
                trajectory: next,
                diagnostics: SolveDiagnostics {
                    iterations: n,
                    residual: d,
                    first_step,
                    measured_ratio,
                    ratios,
                    contraction: kappa,
                    window,
                    dt: problem.weights.h,
                },
            });
        }
        prev_diff = d;
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        residual: prev_diff,
    })
}

/// `H(omega, Y0)`: fast value at `t = 0` of the backward fixed point, original scaling.
pub fn evaluate_manifold(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    Ok(solve_backward_fixed_point(y0, sys, noise, Scaling::Original, opts)?.manifold_value())
}

/// `h(omega, Y0) = H(omega, Y0) + eta(omega)`: the graph in untransformed variables.
pub fn evaluate_manifold_with_offset(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    let mut h = evaluate_manifold(y0, sys, noise, opts)?;
    if noise.has_ou() {
        let eta = noise.ou_at(noise.node(0.0)?);
        for (a, b) in h.iter_mut().zip(eta) {
            *a += b;
        }
    }
    Ok(h)
}

/// The fast integral at `t = 0` of a converged solution, summed directly
/// instead of recursively. Agrees with `manifold_value` up to the residual.
pub fn manifold_integral(
    solution: &BackwardSolution,
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    scaling: Scaling,
) -> Result<Vec<f64>> {
    let problem = BackwardProblem::new(y0, sys, noise, scaling, solution.diagnostics.window)?;
    Ok(problem.fast_integral_at_zero(&solution.trajectory))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldSample {
    pub y0: Vec<f64>,
    pub h: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub measured_ratio: f64,
}

/// Sampled graph `Y0 -> H(omega, Y0)` for one noise realization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldGraph {
    pub seed: u64,
    pub epsilon: f64,
    pub samples: Vec<ManifoldSample>,
}

/// Solves for every `Y0` in parallel; output order follows the input.
pub fn sample_manifold_graph(
    y0s: &[Vec<f64>],
    sys: &SystemSpec,
    noise: &NoisePath,
    scaling: Scaling,
    opts: &SolveOptions,
) -> Result<ManifoldGraph> {
    let samples = y0s
        .par_iter()
        .enumerate()
        .map(|(i, y0)| {
            solve_backward_fixed_point(y0, sys, noise, scaling, opts)
                .map(|s| ManifoldSample {
                    y0: y0.clone(),
                    h: s.manifold_value(),
                    iterations: s.diagnostics.iterations,
                    residual: s.diagnostics.residual,
                    measured_ratio: s.diagnostics.measured_ratio,
                })
                .map_err(|e| Error::Solver {
                    module: "lyapunov_perron",
                    sample: format!("seed {} sample {i}", noise.seed()),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ManifoldGraph {
        seed: noise.seed(),
        epsilon: sys.epsilon,
        samples,
    })
}

/// Largest `||h_i - h_j||_1 / ||y_i - y_j||_2` over sample pairs; coincident `Y0` are skipped.
pub fn empirical_lipschitz(graph: &ManifoldGraph, sys: &SystemSpec) -> Result<f64> {
    if graph.samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two graph samples".into()));
    }
    let s = &graph.samples;
    let mut worst: f64 = 0.0;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let dy = sys.slow.norm(&crate::spectral::sub(&s[i].y0, &s[j].y0));
            if dy == 0.0 {
                continue;
            }
            let dh = sys.fast.norm(&crate::spectral::sub(&s[i].h, &s[j].h));
            worst = worst.max(dh / dy);
        }
    }
    Ok(worst)
}

impl ManifoldGraph {
    pub const CSV_HEADER: &'static str =
        "seed,epsilon,sample_id,block,mode_index,y0_value,h_value,iterations,residual,measured_ratio";

    /// One row per coefficient: slow rows carry `Y0`, fast rows carry `H`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for (id, s) in self.samples.iter().enumerate() {
            let tail = format!("{},{:e},{:.6}", s.iterations, s.residual, s.measured_ratio);
            for (k, v) in s.y0.iter().enumerate() {
                rows.push(format!(
                    "{},{},{id},slow,{k},{v:.12e},,{tail}",
                    self.seed, self.epsilon
                ));
            }
            for (k, v) in s.h.iter().enumerate() {
                rows.push(format!(
                    "{},{},{id},fast,{k},,{v:.12e},{tail}",
                    self.seed, self.epsilon
                ));
            }
        }
        rows
    }
}
