//! Exponential tracking: for an arbitrary initial state `Z0`, find the point
//! `Zbar0` on the slow manifold whose orbit shadows the orbit of `Z0` at rate
//! at least `mu/eps`.
//!
//! With the reference orbit `Z(t) = (X, Y)(t)` of `Z0` fixed, the correction
//! `(U, V)` solves on `[0, T+]`
//!
//! ```text
//! U(t) = e^{A t/eps} U(0) + (1/eps) int_0^t e^{A (t-s)/eps} dF(s) ds
//! V(t) = - int_t^{T+} e^{B (t-s)} dG(s) ds
//! U(0) = -X0 + H(omega, Y0 + V(0))
//! ```
//!
//! where `dF`, `dG` are the increments of `f`, `g` between the shadowing and
//! the reference orbit. `Zbar0 = Z0 + (U(0), V(0))`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrate::{fitted_decay_exponent, integrate_full, Scheme, Trajectory};
use crate::lyapunov_perron::{
    backward_window, default_step, eval_along, evaluate_manifold, EtdWeights, Scaling,
    SolveDiagnostics, SolveOptions, WeightConfig, WeightedTrajectory,
};
use crate::noise::{NoisePath, TimeGrid};
use crate::spectral::StateVector;
use crate::system::SystemSpec;

pub fn rho_factor(cfg: &WeightConfig) -> Result<f64> {
    cfg.rho_factor()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Window on which the tracking bound is checked; the Picard
    /// differences are measured there too.
    pub horizon: f64,
}

impl TrackingOptions {
    pub fn new(tol: f64, horizon: f64) -> Self {
        Self {
            tol,
            max_iters: 500,
            horizon,
        }
    }

    fn nested(&self) -> SolveOptions {
        SolveOptions::with_tol(self.tol * 0.1)
    }
}

/// `T+ = horizon + ln(10/tol) / (mu/eps - gamma2)`.
pub fn tracking_window(sys: &SystemSpec, tol: f64, horizon: f64) -> f64 {
    horizon + (10.0 / tol).ln() / (sys.mu / sys.epsilon - sys.gamma2())
}

/// Noise grid for tracking: backward window for the nested manifold solves
/// (with `|Y0| <= scale`) and the forward window `T+`.
pub fn tracking_grid(sys: &SystemSpec, tol: f64, scale: f64, horizon: f64) -> Result<TimeGrid> {
    let back = backward_window(sys, Scaling::Original, tol * 0.1, scale);
    let forward = tracking_window(sys, tol, horizon);
    let dt = default_step(sys, Scaling::Original, back);
    TimeGrid::covering(back + dt, forward + dt, dt)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackingPair {
    pub z0: StateVector,
    pub zbar0: StateVector,
    pub dt: f64,
    pub t_plus: f64,
    pub rho: f64,
    pub kappa: f64,
    /// `1/(1 - kappa)`.
    pub decay_prefactor: f64,
    pub diagnostics: SolveDiagnostics,
}

struct TrackingProblem<'a> {
    sys: &'a SystemSpec,
    noise: &'a NoisePath,
    z0: &'a StateVector,
    reference: WeightedTrajectory,
    ref_f: Vec<f64>,
    ref_g: Vec<f64>,
    forward: EtdWeights,
    backward: EtdWeights,
    noise_first: Option<(&'a NoisePath, usize)>,
    check_nodes: usize,
    nested: SolveOptions,
}

impl<'a> TrackingProblem<'a> {
    fn new(
        z0: &'a StateVector,
        sys: &'a SystemSpec,
        noise: &'a NoisePath,
        opts: &TrackingOptions,
    ) -> Result<Self> {
        let h = noise.dt();
        let t_plus = tracking_window(sys, opts.tol, opts.horizon);
        let orbit = integrate_full(z0, sys, noise, t_plus, h, Scheme::Trapezoidal)?;
        let weight = sys.mu / sys.epsilon;
        let mut reference = WeightedTrajectory::zeros(orbit.times.clone(), sys.fast_dim(), sys.slow_dim(), weight);
        for j in 0..orbit.len() {
            reference.fast_at_mut(j).copy_from_slice(orbit.fast_at(j));
            reference.slow_at_mut(j).copy_from_slice(orbit.slow_at(j));
        }
        let origin = noise.node(0.0)?;
        let noise_first = crate::lyapunov_perron::noise_handle(sys, noise, sys.epsilon, origin)?;
        let (ref_f, ref_g) = eval_along(sys, &reference, noise_first, true);
        let check_nodes = ((opts.horizon / h).round() as usize + 1).min(orbit.len());
        Ok(Self {
            sys,
            noise,
            z0,
            reference,
            ref_f,
            ref_g,
            forward: EtdWeights::new(sys, h, sys.epsilon, 1.0),
            backward: EtdWeights::new(sys, h, sys.epsilon, -1.0),
            noise_first,
            check_nodes,
            nested: opts.nested(),
        })
    }

    fn zero(&self) -> WeightedTrajectory {
        WeightedTrajectory::zeros(
            self.reference.times.clone(),
            self.sys.fast_dim(),
            self.sys.slow_dim(),
            self.reference.weight,
        )
    }

    fn apply(&self, uv: &WeightedTrajectory) -> Result<WeightedTrajectory> {
        let sys = self.sys;
        let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
        let n = self.reference.len();
        let mut shadow = self.reference.clone();
        for j in 0..n {
            for (a, b) in shadow.fast_at_mut(j).iter_mut().zip(uv.fast_at(j)) {
                *a += b;
            }
            for (a, b) in shadow.slow_at_mut(j).iter_mut().zip(uv.slow_at(j)) {
                *a += b;
            }
        }
        let (mut df, mut dg) = eval_along(sys, &shadow, self.noise_first, true);
        for (a, b) in df.iter_mut().zip(&self.ref_f) {
            *a -= b;
        }
        for (a, b) in dg.iter_mut().zip(&self.ref_g) {
            *a -= b;
        }

        let mut out = self.zero();
        // V backward from V(T+) = 0
        let w = &self.backward;
        let mut step = vec![0.0; ns];
        for j in (0..n - 1).rev() {
            let (lo, hi) = (&dg[j * ns..(j + 1) * ns], &dg[(j + 1) * ns..(j + 2) * ns]);
            let next = out.slow_at(j + 1).to_vec();
            let cur = out.slow_at_mut(j);
            w.slow_exp.apply_add(&next, 1.0, cur);
            for ((d, a), b) in step.iter_mut().zip(hi).zip(lo) {
                *d = a - b;
            }
            w.slow_phi1.apply_add(hi, -w.h, cur);
            w.slow_phi2.apply_add(&step, w.h, cur);
        }

        // U(0) from the manifold at the input's V(0)
        let y: Vec<f64> = self.z0.slow.iter().zip(uv.slow_at(0)).map(|(a, b)| a + b).collect();
        let h = evaluate_manifold(&y, sys, self.noise, &self.nested)?;
        let u0: Vec<f64> = h.iter().zip(&self.z0.fast).map(|(a, b)| a - b).collect();
        out.fast_at_mut(0).copy_from_slice(&u0);
        let w = &self.forward;
        let c = w.h / sys.epsilon;
        let mut step = vec![0.0; nf];
        for j in 0..n - 1 {
            let (lo, hi) = (&df[j * nf..(j + 1) * nf], &df[(j + 1) * nf..(j + 2) * nf]);
            for ((d, a), b) in step.iter_mut().zip(hi).zip(lo) {
                *d = a - b;
            }
            let prev = out.fast_at(j).to_vec();
            let next = out.fast_at_mut(j + 1);
            w.fast_exp.apply_add(&prev, 1.0, next);
            w.fast_phi1.apply_add(lo, c, next);
            w.fast_phi2.apply_add(&step, c, next);
        }
        Ok(out)
    }

    /// Weighted distance over the checked window `[0, horizon]`.
    fn distance(&self, a: &WeightedTrajectory, b: &WeightedTrajectory) -> f64 {
        let sys = self.sys;
        (0..self.check_nodes)
            .map(|j| {
                let d = sys.fast.norm(&crate::spectral::sub(a.fast_at(j), b.fast_at(j)))
                    + sys.slow.norm(&crate::spectral::sub(a.slow_at(j), b.slow_at(j)));
                (a.weight * a.times[j]).exp() * d
            })
            .fold(0.0, f64::max)
    }
}

/// One application of the tracking operator to the correction `uv`.
#[allow(non_snake_case)]
pub fn apply_I(
    uv: &WeightedTrajectory,
    z0: &StateVector,
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &TrackingOptions,
) -> Result<WeightedTrajectory> {
    let problem = TrackingProblem::new(z0, sys, noise, opts)?;
    if uv.len() != problem.reference.len() {
        return Err(Error::DimensionMismatch {
            what: "tracking nodes",
            expected: problem.reference.len(),
            got: uv.len(),
        });
    }
    problem.apply(uv)
}

/// Picard iteration of the tracking operator from zero.
pub fn solve_tracking_point(
    z0: &StateVector,
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &TrackingOptions,
) -> Result<TrackingPair> {
    let cfg = sys.weights();
    let kappa = cfg.contraction_factor()?;
    let rho = cfg.rho_factor()?;
    let problem = TrackingProblem::new(z0, sys, noise, opts)?;
    let (uv, diagnostics) = picard(&problem, rho, opts)?;
    let zbar0 = StateVector::new(
        z0.fast.iter().zip(uv.fast_at(0)).map(|(a, b)| a + b).collect(),
        z0.slow.iter().zip(uv.slow_at(0)).map(|(a, b)| a + b).collect(),
    );
    Ok(TrackingPair {
        z0: z0.clone(),
        zbar0,
        dt: noise.dt(),
        t_plus: *problem.reference.times.last().unwrap(),
        rho,
        kappa,
        decay_prefactor: 1.0 / (1.0 - kappa),
        diagnostics,
    })
}

/// Solves and also returns the converged correction for residual checks.
pub fn solve_tracking_correction(
    z0: &StateVector,
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &TrackingOptions,
) -> Result<(WeightedTrajectory, SolveDiagnostics)> {
    let rho = sys.weights().rho_factor()?;
    let problem = TrackingProblem::new(z0, sys, noise, opts)?;
    picard(&problem, rho, opts)
}

/// Weighted distance over `[0, horizon]` between two corrections.
pub fn tracking_distance(
    a: &WeightedTrajectory,
    b: &WeightedTrajectory,
    z0: &StateVector,
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &TrackingOptions,
) -> Result<f64> {
    let problem = TrackingProblem::new(z0, sys, noise, opts)?;
    Ok(problem.distance(a, b))
}

fn picard(
    problem: &TrackingProblem<'_>,
    rho: f64,
    opts: &TrackingOptions,
) -> Result<(WeightedTrajectory, SolveDiagnostics)> {
    let scale = 1.0 + problem.z0.fast.iter().chain(&problem.z0.slow).map(|v| v.abs()).fold(0.0, f64::max);
    let floor = 1e-12 * scale;
    let mut z = problem.zero();
    let mut next = problem.apply(&z)?;
    let first_step = problem.distance(&next, &z);
    let mut prev = first_step;
    let mut ratios = Vec::new();
    for n in 1..=opts.max_iters {
        z = next;
        next = problem.apply(&z)?;
        let d = problem.distance(&next, &z);
        if prev > floor && d > floor {
            ratios.push(d / prev);
        }
        if d <= opts.tol {
            let measured_ratio = ratios.iter().cloned().fold(0.0, f64::max);
            return Ok((
                next,
                SolveDiagnostics {
                    iterations: n,
                    residual: d,
                    first_step,
                    measured_ratio,
                    ratios,
                    contraction: rho,
                    window: *problem.reference.times.last().unwrap(),
                    dt: problem.forward.h,
                },
            ));
        }
        if !d.is_finite() {
            break;
        }
        prev = d;
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        residual: prev,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrackingReport {
    pub seed: u64,
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    /// `||Phi(t, Z0) - Phi(t, Zbar0)|| e^{mu t/eps} (1 - kappa) / ||Z0 - Zbar0||`.
    pub weighted_ratios: Vec<f64>,
    pub max_weighted_ratio: f64,
    pub fitted_exponent: Option<f64>,
    /// `mu / eps`.
    pub guaranteed_rate: f64,
}

impl TrackingReport {
    pub const CSV_HEADER: &'static str = "seed,epsilon,t,distance,weighted_ratio,fitted_exponent";

    pub fn csv_rows(&self) -> Vec<String> {
        let fit = self.fitted_exponent.map(|v| format!("{v:.6}")).unwrap_or_default();
        self.times
            .iter()
            .zip(&self.distances)
            .zip(&self.weighted_ratios)
            .map(|((t, d), r)| format!("{},{},{t:.10},{d:.12e},{r:.9},{fit}", self.seed, self.epsilon))
            .collect()
    }
}

/// Integrates both orbits over `[0, horizon]` and measures the tracking bound.
pub fn verify_tracking(
    pair: &TrackingPair,
    sys: &SystemSpec,
    noise: &NoisePath,
    horizon: f64,
) -> Result<TrackingReport> {
    noise.require_window(0.0, horizon)?;
    let a = integrate_full(&pair.z0, sys, noise, horizon, pair.dt, Scheme::Trapezoidal)?;
    let b = integrate_full(&pair.zbar0, sys, noise, horizon, pair.dt, Scheme::Trapezoidal)?;
    Ok(report_from(&a, &b, pair.kappa, sys, noise.seed()))
}

fn report_from(a: &Trajectory, b: &Trajectory, kappa: f64, sys: &SystemSpec, seed: u64) -> TrackingReport {
    let distances = a.distances(b, sys);
    let rate = sys.mu / sys.epsilon;
    let d0 = distances[0];
    let weighted_ratios: Vec<f64> = if d0 == 0.0 {
        vec![0.0; distances.len()]
    } else {
        a.times
            .iter()
            .zip(&distances)
            .map(|(t, d)| d * (rate * t).exp() * (1.0 - kappa) / d0)
            .collect()
    };
    let fitted_exponent = if d0 == 0.0 {
        None
    } else {
        // stop before the roundoff floor of the difference of two orbits
        let scale = a.fast_at(0).iter().chain(a.slow_at(0)).map(|v| v.abs()).fold(1.0, f64::max);
        fitted_decay_exponent(&a.times, &distances, (1e-9 * d0).max(1e-13 * scale))
    };
    TrackingReport {
        seed,
        epsilon: sys.epsilon,
        max_weighted_ratio: weighted_ratios.iter().cloned().fold(0.0, f64::max),
        times: a.times.clone(),
        distances,
        weighted_ratios,
        fitted_exponent,
        guaranteed_rate: rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{LinearCoupling, NonlinearityPair};
    use crate::noise::sample_noise;
    use crate::spectral::{FastLinearPart, ModeBasis, SlowLinearPart};
    use std::sync::Arc;

    fn scalar(k: f64, c: f64, eps: f64, mu: f64) -> SystemSpec {
        SystemSpec {
            name: "scalar".into(),
            basis: ModeBasis::new(1, std::f64::consts::PI).unwrap(),
            fast: FastLinearPart::scalar(vec![1.0], 1.0).unwrap(),
            slow: SlowLinearPart::identity(1, 1).unwrap(),
            coupling: NonlinearityPair::new(Arc::new(LinearCoupling::scalar(0.0, k, c, 0.0)), 1, 1),
            mu,
            epsilon: eps,
            sigma: 0.0,
            noise_modes: 0,
        }
    }

    fn noise(sys: &SystemSpec, opts: &TrackingOptions) -> NoisePath {
        let g = tracking_grid(sys, opts.tol, 3.0, opts.horizon).unwrap();
        sample_noise(g, &sys.fast, sys.noise_modes, sys.sigma, sys.epsilon, 1).unwrap()
    }

    #[test]
    fn rho_examples() {
        let cfg = WeightConfig {
            mu: 1.0,
            epsilon: 0.1,
            gamma1: 2.0,
            gamma2: 0.0,
            lipschitz: 0.5,
        };
        assert!((rho_factor(&cfg).unwrap() - 0.605556).abs() < 1e-6);
    }

    #[test]
    fn decoupled_system_tracks_onto_the_slow_axis() {
        let mut sys = scalar(0.0, 0.0, 0.05, 0.5);
        sys.coupling = NonlinearityPair::zero(1, 1);
        let opts = TrackingOptions::new(1e-10, 1.0);
        let p = noise(&sys, &opts);
        let z0 = StateVector::new(vec![1.3], vec![-0.7]);
        let pair = solve_tracking_point(&z0, &sys, &p, &opts).unwrap();
        assert!(pair.zbar0.fast[0].abs() < 1e-14);
        assert!((pair.zbar0.slow[0] + 0.7).abs() < 1e-14);
        let rep = verify_tracking(&pair, &sys, &p, 1.0).unwrap();
        for (t, r) in rep.times.iter().zip(&rep.weighted_ratios) {
            let expect = ((0.5 - 1.0) * t / 0.05).exp();
            assert!((r - expect).abs() < 1e-9 * (1.0 + expect), "t {t}: {r} vs {expect}");
        }
        let fit = rep.fitted_exponent.unwrap();
        assert!((fit - 20.0).abs() < 0.02 * 20.0, "{fit}");
    }

    #[test]
    fn point_on_manifold_is_its_own_tracking_point() {
        let sys = scalar(0.4, 0.3, 0.05, 0.3);
        let opts = TrackingOptions::new(1e-10, 1.0);
        let p = noise(&sys, &opts);
        let h = evaluate_manifold(&[0.8], &sys, &p, &opts.nested()).unwrap();
        let z0 = StateVector::new(h, vec![0.8]);
        let pair = solve_tracking_point(&z0, &sys, &p, &opts).unwrap();
        assert!((pair.zbar0.fast[0] - z0.fast[0]).abs() < 1e-9);
        assert!((pair.zbar0.slow[0] - z0.slow[0]).abs() < 1e-9);
    }

    #[test]
    fn linear_benchmark_projects_along_the_fast_eigenvector() {
        let (k, c, eps) = (0.4, 0.3, 0.05);
        let sys = scalar(k, c, eps, 0.3);
        let opts = TrackingOptions::new(1e-10, 1.0);
        let back = backward_window(&sys, Scaling::Original, opts.tol * 0.1, 3.0);
        let g = TimeGrid::covering(back + 1.0, tracking_window(&sys, opts.tol, 1.0) + 1.0, eps / 40.0).unwrap();
        let p = sample_noise(g, &sys.fast, 0, 0.0, eps, 1).unwrap();
        let z0 = StateVector::new(vec![1.0], vec![0.5]);
        let pair = solve_tracking_point(&z0, &sys, &p, &opts).unwrap();

        // one-step map of the trapezoid-exponential scheme: M1 z_{j+1} = M0 z_j
        let h = p.dt();
        let q = -h / eps;
        let e = q.exp();
        let phi1 = (e - 1.0) / q;
        let phi2 = (e - 1.0 - q) / (q * q);
        let m1 = [[1.0, -(h / eps) * phi2 * k], [-0.5 * h * c, 1.0]];
        let m0 = [[e, (h / eps) * (phi1 - phi2) * k], [0.5 * h * c, 1.0]];
        let det1 = m1[0][0] * m1[1][1] - m1[0][1] * m1[1][0];
        let inv = [[m1[1][1] / det1, -m1[0][1] / det1], [-m1[1][0] / det1, m1[0][0] / det1]];
        let mut pm = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                pm[i][j] = inv[i][0] * m0[0][j] + inv[i][1] * m0[1][j];
            }
        }
        let tr = pm[0][0] + pm[1][1];
        let det = pm[0][0] * pm[1][1] - pm[0][1] * pm[1][0];
        let disc = (tr * tr / 4.0 - det).sqrt();
        let (ls, lf) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let vs = [pm[0][1], ls - pm[0][0]];
        let vf = [pm[0][1], lf - pm[0][0]];
        // z0 = a vs + b vf; the tracking point is a vs
        let d = vs[0] * vf[1] - vs[1] * vf[0];
        let a = (z0.fast[0] * vf[1] - z0.slow[0] * vf[0]) / d;
        assert!((pair.zbar0.fast[0] - a * vs[0]).abs() < 1e-8, "{} vs {}", pair.zbar0.fast[0], a * vs[0]);
        assert!((pair.zbar0.slow[0] - a * vs[1]).abs() < 1e-8, "{} vs {}", pair.zbar0.slow[0], a * vs[1]);

        // continuous eigen-decomposition, second order in dt
        let b = 1.0 / eps;
        let lc = (-b + (b * b + 4.0 * c * k / eps).sqrt()) / 2.0;
        let lfc = (-b - (b * b + 4.0 * c * k / eps).sqrt()) / 2.0;
        let (vc, vfc) = ([lc / c, 1.0], [lfc / c, 1.0]);
        let dc = vc[0] * vfc[1] - vc[1] * vfc[0];
        let ac = (z0.fast[0] * vfc[1] - z0.slow[0] * vfc[0]) / dc;
        assert!((pair.zbar0.slow[0] - ac).abs() < 1e-6, "{} vs {ac}", pair.zbar0.slow[0]);

        let rep = verify_tracking(&pair, &sys, &p, 1.0).unwrap();
        assert!(rep.max_weighted_ratio <= 1.1, "{}", rep.max_weighted_ratio);
        assert!(rep.fitted_exponent.unwrap() >= 0.9 * sys.mu / eps);
        assert!(pair.diagnostics.measured_ratio <= pair.rho + 0.05);
    }
}
