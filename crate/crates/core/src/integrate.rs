//! Forward integration of the full random system and of the reduced slow
//! system on its manifold, plus the invariance residual.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lyapunov_perron::{evaluate_manifold, EtdWeights, SolveOptions};
use crate::noise::NoisePath;
use crate::spectral::{check_len, StateVector};
use crate::system::SystemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact linear propagators, nonlinearity frozen at the left node (order 1).
    ExponentialEuler,
    /// Nonlinearity linear in time over each step, solved implicitly (order 2).
    /// Uses the same weights as the manifold solvers, so their fixed points
    /// are exact discrete solutions of this scheme.
    Trapezoidal,
}

/// States on the forward grid `t_j = j dt`, `j = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    fast: Vec<f64>,
    slow: Vec<f64>,
    fast_dim: usize,
    slow_dim: usize,
    pub scheme: Scheme,
    pub dt: f64,
    pub epsilon: f64,
}

impl Trajectory {
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

    pub fn state(&self, j: usize) -> StateVector {
        StateVector::new(self.fast_at(j).to_vec(), self.slow_at(j).to_vec())
    }

    pub fn last(&self) -> StateVector {
        self.state(self.len() - 1)
    }

    /// `||z_j - w_j||` per node for two trajectories on the same grid.
    pub fn distances(&self, other: &Trajectory, sys: &SystemSpec) -> Vec<f64> {
        (0..self.len().min(other.len()))
            .map(|j| {
                sys.fast.norm(&crate::spectral::sub(self.fast_at(j), other.fast_at(j)))
                    + sys.slow.norm(&crate::spectral::sub(self.slow_at(j), other.slow_at(j)))
            })
            .collect()
    }

    /// Fast block in untransformed variables: `X + eta(theta_t omega)`.
    pub fn untransformed(&self, noise: &NoisePath) -> Result<Trajectory> {
        let mut out = self.clone();
        if !noise.has_ou() {
            return Ok(out);
        }
        for j in 0..self.len() {
            let eta = noise.ou_at(noise.node(self.times[j])?);
            let nf = self.fast_dim;
            for (a, b) in out.fast[j * nf..(j + 1) * nf].iter_mut().zip(eta) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub const CSV_HEADER: &'static str = "t,block,mode_index,value";

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::with_capacity(self.len() * (self.fast_dim + self.slow_dim));
        for j in 0..self.len() {
            let t = self.times[j];
            for (k, v) in self.fast_at(j).iter().enumerate() {
                rows.push(format!("{t:.10},fast,{k},{v:.12e}"));
            }
            for (k, v) in self.slow_at(j).iter().enumerate() {
                rows.push(format!("{t:.10},slow,{k},{v:.12e}"));
            }
        }
        rows
    }
}

/// Step count and noise stride for `[0, t_plus]` at step `dt`.
fn forward_layout(noise: &NoisePath, t_plus: f64, dt: f64) -> Result<(usize, usize, usize)> {
    if !(dt > 0.0) || !(t_plus >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and t_plus >= 0 (dt = {dt}, t_plus = {t_plus})"
        )));
    }
    let stride = (dt / noise.dt()).round();
    if stride < 1.0 || (stride * noise.dt() - dt).abs() > 1e-9 * dt {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} must be a positive multiple of the noise step {}",
            noise.dt()
        )));
    }
    let steps = (t_plus / dt - 1e-9).ceil().max(0.0) as usize;
    noise.require_window(0.0, steps as f64 * dt)?;
    Ok((steps, stride as usize, noise.node(0.0)?))
}

pub(crate) struct ForwardStepper<'a> {
    sys: &'a SystemSpec,
    weights: EtdWeights,
    noise: Option<(&'a NoisePath, usize)>,
    stride: usize,
    scheme: Scheme,
}

impl<'a> ForwardStepper<'a> {
    pub fn new(
        sys: &'a SystemSpec,
        noise: &'a NoisePath,
        dt: f64,
        stride: usize,
        origin: usize,
        scheme: Scheme,
    ) -> Result<Self> {
        let noise = crate::lyapunov_perron::noise_handle(sys, noise, sys.epsilon, origin)?;
        Ok(Self {
            sys,
            weights: EtdWeights::new(sys, dt, sys.epsilon, 1.0),
            noise,
            stride,
            scheme,
        })
    }

    fn eval(&self, j: usize, x: &[f64], y: &[f64], f: &mut [f64], g: &mut [f64]) {
        match self.noise {
            Some((p, origin)) => {
                let eta = p.ou_at(origin + j * self.stride);
                let shifted: Vec<f64> = x.iter().zip(eta).map(|(a, b)| a + b).collect();
                self.sys.coupling.eval_into(&shifted, y, f, g);
            }
            None => self.sys.coupling.eval_into(x, y, f, g),
        }
    }

    /// Advances `(x, y)` from node `j` to node `j + 1`.
    pub fn step(&self, j: usize, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (nf, ns) = (self.sys.fast_dim(), self.sys.slow_dim());
        let w = &self.weights;
        let c = w.h / self.sys.epsilon;
        let mut f0 = vec![0.0; nf];
        let mut g0 = vec![0.0; ns];
        self.eval(j, x, y, &mut f0, &mut g0);
        let mut xb = vec![0.0; nf];
        let mut yb = vec![0.0; ns];
        w.fast_exp.apply_add(x, 1.0, &mut xb);
        w.slow_exp.apply_add(y, 1.0, &mut yb);
        let mut xn = xb.clone();
        let mut yn = yb.clone();
        w.fast_phi1.apply_add(&f0, c, &mut xn);
        w.slow_phi1.apply_add(&g0, w.h, &mut yn);
        if self.scheme == Scheme::ExponentialEuler {
            return (xn, yn);
        }
        // x_{j+1} = E x_j + c [(phi1 - phi2) F_j + phi2 F_{j+1}], same for y
        let mut base_x = xb;
        let mut base_y = yb;
        w.fast_phi1.apply_add(&f0, c, &mut base_x);
        w.fast_phi2.apply_add(&f0, -c, &mut base_x);
        w.slow_phi1.apply_add(&g0, w.h, &mut base_y);
        w.slow_phi2.apply_add(&g0, -w.h, &mut base_y);
        let mut f1 = vec![0.0; nf];
        let mut g1 = vec![0.0; ns];
        let scale = 1.0 + self.sys.fast.norm(x) + self.sys.slow.norm(y);
        for _ in 0..100 {
            self.eval(j + 1, &xn, &yn, &mut f1, &mut g1);
            let mut xt = base_x.clone();
            let mut yt = base_y.clone();
            w.fast_phi2.apply_add(&f1, c, &mut xt);
            w.slow_phi2.apply_add(&g1, w.h, &mut yt);
            let change = self.sys.fast.norm(&crate::spectral::sub(&xt, &xn))
                + self.sys.slow.norm(&crate::spectral::sub(&yt, &yn));
            xn = xt;
            yn = yt;
            if change <= 1e-15 * scale {
                break;
            }
        }
        (xn, yn)
    }
}

/// Integrates the transformed system from `z0` at `t = 0` over `[0, t_plus]`.
/// Refuses `dt > eps/10`.
pub fn integrate_full(
    z0: &StateVector,
    sys: &SystemSpec,
    noise: &NoisePath,
    t_plus: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    check_len("fast initial value", sys.fast_dim(), z0.fast.len())?;
    check_len("slow initial value", sys.slow_dim(), z0.slow.len())?;
    let limit = sys.epsilon / 10.0;
    if dt > limit * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} does not resolve the fast scale; use dt <= {limit}"
        )));
    }
    let (steps, stride, origin) = forward_layout(noise, t_plus, dt)?;
    let stepper = ForwardStepper::new(sys, noise, dt, stride, origin, scheme)?;
    let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
    let mut fast = Vec::with_capacity((steps + 1) * nf);
    let mut slow = Vec::with_capacity((steps + 1) * ns);
    fast.extend_from_slice(&z0.fast);
    slow.extend_from_slice(&z0.slow);
    let mut x = z0.fast.clone();
    let mut y = z0.slow.clone();
    for j in 0..steps {
        let (xn, yn) = stepper.step(j, &x, &y);
        if !xn.iter().chain(&yn).all(|v| v.is_finite()) {
            return Err(Error::Solver {
                module: "reduction_sim",
                sample: format!("seed {} node {}", noise.seed(), j + 1),
                source: Box::new(Error::InvalidArgument("non-finite state".into())),
            });
        }
        fast.extend_from_slice(&xn);
        slow.extend_from_slice(&yn);
        x = xn;
        y = yn;
    }
    Ok(Trajectory {
        times: (0..=steps).map(|j| j as f64 * dt).collect(),
        fast,
        slow,
        fast_dim: nf,
        slow_dim: ns,
        scheme,
        dt,
        epsilon: sys.epsilon,
    })
}

/// Reduced system `y' = B y + g(H(theta_t omega, y) + eta, y)` on the slow
/// scale. The manifold value is a fresh backward solve at every node and is
/// reported as the fast block. `Trapezoidal` resolves the implicit step by
/// fixed-point iteration, re-solving the manifold at the new node each time.
pub fn integrate_reduced(
    y0: &[f64],
    sys: &SystemSpec,
    noise: &NoisePath,
    t_plus: f64,
    dt: f64,
    scheme: Scheme,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    check_len("slow initial value", sys.slow_dim(), y0.len())?;
    let (steps, stride, origin) = forward_layout(noise, t_plus, dt)?;
    let handle = crate::lyapunov_perron::noise_handle(sys, noise, sys.epsilon, origin)?;
    let w = EtdWeights::new(sys, dt, sys.epsilon, 1.0);
    let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
    let manifold = |j: usize, y: &[f64]| -> Result<Vec<f64>> {
        let shifted = noise.wiener_shift(j as f64 * dt)?;
        evaluate_manifold(y, sys, &shifted, opts).map_err(|e| Error::Solver {
            module: "reduction_sim",
            sample: format!("seed {} node {j}", noise.seed()),
            source: Box::new(e),
        })
    };
    let forcing = |j: usize, x: &[f64], y: &[f64]| -> Vec<f64> {
        let xin: Vec<f64> = match handle {
            Some((p, o)) => x.iter().zip(p.ou_at(o + j * stride)).map(|(a, b)| a + b).collect(),
            None => x.to_vec(),
        };
        let mut f = vec![0.0; nf];
        let mut g = vec![0.0; ns];
        sys.coupling.eval_into(&xin, y, &mut f, &mut g);
        g
    };
    let mut fast = Vec::with_capacity((steps + 1) * nf);
    let mut slow = Vec::with_capacity((steps + 1) * ns);
    let mut y = y0.to_vec();
    let mut x = manifold(0, &y)?;
    for j in 0..=steps {
        fast.extend_from_slice(&x);
        slow.extend_from_slice(&y);
        if j == steps {
            break;
        }
        let g0 = forcing(j, &x, &y);
        let mut base = vec![0.0; ns];
        w.slow_exp.apply_add(&y, 1.0, &mut base);
        let mut yn = base.clone();
        w.slow_phi1.apply_add(&g0, dt, &mut yn);
        let mut xn = manifold(j + 1, &yn)?;
        if scheme == Scheme::Trapezoidal {
            w.slow_phi1.apply_add(&g0, dt, &mut base);
            w.slow_phi2.apply_add(&g0, -dt, &mut base);
            let scale = 1.0 + sys.slow.norm(&y);
            for _ in 0..50 {
                let g1 = forcing(j + 1, &xn, &yn);
                let mut yt = base.clone();
                w.slow_phi2.apply_add(&g1, dt, &mut yt);
                let change = sys.slow.norm(&crate::spectral::sub(&yt, &yn));
                yn = yt;
                xn = manifold(j + 1, &yn)?;
                if change <= 1e-14 * scale {
                    break;
                }
            }
        }
        x = xn;
        y = yn;
    }
    Ok(Trajectory {
        times: (0..=steps).map(|j| j as f64 * dt).collect(),
        fast,
        slow,
        fast_dim: nf,
        slow_dim: ns,
        scheme,
        dt,
        epsilon: sys.epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub times: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// `||X(t) - H(theta_t omega, Y(t))||_1` at every `every`-th node.
pub fn invariance_residual(
    traj: &Trajectory,
    sys: &SystemSpec,
    noise: &NoisePath,
    opts: &SolveOptions,
    every: usize,
) -> Result<InvarianceReport> {
    let nodes: Vec<usize> = (0..traj.len()).step_by(every.max(1)).collect();
    let residuals = nodes
        .par_iter()
        .map(|&j| {
            let shifted = noise.wiener_shift(traj.times[j])?;
            let h = evaluate_manifold(traj.slow_at(j), sys, &shifted, opts)?;
            Ok(sys.fast.norm(&crate::spectral::sub(traj.fast_at(j), &h)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(InvarianceReport {
        times: nodes.iter().map(|&j| traj.times[j]).collect(),
        max_residual: residuals.iter().cloned().fold(0.0, f64::max),
        residuals,
    })
}

/// Least-squares decay exponent `-d ln(distance)/dt` over nodes whose
/// distance stays above `floor`.
pub fn fitted_decay_exponent(times: &[f64], distances: &[f64], floor: f64) -> Option<f64> {
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    for (t, d) in times.iter().zip(distances) {
        if !(*d > floor) {
            break;
        }
        ts.push(*t);
        ls.push(d.ln());
    }
    if ts.len() < 3 {
        return None;
    }
    Some(-crate::stats::linear_fit(&ts, &ls).slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{LinearCoupling, NonlinearityPair};
    use crate::noise::{sample_noise, TimeGrid};
    use crate::spectral::{FastLinearPart, ModeBasis, SlowLinearPart};
    use std::sync::Arc;

    fn scalar(k: f64, c: f64, eps: f64, sigma: f64, slow_rate: f64) -> SystemSpec {
        SystemSpec {
            name: "scalar".into(),
            basis: ModeBasis::new(1, std::f64::consts::PI).unwrap(),
            fast: FastLinearPart::scalar(vec![1.0], 1.0).unwrap(),
            slow: SlowLinearPart::diagonal(1, 1, vec![slow_rate]).unwrap(),
            coupling: NonlinearityPair::new(Arc::new(LinearCoupling::scalar(0.0, k, c, 0.0)), 1, 1),
            mu: 0.3,
            epsilon: eps,
            sigma,
            noise_modes: 1,
        }
    }

    fn noise(sys: &SystemSpec, back: f64, forward: f64, dt: f64, seed: u64) -> NoisePath {
        let g = TimeGrid::covering(back, forward, dt).unwrap();
        sample_noise(g, &sys.fast, 1, sys.sigma, sys.epsilon, seed).unwrap()
    }

    #[test]
    fn linear_parts_are_exact() {
        let mut sys = scalar(0.0, 0.0, 0.1, 0.0, -0.7);
        sys.coupling = NonlinearityPair::zero(1, 1);
        let p = noise(&sys, 0.0, 1.0, 0.01, 1);
        let z0 = StateVector::new(vec![2.0], vec![3.0]);
        for scheme in [Scheme::ExponentialEuler, Scheme::Trapezoidal] {
            let tr = integrate_full(&z0, &sys, &p, 1.0, 0.01, scheme).unwrap();
            for j in 0..tr.len() {
                let t = tr.times[j];
                assert!((tr.fast_at(j)[0] - 2.0 * (-t / 0.1f64).exp()).abs() < 1e-12);
                assert!((tr.slow_at(j)[0] - 3.0 * (-0.7 * t).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_step_refused() {
        let sys = scalar(0.4, 0.3, 0.1, 0.0, 0.0);
        let p = noise(&sys, 0.0, 1.0, 0.05, 1);
        let z0 = StateVector::new(vec![0.0], vec![1.0]);
        let err = integrate_full(&z0, &sys, &p, 1.0, 0.05, Scheme::ExponentialEuler).unwrap_err();
        assert!(err.to_string().contains("dt <= 0.01"), "{err}");
    }

    #[test]
    fn exponential_euler_is_first_order() {
        let sys = scalar(0.4, 0.3, 0.1, 0.0, 0.0);
        let p = noise(&sys, 0.0, 1.0, 0.01 / 64.0, 1);
        let z0 = StateVector::new(vec![1.0], vec![1.0]);
        let run = |dt: f64| integrate_full(&z0, &sys, &p, 1.0, dt, Scheme::ExponentialEuler).unwrap().last();
        let reference = run(0.01 / 64.0);
        let err = |dt: f64| {
            let z = run(dt);
            (z.fast[0] - reference.fast[0]).abs() + (z.slow[0] - reference.slow[0]).abs()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        let ratio = e1 / e2;
        assert!((1.7..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn cocycle_property() {
        let sys = scalar(0.4, 0.3, 0.05, 0.5, 0.0);
        let dt = 0.005;
        let p = noise(&sys, 0.0, 1.0, dt, 4);
        let z0 = StateVector::new(vec![0.5], vec![1.0]);
        for (s, t) in [(0.25, 0.25), (0.25, 0.5), (0.5, 0.5)] {
            let direct = integrate_full(&z0, &sys, &p, s + t, dt, Scheme::ExponentialEuler).unwrap().last();
            let mid = integrate_full(&z0, &sys, &p, s, dt, Scheme::ExponentialEuler).unwrap().last();
            let shifted = p.wiener_shift(s).unwrap();
            let composed = integrate_full(&mid, &sys, &shifted, t, dt, Scheme::ExponentialEuler)
                .unwrap()
                .last();
            assert!((direct.fast[0] - composed.fast[0]).abs() < 1e-12);
            assert!((direct.slow[0] - composed.slow[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coupling_manifold_is_invariant() {
        let mut sys = scalar(0.0, 0.0, 0.1, 0.0, 0.0);
        sys.coupling = NonlinearityPair::zero(1, 1);
        let p = noise(&sys, 1.0, 1.0, 0.01, 1);
        let tr = integrate_full(&StateVector::new(vec![0.0], vec![1.0]), &sys, &p, 1.0, 0.01, Scheme::ExponentialEuler)
            .unwrap();
        let rep = invariance_residual(&tr, &sys, &p, &SolveOptions::default(), 10).unwrap();
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn reduced_linear_benchmark_grows_at_slow_eigenvalue() {
        let (k, c, eps) = (0.4, 0.3, 0.01);
        let sys = scalar(k, c, eps, 0.0, 0.0);
        let b = 1.0 / eps;
        let lambda = (-b + (b * b + 4.0 * c * k / eps).sqrt()) / 2.0;
        let opts = SolveOptions::with_tol(1e-12);
        let p = noise(&sys, 1.0, 5.0, eps / 10.0, 1);
        let tr = integrate_reduced(&[1.0], &sys, &p, 5.0, 0.01, Scheme::ExponentialEuler, &opts).unwrap();
        for j in (0..tr.len()).step_by(50) {
            let t = tr.times[j];
            let rel = tr.slow_at(j)[0] / (lambda * t).exp() - 1.0;
            assert!(rel.abs() < 0.01, "t = {t}: {rel}");
            assert!((tr.fast_at(j)[0] - lambda / c * tr.slow_at(j)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn trapezoidal_reduced_run_matches_full_run_on_the_manifold() {
        let mut sys = scalar(0.4, 0.3, 0.05, 0.4, -0.2);
        sys.coupling = NonlinearityPair::new(Arc::new(LinearCoupling::scalar(0.1, 0.4, 0.3, 0.05)), 1, 1);
        let opts = SolveOptions::with_tol(1e-12);
        let dt = 0.005;
        let p = noise(&sys, 3.0, 1.0, dt, 8);
        let y0 = [0.8];
        let h0 = evaluate_manifold(&y0, &sys, &p, &opts).unwrap();
        let full = integrate_full(&StateVector::new(h0, y0.to_vec()), &sys, &p, 0.5, dt, Scheme::Trapezoidal).unwrap();
        let red = integrate_reduced(&y0, &sys, &p, 0.5, dt, Scheme::Trapezoidal, &opts).unwrap();
        let worst = full.distances(&red, &sys).into_iter().fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let d: Vec<f64> = t.iter().map(|t| 3.0 * (-2.5 * t).exp()).collect();
        assert!((fitted_decay_exponent(&t, &d, 1e-300).unwrap() - 2.5).abs() < 1e-12);
        assert!(fitted_decay_exponent(&t[..2], &d[..2], 0.0).is_none());
    }
}
