//! Concrete fast-slow systems on `[0, pi]` with Dirichlet sine modes, the
//! scalar linear benchmark, and the smooth cutoff that makes `g` bounded.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coupling::{
    Coupling, LinearCoupling, NonlinearityPair, PointwiseConstants, PointwiseCoupling,
};
use crate::error::{Error, Result};
use crate::integrate::Trajectory;
use crate::linalg::Mat2;
use crate::lyapunov_perron::fmt_num;
use crate::noise::NoisePath;
use crate::spectral::{FastLinearPart, ModeBasis, SlowLinearPart};
use crate::system::SystemSpec;

/// Settings shared by every model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Common {
    pub mu: f64,
    pub epsilon: f64,
    pub sigma: f64,
    /// Number of driven fast modes.
    pub noise_modes: usize,
}

/// Pointwise coupling
///
/// ```text
/// f(u, s) = f_u sin(u) + f_s sin(s_0)
/// g(u, s) = g_u u + g_s sin(s_0)      (first output field only)
/// ```
///
/// where `u` is the fast field and `s_0` the first slow input field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CouplingParams {
    pub f_u: f64,
    pub f_s: f64,
    pub g_u: f64,
    pub g_s: f64,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub parameters: Vec<(String, f64)>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
    pub cutoff_radius: Option<f64>,
    /// Human-readable remarks carried into run summaries.
    pub notes: Vec<String>,
    pub system: SystemSpec,
}

impl ModelSpec {
    fn from_system(name: &str, parameters: Vec<(String, f64)>, system: SystemSpec) -> Self {
        Self {
            name: name.into(),
            parameters,
            gamma1: system.gamma1(),
            gamma2: system.gamma2(),
            lipschitz: system.lipschitz(),
            cutoff_radius: None,
            notes: Vec::new(),
            system,
        }
    }

    /// Same model with `f, g` multiplied by the cutoff `chi_R`.
    pub fn with_cutoff(&self, radius: f64) -> Result<Self> {
        let sys = &self.system;
        let pair = apply_cutoff(&sys.coupling, radius, &sys.fast, &sys.slow)?;
        let system = sys.with_coupling(pair);
        check_gate(&system)?;
        let mut out = self.clone();
        out.lipschitz = system.lipschitz();
        out.cutoff_radius = Some(radius);
        out.parameters.push(("cutoff_radius".into(), radius));
        out.notes.push(format!(
            "cutoff at R = {}: K_R = {} (uncut K = {})",
            fmt_num(radius),
            fmt_num(out.lipschitz),
            fmt_num(self.lipschitz)
        ));
        out.system = system;
        Ok(out)
    }
}

fn check_gate(sys: &SystemSpec) -> Result<()> {
    let (k, g1) = (sys.lipschitz(), sys.gamma1());
    if !(k < g1) {
        return Err(Error::Assumption(format!(
            "(A3) K < γ₁ violated: {} ≥ {}",
            fmt_num(k),
            fmt_num(g1)
        )));
    }
    Ok(())
}

fn pointwise(
    name: &str,
    basis: &ModeBasis,
    fast: &FastLinearPart,
    slow: &SlowLinearPart,
    p: CouplingParams,
) -> NonlinearityPair {
    let n_in = slow.input_fields();
    let mut f_s = vec![0.0; n_in];
    let mut g_s = vec![0.0; n_in];
    f_s[0] = p.f_s.abs();
    g_s[0] = p.g_s.abs();
    let CouplingParams { f_u, f_s: fs, g_u, g_s: gs } = p;
    let coupling = PointwiseCoupling::new(
        name,
        basis.clone(),
        fast.clone(),
        slow.clone(),
        Arc::new(move |u, s| f_u * u.sin() + fs * s[0].sin()),
        Arc::new(move |u, s, out| out[0] = g_u * u + gs * s[0].sin()),
        PointwiseConstants {
            f_u: f_u.abs(),
            f_s,
            g_u: g_u.abs(),
            g_s,
            g_sup: if g_u == 0.0 { Some(gs.abs()) } else { None },
        },
    );
    NonlinearityPair::new(Arc::new(coupling), fast.dim(), slow.dim())
}

fn params(list: &[(&str, f64)], p: &CouplingParams, c: &Common) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = list.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    out.extend([
        ("f_u".into(), p.f_u),
        ("f_s".into(), p.f_s),
        ("g_u".into(), p.g_u),
        ("g_s".into(), p.g_s),
        ("mu".into(), c.mu),
        ("epsilon".into(), c.epsilon),
        ("sigma".into(), c.sigma),
        ("noise_modes".into(), c.noise_modes as f64),
    ]);
    out
}

/// Heat equation `u_t = u_xx - alpha u` (fast) coupled to the wave equation
/// `v_tt = v_xx - beta v` (slow). The fast rate is taken as `gamma1 = alpha`.
pub fn make_parabolic_hyperbolic(
    alpha: f64,
    beta: f64,
    n_modes: usize,
    coupling: CouplingParams,
    common: Common,
) -> Result<ModelSpec> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
    }
    let basis = ModeBasis::new(n_modes, PI)?;
    let rates = (1..=n_modes).map(|k| basis.laplacian_eigenvalue(k) + alpha).collect();
    let fast = FastLinearPart::scalar(rates, alpha)?;
    let slow = SlowLinearPart::wave(&basis, beta)?;
    let pair = pointwise("parabolic-hyperbolic", &basis, &fast, &slow, coupling);
    let system = SystemSpec {
        name: "parabolic_hyperbolic".into(),
        basis,
        fast,
        slow,
        coupling: pair,
        mu: common.mu,
        epsilon: common.epsilon,
        sigma: common.sigma,
        noise_modes: common.noise_modes,
    };
    check_gate(&system)?;
    let p = params(&[("alpha", alpha), ("beta", beta), ("n_modes", n_modes as f64)], &coupling, &common);
    let mut m = ModelSpec::from_system("parabolic_hyperbolic", p, system);
    m.notes.push(format!(
        "γ₁ = α = {} (first mode actually decays at {})",
        fmt_num(alpha),
        fmt_num(1.0 + alpha)
    ));
    Ok(m)
}

/// Heat equation `u_t = u_xx` (fast, `gamma1 = 1`) coupled to `m_slow` ODE
/// fields with `B = 0`.
pub fn make_parabolic_ode(
    n_modes: usize,
    m_slow: usize,
    coupling: CouplingParams,
    common: Common,
) -> Result<ModelSpec> {
    let basis = ModeBasis::new(n_modes, PI)?;
    let rates = (1..=n_modes).map(|k| basis.laplacian_eigenvalue(k)).collect();
    let fast = FastLinearPart::scalar(rates, 1.0)?;
    let slow = SlowLinearPart::identity(m_slow, n_modes)?;
    let pair = pointwise("parabolic-ode", &basis, &fast, &slow, coupling);
    let system = SystemSpec {
        name: "parabolic_ode".into(),
        basis,
        fast,
        slow,
        coupling: pair,
        mu: common.mu,
        epsilon: common.epsilon,
        sigma: common.sigma,
        noise_modes: common.noise_modes,
    };
    check_gate(&system)?;
    let p = params(&[("n_modes", n_modes as f64), ("m_slow", m_slow as f64)], &coupling, &common);
    Ok(ModelSpec::from_system("parabolic_ode", p, system))
}

/// Roots of `lambda^2 + nu lambda + eps omega2 = 0`, the eigenvalues of the
/// damped block `[[0, eps], [-omega2, -nu]]`. Ordered by decreasing real part.
pub fn damped_mode_eigenvalues(nu: f64, epsilon: f64, omega2: f64) -> [Complex64; 2] {
    let disc = Complex64::new(nu * nu - 4.0 * omega2 * epsilon, 0.0).sqrt();
    [(-nu + disc) / 2.0, (-nu - disc) / 2.0]
}

/// The sign-flipped pair `(nu +- sqrt(nu^2 - 4 omega2 eps)) / 2`, which has
/// positive real part and cannot describe a decaying mode.
pub fn printed_damped_eigenvalues(nu: f64, epsilon: f64, omega2: f64) -> [Complex64; 2] {
    let disc = Complex64::new(nu * nu - 4.0 * omega2 * epsilon, 0.0).sqrt();
    [(nu + disc) / 2.0, (nu - disc) / 2.0]
}

/// Damped wave `eps u_tt + nu u_t = u_xx - beta u` (fast) coupled to the
/// wave `v_tt = v_xx - beta v` (slow). In first-order form with the `1/eps`
/// scaling each fast mode is `[[0, eps], [-(k^2 + beta), -nu]]`; `gamma1` is
/// the smallest true decay rate, which for overdamped modes is far below `nu`.
pub fn make_wave_wave(
    nu: f64,
    beta: f64,
    n_modes: usize,
    coupling: CouplingParams,
    common: Common,
) -> Result<ModelSpec> {
    if !(nu > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument("nu and beta must be positive".into()));
    }
    let eps = common.epsilon;
    let basis = ModeBasis::new(n_modes, PI)?;
    let gens = (1..=n_modes)
        .map(|k| Mat2::new(0.0, eps, -(basis.laplacian_eigenvalue(k) + beta), -nu))
        .collect();
    let fast = FastLinearPart::damped(gens)?;
    let slow = SlowLinearPart::wave(&basis, beta)?;
    let pair = pointwise("wave-wave", &basis, &fast, &slow, coupling);
    let rates = fast.mode_rates();
    let (limiting, rate) = rates
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &r)| if r < acc.1 { (k, r) } else { acc });
    let system = SystemSpec {
        name: "wave_wave".into(),
        basis,
        fast,
        slow,
        coupling: pair,
        mu: common.mu,
        epsilon: common.epsilon,
        sigma: common.sigma,
        noise_modes: common.noise_modes,
    };
    if !(system.lipschitz() < rate) {
        return Err(Error::Assumption(format!(
            "(A3) K < γ₁ violated: {} ≥ {} (fast mode {} limits the decay)",
            fmt_num(system.lipschitz()),
            fmt_num(rate),
            limiting + 1
        )));
    }
    let p = params(&[("nu", nu), ("beta", beta), ("n_modes", n_modes as f64)], &coupling, &common);
    let mut m = ModelSpec::from_system("wave_wave", p, system);
    let w2 = 1.0 + beta;
    let [a, b] = damped_mode_eigenvalues(nu, eps, w2);
    let [c, d] = printed_damped_eigenvalues(nu, eps, w2);
    m.notes.push(format!(
        "nominal damping ν = {}, measured decay rate γ₁ = {} (mode {})",
        fmt_num(nu),
        fmt_num(rate),
        limiting + 1
    ));
    m.notes.push(format!(
        "mode 1 eigenvalues {} and {}; the sign-flipped pair {} and {} has positive real part",
        fmt_complex(a),
        fmt_complex(b),
        fmt_complex(c),
        fmt_complex(d)
    ));
    Ok(m)
}

fn fmt_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{:.5}", z.re)
    } else {
        format!("{:.5}{:+.5}i", z.re, z.im)
    }
}

/// `dx = (1/eps)(-a x + k y) dt + (sigma/sqrt(eps)) dW`, `dy = c x dt`.
pub fn make_scalar_linear(a: f64, k: f64, c: f64, common: Common) -> Result<ModelSpec> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument("a must be positive".into()));
    }
    let fast = FastLinearPart::scalar(vec![a], a)?;
    let slow = SlowLinearPart::identity(1, 1)?;
    let pair = NonlinearityPair::new(Arc::new(LinearCoupling::scalar(0.0, k, c, 0.0)), 1, 1);
    let system = SystemSpec {
        name: "scalar_linear".into(),
        basis: ModeBasis::new(1, PI)?,
        fast,
        slow,
        coupling: pair,
        mu: common.mu,
        epsilon: common.epsilon,
        sigma: common.sigma,
        noise_modes: common.noise_modes.min(1),
    };
    check_gate(&system)?;
    let mut p = vec![("a".to_string(), a), ("k".to_string(), k), ("c".to_string(), c)];
    p.extend(params(&[], &CouplingParams::default(), &common).into_iter().skip(4));
    Ok(ModelSpec::from_system("scalar_linear", p, system))
}

/// Slope of the slow manifold of the scalar benchmark: `lambda_s / c` with
/// `lambda_s` the slow eigenvalue of `[[-a/eps, k/eps], [c, 0]]`; `k/a` when `c = 0`.
pub fn benchmark_slope(a: f64, k: f64, c: f64, epsilon: f64) -> f64 {
    if c == 0.0 {
        return k / a;
    }
    let b = a / epsilon;
    let disc = (b * b + 4.0 * c * k / epsilon).sqrt();
    // lambda_s / c = 2k / (eps (b + disc)), stable for small eps
    2.0 * k / (epsilon * (b + disc))
}

/// `chi_R(x, y) = s(||x||_1 + ||y||_2)` with the smoothstep `s = 1` on
/// `[0, R]`, `0` beyond `2R`, `1 - 3 tau^2 + 2 tau^3` in between.
pub fn cutoff_factor(rho: f64, radius: f64) -> f64 {
    if rho <= radius {
        1.0
    } else if rho >= 2.0 * radius {
        0.0
    } else {
        let t = (rho - radius) / radius;
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

#[derive(Debug)]
struct CutoffCoupling {
    inner: NonlinearityPair,
    radius: f64,
    fast: FastLinearPart,
    slow: SlowLinearPart,
    lipschitz: f64,
    g_bound: f64,
}

impl Coupling for CutoffCoupling {
    fn eval_into(&self, x: &[f64], y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]) {
        let rho = self.fast.norm(x) + self.slow.norm(y);
        let s = cutoff_factor(rho, self.radius);
        if s == 0.0 {
            fast_out.iter_mut().for_each(|v| *v = 0.0);
            slow_out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        self.inner.eval_into(x, y, fast_out, slow_out);
        if s != 1.0 {
            fast_out.iter_mut().chain(slow_out.iter_mut()).for_each(|v| *v *= s);
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn g_bound(&self) -> Option<f64> {
        Some(self.g_bound)
    }

    fn describe(&self) -> String {
        format!("{} with cutoff R = {}", self.inner.inner().describe(), fmt_num(self.radius))
    }
}

/// `f_R = chi_R f`, `g_R = chi_R g`. With `|s'| <= 3/(2R)` and `|F(z)| <= |F(0)| + 2RK`
/// on the support, `K_R = K + (3/(2R)) (|F(0)| + 2RK)` and `sup |g_R| <= |g(0)| + 2RK`.
pub fn apply_cutoff(
    pair: &NonlinearityPair,
    radius: f64,
    fast: &FastLinearPart,
    slow: &SlowLinearPart,
) -> Result<NonlinearityPair> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff radius must be positive, got {radius}")));
    }
    let (f0, g0) = pair.eval(&vec![0.0; pair.fast_dim()], &vec![0.0; pair.slow_dim()])?;
    let (f0, g0) = (fast.norm(&f0), slow.norm(&g0));
    let k = pair.lipschitz();
    let lipschitz = k + 1.5 / radius * (f0.max(g0) + 2.0 * radius * k);
    let mut g_bound = g0 + 2.0 * radius * k;
    if let Some(b) = pair.g_bound() {
        g_bound = g_bound.min(b);
    }
    let c = CutoffCoupling {
        inner: pair.clone(),
        radius,
        fast: fast.clone(),
        slow: slow.clone(),
        lipschitz,
        g_bound,
    };
    Ok(NonlinearityPair::new(Arc::new(c), pair.fast_dim(), pair.slow_dim()))
}

/// Largest sampled quotient `max(|f(z)-f(z')|_1, |g(z)-g(z')|_2) / |z-z'|` over
/// `pairs` random pairs in the ball of radius `radius`, with half of the pairs
/// taken close together.
pub fn sampled_lipschitz(sys: &SystemSpec, pairs: usize, radius: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nf, ns) = (sys.fast_dim(), sys.slow_dim());
    let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..nf).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = sys.fast.norm(&x) + sys.slow.norm(&y);
        let r = radius * rng.random::<f64>() / n.max(1e-300);
        (x.iter().map(|v| v * r).collect(), y.iter().map(|v| v * r).collect())
    };
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let (x1, y1) = draw(&mut rng);
        let (mut x2, mut y2) = draw(&mut rng);
        if i % 2 == 1 {
            let h = 1e-3 * radius;
            x2 = x1.iter().zip(&x2).map(|(a, b)| a + h * b / radius).collect();
            y2 = y1.iter().zip(&y2).map(|(a, b)| a + h * b / radius).collect();
        }
        let d = sys.fast.norm(&crate::spectral::sub(&x1, &x2)) + sys.slow.norm(&crate::spectral::sub(&y1, &y2));
        if d == 0.0 {
            continue;
        }
        let (f1, g1) = sys.coupling.eval(&x1, &y1)?;
        let (f2, g2) = sys.coupling.eval(&x2, &y2)?;
        let df = sys.fast.norm(&crate::spectral::sub(&f1, &f2));
        let dg = sys.slow.norm(&crate::spectral::sub(&g1, &g2));
        worst = worst.max(df.max(dg) / d);
    }
    Ok(worst)
}

/// Checks (A1)-(A3) and the weight gates; every violation names its numbers.
pub fn validate_model(sys: &SystemSpec) -> Vec<String> {
    let mut out = Vec::new();
    let g1 = sys.gamma1();
    for (k, r) in sys.fast.mode_rates().iter().enumerate() {
        if *r < g1 * (1.0 - 1e-12) {
            out.push(format!(
                "(A1) fast mode {} decays at {} < γ₁ = {}",
                k + 1,
                fmt_num(*r),
                fmt_num(g1)
            ));
        }
    }
    match sampled_lipschitz(sys, 200, 4.0, 7) {
        Ok(q) if q > 1.01 * sys.lipschitz() + 1e-12 => out.push(format!(
            "(A2) sampled Lipschitz quotient {} exceeds 1.01·K = {}",
            fmt_num(q),
            fmt_num(1.01 * sys.lipschitz())
        )),
        Ok(_) => {}
        Err(e) => out.push(format!("(A2) coupling could not be evaluated: {e}")),
    }
    out.extend(sys.weights().violations());
    out
}

/// First grid time at which the coupling argument `(X + eta, Y)` leaves the
/// ball of radius `radius`, if it does.
pub fn exit_time(traj: &Trajectory, sys: &SystemSpec, noise: &NoisePath, radius: f64) -> Result<Option<f64>> {
    let origin = noise.node(0.0)?;
    let stride = (traj.dt / noise.dt()).round() as usize;
    for j in 0..traj.len() {
        let x = traj.fast_at(j);
        let shifted: Vec<f64> = if noise.has_ou() {
            x.iter().zip(noise.ou_at(origin + j * stride)).map(|(a, b)| a + b).collect()
        } else {
            x.to_vec()
        };
        if sys.fast.norm(&shifted) + sys.slow.norm(traj.slow_at(j)) > radius {
            return Ok(Some(traj.times[j]));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_full, Scheme};
    use crate::noise::TimeGrid;
    use crate::spectral::StateVector;

    fn common(eps: f64) -> Common {
        Common {
            mu: 0.5,
            epsilon: eps,
            sigma: 0.0,
            noise_modes: 0,
        }
    }

    fn weak() -> CouplingParams {
        CouplingParams {
            f_u: 0.1,
            f_s: 0.1,
            g_u: 0.1,
            g_s: 0.1,
        }
    }

    #[test]
    fn parabolic_hyperbolic_gate() {
        let m = make_parabolic_hyperbolic(2.0, 1.0, 4, weak(), common(0.1)).unwrap();
        assert_eq!(m.gamma1, 2.0);
        assert_eq!(m.gamma2, 0.0);
        assert!(m.lipschitz < 2.0);
        assert!(validate_model(&m.system).is_empty(), "{:?}", validate_model(&m.system));

        let strong = CouplingParams {
            f_u: 0.5,
            ..Default::default()
        };
        let err = make_parabolic_hyperbolic(0.3, 1.0, 4, strong, common(0.1)).unwrap_err();
        assert!(err.to_string().contains("K < γ₁ violated"), "{err}");
    }

    #[test]
    fn uncoupled_wave_conserves_energy() {
        let m = make_parabolic_hyperbolic(2.0, 1.0, 4, CouplingParams::default(), common(0.1)).unwrap();
        let y = vec![0.3, -0.2, 0.1, 0.5, 0.0, 0.2, -0.4, 0.1];
        let e0 = m.system.slow.norm(&y);
        for t in [0.7, 13.0, -40.0] {
            let yt = m.system.slow.apply_group(&y, t).unwrap();
            assert!((m.system.slow.norm(&yt) - e0).abs() < 1e-10);
        }
    }

    #[test]
    fn parabolic_ode_has_identity_group() {
        let m = make_parabolic_ode(4, 2, weak(), common(0.1)).unwrap();
        assert_eq!(m.gamma1, 1.0);
        let y: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        assert_eq!(m.system.slow.apply_group(&y, 3.7).unwrap(), y);
        assert!(validate_model(&m.system).is_empty());
        let big = CouplingParams {
            f_u: 1.2,
            ..Default::default()
        };
        assert!(make_parabolic_ode(4, 2, big, common(0.1)).is_err());
    }

    #[test]
    fn wave_wave_eigenvalues() {
        let [a, b] = damped_mode_eigenvalues(2.0, 0.04, 1.0);
        assert!((a.re + 0.02020).abs() < 1e-5 && (b.re + 1.97980).abs() < 1e-5);
        let [c, d] = printed_damped_eigenvalues(2.0, 0.04, 1.0);
        assert!((c.re - 1.97980).abs() < 1e-5 && (d.re - 0.02020).abs() < 1e-5);
        // quadratic-formula oracle: both roots satisfy lambda^2 + nu lambda + eps k^2 = 0
        for l in [a, b] {
            assert!((l * l + 2.0 * l + 0.04).norm() < 1e-12);
        }
        let [u, v] = damped_mode_eigenvalues(2.0, 0.04, 100.0);
        assert!(u.im != 0.0 && (u.re + 1.0).abs() < 1e-12 && (v.re + 1.0).abs() < 1e-12);
    }

    #[test]
    fn wave_wave_uses_measured_rate() {
        let p = CouplingParams {
            f_u: 0.002,
            f_s: 0.002,
            g_u: 0.002,
            g_s: 0.002,
        };
        let c = Common {
            mu: 0.05,
            ..common(0.04)
        };
        let m = make_wave_wave(0.5, 0.1, 3, p, c).unwrap();
        let [l, _] = damped_mode_eigenvalues(0.5, 0.04, 1.1);
        assert!((m.gamma1 + l.re).abs() < 1e-12);
        assert!(m.gamma1 < 0.5);
        let measured = m.system.fast.measured_decay_rate(&[1.0, 5.0, 20.0]);
        assert!((measured - m.gamma1).abs() < 1e-9);
        assert!(m.notes.iter().any(|n| n.contains("nominal damping")));
        assert!(validate_model(&m.system).is_empty(), "{:?}", validate_model(&m.system));

        let strong = CouplingParams {
            f_u: 5.0,
            ..Default::default()
        };
        let err = make_wave_wave(0.5, 0.1, 3, strong, c).unwrap_err().to_string();
        assert!(err.contains("mode 1"), "{err}");
    }

    #[test]
    fn scalar_benchmark() {
        let m = make_scalar_linear(1.0, 0.4, 0.3, common(0.01)).unwrap();
        assert_eq!(m.lipschitz, 0.4);
        assert!((benchmark_slope(1.0, 0.4, 0.3, 0.01) - 0.39952).abs() < 1e-5);
        assert_eq!(benchmark_slope(1.0, 0.4, 0.0, 0.3), 0.4);
        assert_eq!(benchmark_slope(1.0, 0.0, 0.3, 0.3), 0.0);
        assert!(make_scalar_linear(1.0, 0.4, 1.1, common(0.01)).is_err());
    }

    #[test]
    fn cutoff_branches() {
        let m = make_parabolic_ode(3, 1, weak(), common(0.1)).unwrap();
        let cut = m.with_cutoff(1.0).unwrap();
        let sys = &m.system;
        let x = vec![0.2, -0.1, 0.05];
        let y = vec![0.1, 0.2, -0.1];
        assert!(sys.fast.norm(&x) + sys.slow.norm(&y) <= 1.0);
        assert_eq!(sys.coupling.eval(&x, &y).unwrap(), cut.system.coupling.eval(&x, &y).unwrap());
        let far: Vec<f64> = x.iter().map(|v| v * 20.0).collect();
        let (f, g) = cut.system.coupling.eval(&far, &y).unwrap();
        assert!(f.iter().chain(&g).all(|v| *v == 0.0));
        assert!(cut.system.coupling.g_bound().is_some());

        // the radius-R draws are shared, so the estimate covers K on B_R
        let k_in = sampled_lipschitz(sys, 400, 1.0, 1).unwrap();
        let k_r = [1.0, 2.0, 3.0]
            .iter()
            .map(|r| sampled_lipschitz(&cut.system, 400, *r, 1).unwrap())
            .fold(0.0, f64::max);
        assert!(k_r.is_finite() && k_r >= k_in * 0.999, "{k_r} vs {k_in}");
        assert!(k_r <= cut.lipschitz);
    }

    #[test]
    fn cutoff_trajectories_agree_until_exit() {
        let p = CouplingParams {
            f_u: 0.05,
            f_s: 0.05,
            g_u: 0.05,
            g_s: 0.05,
        };
        let c = Common {
            mu: 0.2,
            epsilon: 0.1,
            sigma: 0.3,
            noise_modes: 2,
        };
        let m = make_parabolic_ode(3, 1, p, c).unwrap();
        let radius = 0.6;
        let cut = m.with_cutoff(radius).unwrap();
        let grid = TimeGrid::new(-1.0, 6.0, 0.01).unwrap();
        let noise = m.system.original_noise(grid, 5).unwrap();
        let z0 = StateVector::new(vec![0.1, 0.0, 0.0], vec![0.2, 0.1, 0.0]);
        let a = integrate_full(&z0, &m.system, &noise, 5.0, 0.01, Scheme::ExponentialEuler).unwrap();
        let b = integrate_full(&z0, &cut.system, &noise, 5.0, 0.01, Scheme::ExponentialEuler).unwrap();
        let exit = exit_time(&a, &m.system, &noise, radius).unwrap();
        let stop = exit.map(|t| (t / 0.01).round() as usize).unwrap_or(a.len() - 1);
        assert!(exit.is_some() && stop > 5, "exit time {exit:?}");
        for j in 0..=stop {
            assert_eq!(a.fast_at(j), b.fast_at(j), "node {j}");
            assert_eq!(a.slow_at(j), b.slow_at(j), "node {j}");
        }
    }
}
