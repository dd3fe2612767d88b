//! Two-sided Wiener paths on a uniform grid, the Wiener shift, and exact
//! stationary Ornstein-Uhlenbeck samples of `d eta = (1/eps) A eta dt + (sigma/sqrt(eps)) dW`.
//!
//! Component `j` of the noise drives fast mode `j` (the `u'` slot for damped
//! blocks). The OU innovation over a step is drawn jointly with the Wiener
//! increment of the same step, so the OU path is a functional of the stored
//! increments plus an independent auxiliary stream.
//!
//! Binary dump layout (little endian): `b"SFNP"`, `u32` version (1), `f64` dt,
//! `u64` steps before zero, `u64` steps after zero, `u64` components, `u64`
//! seed, then `components * steps` increments as `f64`, component-major.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Mat2;
use crate::spectral::{Block, FastLinearPart};

const MAGIC: &[u8; 4] = b"SFNP";
const FORMAT_VERSION: u32 = 1;

const STREAM_WIENER: u64 = 1;
const STREAM_OU_INNOVATION: u64 = 2;
const STREAM_OU_INITIAL: u64 = 3;

/// Uniform grid `t_minus = -n_minus dt, ..., 0, ..., t_plus = n_plus dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_minus: usize,
    n_plus: usize,
    dt: f64,
}

impl TimeGrid {
    /// Endpoints must be integer multiples of `dt` (up to `1e-9` relative).
    pub fn new(t_minus: f64, t_plus: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if t_minus > 0.0 || t_plus < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "grid [{t_minus}, {t_plus}] must contain 0"
            )));
        }
        let steps = |t: f64, what: &str| -> Result<usize> {
            let n = (t.abs() / dt).round();
            if (n * dt - t.abs()).abs() > 1e-9 * dt.max(t.abs()) {
                return Err(Error::InvalidArgument(format!(
                    "{what} = {t} is not a multiple of dt = {dt}"
                )));
            }
            Ok(n as usize)
        };
        Ok(Self {
            n_minus: steps(t_minus, "t_minus")?,
            n_plus: steps(t_plus, "t_plus")?,
            dt,
        })
    }

    /// Grid covering at least `[-back, forward]`, endpoints rounded outwards.
    pub fn covering(back: f64, forward: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            n_minus: (back.max(0.0) / dt - 1e-9).ceil().max(0.0) as usize,
            n_plus: (forward.max(0.0) / dt - 1e-9).ceil().max(0.0) as usize,
            dt,
        })
    }

    pub fn from_steps(n_minus: usize, n_plus: usize, dt: f64) -> Self {
        Self { n_minus, n_plus, dt }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_minus(&self) -> f64 {
        -(self.n_minus as f64) * self.dt
    }

    pub fn t_plus(&self) -> f64 {
        self.n_plus as f64 * self.dt
    }

    pub fn steps_before_zero(&self) -> usize {
        self.n_minus
    }

    pub fn steps_after_zero(&self) -> usize {
        self.n_plus
    }

    pub fn n_steps(&self) -> usize {
        self.n_minus + self.n_plus
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps() + 1
    }

    /// Time of node `i` (node `n_minus` is `t = 0`).
    pub fn time(&self, i: usize) -> f64 {
        (i as f64 - self.n_minus as f64) * self.dt
    }
}

#[derive(Debug, Clone)]
struct OuData {
    dim: usize,
    sigma: f64,
    epsilon: f64,
    // values[node * dim + i]
    values: Vec<f64>,
}

/// A sampled two-sided noise path. Cloning is cheap; shifted views share storage.
#[derive(Debug, Clone)]
pub struct NoisePath {
    dt: f64,
    n_steps: usize,
    // storage node of the (possibly shifted) time origin
    zero: usize,
    m: usize,
    seed: u64,
    // increments[c * n_steps + i] over storage step i
    increments: Arc<Vec<f64>>,
    ou: Option<Arc<OuData>>,
}

fn stream_rng(seed: u64, purpose: u64, component: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | component as u64);
    rng
}

fn normals(seed: u64, purpose: u64, component: usize, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, purpose, component);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Independent `N(0, dt)` increments for `m` components on `grid`.
pub fn sample_wiener_path(grid: TimeGrid, m: usize, seed: u64) -> Result<NoisePath> {
    if !(grid.dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let n = grid.n_steps();
    let sd = grid.dt.sqrt();
    let mut increments = Vec::with_capacity(m * n);
    for c in 0..m {
        increments.extend(normals(seed, STREAM_WIENER, c, n).into_iter().map(|z| z * sd));
    }
    Ok(NoisePath {
        dt: grid.dt,
        n_steps: n,
        zero: grid.n_minus,
        m,
        seed,
        increments: Arc::new(increments),
        ou: None,
    })
}

impl NoisePath {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            n_minus: self.zero,
            n_plus: self.n_steps - self.zero,
            dt: self.dt,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Scale the OU samples were built with, if any.
    pub fn epsilon(&self) -> Option<f64> {
        self.ou.as_ref().map(|o| o.epsilon)
    }

    pub fn sigma(&self) -> Option<f64> {
        self.ou.as_ref().map(|o| o.sigma)
    }

    pub fn has_ou(&self) -> bool {
        self.ou.is_some()
    }

    /// Increment of component `c` over the step starting at grid node `i`.
    pub fn increment(&self, c: usize, i: usize) -> f64 {
        self.increments[c * self.n_steps + i]
    }

    /// `omega_c(t_i)`, pinned so that the value at `t = 0` is exactly 0.
    pub fn wiener_value(&self, c: usize, i: usize) -> f64 {
        let row = &self.increments[c * self.n_steps..(c + 1) * self.n_steps];
        if i >= self.zero {
            row[self.zero..i].iter().sum()
        } else {
            -row[i..self.zero].iter().sum::<f64>()
        }
    }

    /// Grid node of time `t`, which must lie on the grid.
    pub fn node(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs()) {
            return Err(Error::InvalidArgument(format!(
                "time {t} is not a multiple of dt = {}",
                self.dt
            )));
        }
        let idx = self.zero as i64 + k as i64;
        if idx < 0 || idx as usize > self.n_steps {
            return Err(Error::Window(format!(
                "time {t} outside the stored noise window [{}, {}]; enlarge t_minus/t_plus",
                self.grid().t_minus(),
                self.grid().t_plus()
            )));
        }
        Ok(idx as usize)
    }

    /// Checks that `[a, b]` (relative to the current origin) is stored.
    pub fn require_window(&self, a: f64, b: f64) -> Result<()> {
        let g = self.grid();
        let slack = 1e-9 * self.dt;
        if a < g.t_minus() - slack {
            return Err(Error::Window(format!(
                "need noise back to t = {a} but t_minus = {}; enlarge t_minus",
                g.t_minus()
            )));
        }
        if b > g.t_plus() + slack {
            return Err(Error::Window(format!(
                "need noise up to t = {b} but t_plus = {}; enlarge t_plus",
                g.t_plus()
            )));
        }
        Ok(())
    }

    /// OU sample (all fast coefficients) at grid node `i`.
    pub fn ou_at(&self, i: usize) -> &[f64] {
        let ou = self.ou.as_ref().expect("OU samples not built for this path");
        &ou.values[i * ou.dim..(i + 1) * ou.dim]
    }

    /// Path of `theta_s omega`: `t -> omega(t + s) - omega(s)`.
    pub fn wiener_shift(&self, s: f64) -> Result<NoisePath> {
        let zero = self.node(s)?;
        Ok(NoisePath {
            zero,
            ..self.clone()
        })
    }

    /// Same randomness on the grid `factor * dt` with increments scaled by
    /// `sqrt(factor)`: the Brownian scaling `t -> sqrt(factor) w(t / factor)`.
    /// OU samples are dropped.
    pub fn rescaled(&self, factor: f64) -> Result<NoisePath> {
        if !(factor > 0.0) {
            return Err(Error::InvalidArgument("rescale factor must be positive".into()));
        }
        let s = factor.sqrt();
        Ok(NoisePath {
            dt: self.dt * factor,
            increments: Arc::new(self.increments.iter().map(|v| v * s).collect()),
            ou: None,
            ..self.clone()
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.zero as u64).to_le_bytes())?;
        w.write_all(&((self.n_steps - self.zero) as u64).to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in self.increments.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<NoisePath> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Io("not a noise path dump".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Io(format!("unsupported noise dump version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let dt = f64::from_le_bytes(next(&mut r)?);
        let n_minus = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_plus = u64::from_le_bytes(next(&mut r)?) as usize;
        let m = u64::from_le_bytes(next(&mut r)?) as usize;
        let seed = u64::from_le_bytes(next(&mut r)?);
        let n_steps = n_minus + n_plus;
        let mut increments = Vec::with_capacity(m * n_steps);
        for _ in 0..m * n_steps {
            increments.push(f64::from_le_bytes(next(&mut r)?));
        }
        Ok(NoisePath {
            dt,
            n_steps,
            zero: n_minus,
            m,
            seed,
            increments: Arc::new(increments),
            ou: None,
        })
    }
}

/// Exact one-step OU transition of one fast block driven by one component.
#[derive(Debug, Clone, Copy)]
enum OuStep {
    Scalar {
        decay: f64,
        gain: f64,
        sd: f64,
        stationary_sd: f64,
    },
    Pair {
        decay: Mat2,
        gain: [f64; 2],
        chol: Mat2,
        stationary_chol: Mat2,
    },
}

/// Lower Cholesky factor of a symmetric 2x2 matrix, clamping tiny negative
/// pivots from roundoff to zero.
fn cholesky2(s: &Mat2) -> Mat2 {
    let a = s.0[0][0].max(0.0);
    let l11 = a.sqrt();
    let l21 = if l11 > 0.0 { s.0[1][0] / l11 } else { 0.0 };
    let l22 = (s.0[1][1] - l21 * l21).max(0.0).sqrt();
    Mat2::new(l11, 0.0, l21, l22)
}

/// Solves `M S + S M^T = -q e2 e2^T` for symmetric `S`.
fn lyapunov2(m: &Mat2, q: f64) -> Option<Mat2> {
    let [[a, b], [c, d]] = m.0;
    // unknowns (p, r, s) with S = [[p, r], [r, s]]
    let sys = [[2.0 * a, 2.0 * b, 0.0], [c, a + d, b], [0.0, 2.0 * c, 2.0 * d]];
    let rhs = [0.0, 0.0, -q];
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det = det3(&sys);
    if det.abs() < 1e-300 {
        return None;
    }
    let mut sol = [0.0; 3];
    for (k, out) in sol.iter_mut().enumerate() {
        let mut mk = sys;
        for i in 0..3 {
            mk[i][k] = rhs[i];
        }
        *out = det3(&mk) / det;
    }
    Some(Mat2::new(sol[0], sol[1], sol[1], sol[2]))
}

fn ou_steps(fast: &FastLinearPart, m: usize, sigma: f64, epsilon: f64, dt: f64) -> Result<Vec<OuStep>> {
    let h = dt / epsilon;
    let amp = sigma / epsilon.sqrt();
    let mut steps = Vec::with_capacity(m);
    for (j, block) in fast.operator().blocks().iter().take(m).enumerate() {
        match block {
            Block::Scalar(g) => {
                let r = -g;
                if !(r > 0.0) {
                    return Err(Error::Assumption(format!(
                        "fast mode {} has rate {r} <= 0: no stationary OU solution",
                        j + 1
                    )));
                }
                let var = sigma * sigma / (2.0 * r) * (1.0 - (-2.0 * r * h).exp());
                let gain = amp * crate::linalg::phi_real(1, -r * h);
                steps.push(OuStep::Scalar {
                    decay: (-r * h).exp(),
                    gain,
                    sd: (var - dt * gain * gain).max(0.0).sqrt(),
                    stationary_sd: sigma / (2.0 * r).sqrt(),
                });
            }
            Block::Pair { generator, .. } => {
                let ev = generator.eigenvalues();
                if ev.iter().any(|l: &Complex64| l.re >= 0.0) {
                    return Err(Error::Assumption(format!(
                        "fast mode {} is not strictly damped: no stationary OU solution",
                        j + 1
                    )));
                }
                let stat = lyapunov2(generator, sigma * sigma).ok_or_else(|| {
                    Error::Assumption(format!("singular Lyapunov equation in fast mode {}", j + 1))
                })?;
                let decay = generator.scale(h).exp();
                let innov = stat.add(&decay.mul(&stat).mul(&decay.transpose()).scale(-1.0));
                let g = generator.scale(h).phi(1).apply([0.0, amp]);
                let cond = innov.add(
                    &Mat2::new(g[0] * g[0], g[0] * g[1], g[1] * g[0], g[1] * g[1]).scale(-dt),
                );
                steps.push(OuStep::Pair {
                    decay,
                    gain: g,
                    chol: cholesky2(&cond),
                    stationary_chol: cholesky2(&stat),
                });
            }
        }
    }
    Ok(steps)
}

/// Fills the stationary OU samples of `d eta = (1/eps) A eta dt + (sigma/sqrt(eps)) dW`
/// at every grid node. With `epsilon = 1` this is the unscaled process `xi`.
pub fn ou_stationary_path(
    path: &NoisePath,
    fast: &FastLinearPart,
    sigma: f64,
    epsilon: f64,
) -> Result<NoisePath> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if path.m > fast.n_modes() {
        return Err(Error::InvalidArgument(format!(
            "{} noise components exceed {} fast modes",
            path.m,
            fast.n_modes()
        )));
    }
    let dim = fast.dim();
    let nodes = path.n_steps + 1;
    let mut values = vec![0.0; nodes * dim];
    if sigma != 0.0 {
        let steps = ou_steps(fast, path.m, sigma, epsilon, path.dt)?;
        let mut offset = 0;
        let blocks = fast.operator().blocks();
        for (j, step) in steps.iter().enumerate() {
            let inc = &path.increments[j * path.n_steps..(j + 1) * path.n_steps];
            match *step {
                OuStep::Scalar {
                    decay,
                    gain,
                    sd,
                    stationary_sd,
                } => {
                    let z = normals(path.seed, STREAM_OU_INNOVATION, j, path.n_steps);
                    let z0 = normals(path.seed, STREAM_OU_INITIAL, j, 1)[0];
                    let mut v = stationary_sd * z0;
                    values[offset] = v;
                    for i in 0..path.n_steps {
                        v = decay * v + gain * inc[i] + sd * z[i];
                        values[(i + 1) * dim + offset] = v;
                    }
                }
                OuStep::Pair {
                    decay,
                    gain,
                    chol,
                    stationary_chol,
                } => {
                    let z = normals(path.seed, STREAM_OU_INNOVATION, j, 2 * path.n_steps);
                    let z0 = normals(path.seed, STREAM_OU_INITIAL, j, 2);
                    let mut v = stationary_chol.apply([z0[0], z0[1]]);
                    values[offset] = v[0];
                    values[offset + 1] = v[1];
                    for i in 0..path.n_steps {
                        let p = decay.apply(v);
                        let e = chol.apply([z[2 * i], z[2 * i + 1]]);
                        v = [
                            p[0] + gain[0] * inc[i] + e[0],
                            p[1] + gain[1] * inc[i] + e[1],
                        ];
                        values[(i + 1) * dim + offset] = v[0];
                        values[(i + 1) * dim + offset + 1] = v[1];
                    }
                }
            }
            offset += blocks[j].width();
        }
    }
    Ok(NoisePath {
        ou: Some(Arc::new(OuData {
            dim,
            sigma,
            epsilon,
            values,
        })),
        ..path.clone()
    })
}

/// Convenience: Wiener path plus OU samples in one call.
pub fn sample_noise(
    grid: TimeGrid,
    fast: &FastLinearPart,
    m: usize,
    sigma: f64,
    epsilon: f64,
    seed: u64,
) -> Result<NoisePath> {
    let path = sample_wiener_path(grid, m, seed)?;
    ou_stationary_path(&path, fast, sigma, epsilon)
}

/// Stationary variance of the driven coefficient of each of the first `m`
/// fast modes: `sigma^2 / (2 r)` for scalar modes, the `u'` entry of the
/// Lyapunov solution for damped blocks. Independent of `eps`.
pub fn stationary_variances(fast: &FastLinearPart, m: usize, sigma: f64) -> Result<Vec<f64>> {
    let blocks = fast.operator().blocks();
    if m > blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "{m} noise components exceed {} fast modes",
            blocks.len()
        )));
    }
    blocks[..m]
        .iter()
        .enumerate()
        .map(|(j, b)| match b {
            Block::Scalar(g) => Ok(sigma * sigma / (-2.0 * g)),
            Block::Pair { generator, .. } => lyapunov2(generator, sigma * sigma)
                .map(|s| s.0[1][1])
                .ok_or_else(|| Error::Assumption(format!("singular Lyapunov equation in fast mode {}", j + 1))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct VarianceRow {
    pub epsilon: f64,
    pub mode: usize,
    pub variance: f64,
    pub expected: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OuScalingReport {
    pub rows: Vec<VarianceRow>,
    /// Per `eps`: KS statistic of `eta(theta_t omega)` against `xi(theta_{t/eps} omega')`
    /// for the first driven mode, and the level-0.01 critical value.
    pub ks: Vec<(f64, f64, f64)>,
    pub variance_pass: bool,
    pub ks_pass: bool,
}

impl OuScalingReport {
    pub const CSV_HEADER: &'static str = "epsilon,mode,variance,expected,standard_error";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:.12e},{:.12e},{:.12e}",
                    r.epsilon, r.mode, r.variance, r.expected, r.standard_error
                )
            })
            .collect()
    }
}

/// Samples `eta^{1/eps}` for each `eps` on a grid of `n` steps spaced three
/// slowest e-folding times apart (in units of `eps`), compares its variance
/// with the closed form, and runs a two-sample KS test against an
/// independent `xi` path sampled at the matching fast-time spacing.
pub fn check_ou_scaling(
    fast: &FastLinearPart,
    m: usize,
    sigma: f64,
    epsilons: &[f64],
    n: usize,
    seed: u64,
) -> Result<OuScalingReport> {
    if m == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("need at least one driven mode and sigma > 0".into()));
    }
    let expected = stationary_variances(fast, m, sigma)?;
    let rates = fast.mode_rates();
    let slowest = rates[..m].iter().cloned().fold(f64::INFINITY, f64::min);
    let lag = 3.0 / slowest;
    let offsets: Vec<usize> = fast
        .operator()
        .blocks()
        .iter()
        .scan(0, |o, b| {
            let here = *o;
            *o += b.width();
            Some(here + b.width() - 1)
        })
        .collect();
    let mut rows = Vec::new();
    let mut ks = Vec::new();
    for (i, &eps) in epsilons.iter().enumerate() {
        let s_eta = seed.wrapping_add(2 * i as u64);
        let eta = sample_noise(TimeGrid::from_steps(0, n, lag * eps), fast, m, sigma, eps, s_eta)?;
        let xi = sample_noise(TimeGrid::from_steps(0, n, lag), fast, m, sigma, 1.0, s_eta.wrapping_add(1))?;
        for j in 0..m {
            let xs: Vec<f64> = (0..=n).map(|k| eta.ou_at(k)[offsets[j]]).collect();
            let v = crate::stats::variance(&xs);
            let phi = lag_one_correlation(&xs);
            rows.push(VarianceRow {
                epsilon: eps,
                mode: j + 1,
                variance: v,
                expected: expected[j],
                standard_error: crate::stats::ar1_variance_se(expected[j], phi, xs.len()),
            });
            if j == 0 {
                let ys: Vec<f64> = (0..=n).map(|k| xi.ou_at(k)[offsets[0]]).collect();
                let d = crate::stats::ks_statistic(&xs, &ys);
                ks.push((eps, d, crate::stats::ks_critical_001(xs.len(), ys.len())));
            }
        }
    }
    let variance_pass = rows.iter().all(|r| (r.variance - r.expected).abs() <= 3.0 * r.standard_error);
    let ks_pass = ks.iter().all(|(_, d, c)| d < c);
    Ok(OuScalingReport {
        rows,
        ks,
        variance_pass,
        ks_pass,
    })
}

fn lag_one_correlation(xs: &[f64]) -> f64 {
    let m = crate::stats::mean(xs);
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    let den: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (num / den).clamp(-0.99, 0.99)
}
