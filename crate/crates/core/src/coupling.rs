//! Nonlinear couplings `f: H1 x H2 -> H1`, `g: H1 x H2 -> H2` with their
//! global Lipschitz constant `K` and, when available, a uniform bound on `g`.

use std::fmt;
use std::sync::Arc;

use crate::error::Result;
use crate::spectral::{check_len, FastLinearPart, ModeBasis, SlowLinearPart};

pub trait Coupling: Send + Sync + fmt::Debug {
    /// Writes `f(x, y)` into `fast_out` and `g(x, y)` into `slow_out`.
    fn eval_into(&self, x: &[f64], y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]);

    /// Lipschitz constant `K` with respect to `||x||_1 + ||y||_2`.
    fn lipschitz(&self) -> f64;

    /// `sup ||g||_2`, if finite.
    fn g_bound(&self) -> Option<f64> {
        None
    }

    /// Short label for logs and summaries.
    fn describe(&self) -> String;
}

/// Shared handle to a coupling, cheap to clone across workers.
#[derive(Clone)]
pub struct NonlinearityPair {
    inner: Arc<dyn Coupling>,
    fast_dim: usize,
    slow_dim: usize,
}

impl fmt::Debug for NonlinearityPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearityPair")
            .field("coupling", &self.inner.describe())
            .field("K", &self.lipschitz())
            .finish()
    }
}

impl NonlinearityPair {
    pub fn new(inner: Arc<dyn Coupling>, fast_dim: usize, slow_dim: usize) -> Self {
        Self {
            inner,
            fast_dim,
            slow_dim,
        }
    }

    pub fn zero(fast_dim: usize, slow_dim: usize) -> Self {
        Self::new(Arc::new(ZeroCoupling), fast_dim, slow_dim)
    }

    pub fn inner(&self) -> &Arc<dyn Coupling> {
        &self.inner
    }

    pub fn fast_dim(&self) -> usize {
        self.fast_dim
    }

    pub fn slow_dim(&self) -> usize {
        self.slow_dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }

    pub fn g_bound(&self) -> Option<f64> {
        self.inner.g_bound()
    }

    /// Checked evaluation of `(f(x, y), g(x, y))`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("fast block", self.fast_dim, x.len())?;
        check_len("slow block", self.slow_dim, y.len())?;
        let mut fo = vec![0.0; self.fast_dim];
        let mut so = vec![0.0; self.slow_dim];
        self.inner.eval_into(x, y, &mut fo, &mut so);
        Ok((fo, so))
    }

    /// Unchecked hot-path evaluation.
    #[inline]
    pub fn eval_into(&self, x: &[f64], y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]) {
        self.inner.eval_into(x, y, fast_out, slow_out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroCoupling;

impl Coupling for ZeroCoupling {
    fn eval_into(&self, _x: &[f64], _y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]) {
        fast_out.iter_mut().for_each(|v| *v = 0.0);
        slow_out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }

    fn g_bound(&self) -> Option<f64> {
        Some(0.0)
    }

    fn describe(&self) -> String {
        "zero".into()
    }
}

/// `f = Fx x + Fy y`, `g = Gx x + Gy y` acting directly on coefficients.
#[derive(Debug, Clone)]
pub struct LinearCoupling {
    fx: Vec<Vec<f64>>,
    fy: Vec<Vec<f64>>,
    gx: Vec<Vec<f64>>,
    gy: Vec<Vec<f64>>,
    lipschitz: f64,
}

impl LinearCoupling {
    /// Dense matrices (row-major as nested vectors) and a caller-certified `K`.
    pub fn new(
        fx: Vec<Vec<f64>>,
        fy: Vec<Vec<f64>>,
        gx: Vec<Vec<f64>>,
        gy: Vec<Vec<f64>>,
        lipschitz: f64,
    ) -> Self {
        Self {
            fx,
            fy,
            gx,
            gy,
            lipschitz,
        }
    }

    /// One fast and one slow scalar: `f = fx x + fy y`, `g = gx x + gy y`,
    /// with `K = max(|fx|, |fy|, |gx|, |gy|)`.
    pub fn scalar(fx: f64, fy: f64, gx: f64, gy: f64) -> Self {
        let k = fx.abs().max(fy.abs()).max(gx.abs()).max(gy.abs());
        Self::new(
            vec![vec![fx]],
            vec![vec![fy]],
            vec![vec![gx]],
            vec![vec![gy]],
            k,
        )
    }
}

fn matvec_add(m: &[Vec<f64>], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Coupling for LinearCoupling {
    fn eval_into(&self, x: &[f64], y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]) {
        fast_out.iter_mut().for_each(|v| *v = 0.0);
        slow_out.iter_mut().for_each(|v| *v = 0.0);
        matvec_add(&self.fx, x, fast_out);
        matvec_add(&self.fy, y, fast_out);
        matvec_add(&self.gx, x, slow_out);
        matvec_add(&self.gy, y, slow_out);
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn describe(&self) -> String {
        "linear".into()
    }
}

pub type PointwiseFast = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type PointwiseSlow = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Pointwise Lipschitz constants of the physical maps: `|f(u,s) - f(u',s')|
/// <= f_u |u-u'| + sum_i f_s[i] |s_i - s_i'|`, same for `g` (Euclidean in its
/// output fields).
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseConstants {
    pub f_u: f64,
    pub f_s: Vec<f64>,
    pub g_u: f64,
    pub g_s: Vec<f64>,
    /// `sup |g(u, s)|` (Euclidean over output fields), if bounded.
    pub g_sup: Option<f64>,
}

/// Couplings given as pointwise functions of the physical fields, applied by
/// collocation: inverse transform, pointwise map, forward projection.
#[derive(Clone)]
pub struct PointwiseCoupling {
    name: String,
    basis: ModeBasis,
    fast: FastLinearPart,
    slow: SlowLinearPart,
    f: PointwiseFast,
    g: PointwiseSlow,
    constants: PointwiseConstants,
    lipschitz: f64,
    g_bound: Option<f64>,
}

impl fmt::Debug for PointwiseCoupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PointwiseCoupling")
            .field("name", &self.name)
            .field("constants", &self.constants)
            .field("K", &self.lipschitz)
            .finish()
    }
}

impl PointwiseCoupling {
    pub fn new(
        name: impl Into<String>,
        basis: ModeBasis,
        fast: FastLinearPart,
        slow: SlowLinearPart,
        f: PointwiseFast,
        g: PointwiseSlow,
        constants: PointwiseConstants,
    ) -> Self {
        let weights = slow.input_weights();
        let field = fast.field_bound();
        let side = |lu: f64, ls: &[f64]| {
            let ly = ls
                .iter()
                .zip(&weights)
                .map(|(l, w)| (l / w) * (l / w))
                .sum::<f64>()
                .sqrt();
            (lu * field).max(ly)
        };
        let k_f = fast.forcing_bound() * side(constants.f_u, &constants.f_s);
        let k_g = side(constants.g_u, &constants.g_s);
        let g_bound = constants.g_sup.map(|s| s * basis.domain_length().sqrt());
        Self {
            name: name.into(),
            basis,
            fast,
            slow,
            f,
            g,
            lipschitz: k_f.max(k_g),
            constants,
            g_bound,
        }
    }

    pub fn constants(&self) -> &PointwiseConstants {
        &self.constants
    }
}

impl Coupling for PointwiseCoupling {
    fn eval_into(&self, x: &[f64], y: &[f64], fast_out: &mut [f64], slow_out: &mut [f64]) {
        let n = self.basis.n_modes();
        let ng = self.basis.grid_size();
        let n_in = self.slow.input_fields();
        let n_out = self.slow.output_fields();

        let mut coeff = vec![0.0; n];
        for (k, c) in coeff.iter_mut().enumerate() {
            *c = x[self.fast.field_index(k)];
        }
        let mut u = vec![0.0; ng];
        self.basis.to_grid(&coeff, &mut u);

        // s[i * ng + j] = slow input field i at grid point j
        let mut s = vec![0.0; n_in * ng];
        for i in 0..n_in {
            for (k, c) in coeff.iter_mut().enumerate() {
                *c = y[self.slow.input_index(i, k)];
            }
            self.basis.to_grid(&coeff, &mut s[i * ng..(i + 1) * ng]);
        }

        let mut fv = vec![0.0; ng];
        let mut gv = vec![0.0; n_out * ng];
        let mut s_point = vec![0.0; n_in];
        let mut g_point = vec![0.0; n_out];
        for j in 0..ng {
            for i in 0..n_in {
                s_point[i] = s[i * ng + j];
            }
            fv[j] = (self.f)(u[j], &s_point);
            g_point.iter_mut().for_each(|v| *v = 0.0);
            (self.g)(u[j], &s_point, &mut g_point);
            for i in 0..n_out {
                gv[i * ng + j] = g_point[i];
            }
        }

        fast_out.iter_mut().for_each(|v| *v = 0.0);
        slow_out.iter_mut().for_each(|v| *v = 0.0);
        self.basis.from_grid(&fv, &mut coeff);
        for (k, c) in coeff.iter().enumerate() {
            fast_out[self.fast.forcing_index(k)] = *c;
        }
        for i in 0..n_out {
            self.basis.from_grid(&gv[i * ng..(i + 1) * ng], &mut coeff);
            for (k, c) in coeff.iter().enumerate() {
                slow_out[self.slow.output_index(i, k)] = *c;
            }
        }
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn g_bound(&self) -> Option<f64> {
        self.g_bound
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn heat(n: usize) -> (ModeBasis, FastLinearPart) {
        let basis = ModeBasis::new(n, PI).unwrap();
        let rates = (1..=n).map(|k| (k * k) as f64 + 1.0).collect();
        (basis, FastLinearPart::scalar(rates, 1.0).unwrap())
    }

    #[test]
    fn zero_pair_gives_zero() {
        let pair = NonlinearityPair::zero(3, 2);
        let (f, g) = pair.eval(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert!(f.iter().chain(&g).all(|&v| v == 0.0));
        assert!(pair.eval(&[1.0], &[4.0, 5.0]).is_err());
    }

    #[test]
    fn linear_pointwise_map_commutes_with_transform() {
        let (basis, fast) = heat(5);
        let slow = SlowLinearPart::identity(1, 5).unwrap();
        let c = PointwiseCoupling::new(
            "linear-v",
            basis,
            fast,
            slow,
            Arc::new(|_u, s| 0.4 * s[0]),
            Arc::new(|_u, _s, out| out[0] = 0.0),
            PointwiseConstants {
                f_u: 0.0,
                f_s: vec![0.4],
                g_u: 0.0,
                g_s: vec![0.0],
                g_sup: Some(0.0),
            },
        );
        let pair = NonlinearityPair::new(Arc::new(c), 5, 5);
        let x = vec![0.3, -0.1, 0.7, 0.2, 0.0];
        let y = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let (f, g) = pair.eval(&x, &y).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-14);
        assert!(f[1..].iter().all(|v| v.abs() < 1e-14));
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        assert!((pair.lipschitz() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn clipped_cubic_matches_dense_quadrature() {
        let n = 6;
        let (basis, fast) = heat(n);
        let slow = SlowLinearPart::identity(1, n).unwrap();
        let cubic = |u: f64| (u * u * u).clamp(-1.0, 1.0);
        let c = PointwiseCoupling::new(
            "clipped-cubic",
            basis.clone(),
            fast,
            slow,
            Arc::new(move |u, _s| cubic(u)),
            Arc::new(|_u, _s, out| out[0] = 0.0),
            PointwiseConstants {
                f_u: 3.0,
                f_s: vec![0.0],
                g_u: 0.0,
                g_s: vec![0.0],
                g_sup: Some(0.0),
            },
        );
        // amplitude keeps |u^3| < 1 so the clip is inactive and u^3 has modes 1 and 3
        let amp = 0.9;
        let mut x = vec![0.0; n];
        x[0] = amp;
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n];
        c.eval_into(&x, &vec![0.0; n], &mut f, &mut g);

        // oracle: composite Simpson at 16x the collocation resolution
        let m = 16 * (basis.grid_size() + 1);
        let h = PI / m as f64;
        let norm = (2.0 / PI).sqrt();
        for k in 1..=n {
            let mut acc = 0.0;
            for j in 0..=m {
                let xj = j as f64 * h;
                let w = if j == 0 || j == m {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let u = amp * norm * xj.sin();
                acc += w * cubic(u) * norm * (k as f64 * xj).sin();
            }
            let proj = acc * h / 3.0;
            assert!((f[k - 1] - proj).abs() < 1e-8, "mode {k}: {} vs {proj}", f[k - 1]);
        }
    }

    #[test]
    fn sampled_lipschitz_quotients_respect_k() {
        let n = 5;
        let basis = ModeBasis::new(n, PI).unwrap();
        let rates = (1..=n).map(|k| (k * k) as f64 + 2.0).collect();
        let fast = FastLinearPart::scalar(rates, 2.0).unwrap();
        let slow = SlowLinearPart::wave(&basis, 1.0).unwrap();
        let c = PointwiseCoupling::new(
            "sine-tanh",
            basis,
            fast.clone(),
            slow.clone(),
            Arc::new(|u, s| 0.2 * u.sin() + 0.3 * s[0].tanh() + 0.1 * s[1].sin()),
            Arc::new(|u, s, out| out[0] = 0.25 * u.sin() + 0.2 * s[1].tanh()),
            PointwiseConstants {
                f_u: 0.2,
                f_s: vec![0.3, 0.1],
                g_u: 0.25,
                g_s: vec![0.0, 0.2],
                g_sup: Some(0.45),
            },
        );
        let k = c.lipschitz();
        let pair = NonlinearityPair::new(Arc::new(c), fast.dim(), slow.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let mut draw = |d: usize| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (x1, x2, y1, y2) = (draw(fast.dim()), draw(fast.dim()), draw(slow.dim()), draw(slow.dim()));
            let (f1, g1) = pair.eval(&x1, &y1).unwrap();
            let (f2, g2) = pair.eval(&x2, &y2).unwrap();
            let dz = fast.norm(&crate::spectral::sub(&x1, &x2)) + slow.norm(&crate::spectral::sub(&y1, &y2));
            let qf = fast.norm(&crate::spectral::sub(&f1, &f2)) / dz;
            let qg = slow.norm(&crate::spectral::sub(&g1, &g2)) / dz;
            worst = worst.max(qf).max(qg);
        }
        assert!(worst <= 1.01 * k, "{worst} > {k}");
        assert!(worst > 0.0);
    }
}
