//! Small dense helpers: 2x2 real matrices and the exponential-integrator
//! functions `phi_0 = exp`, `phi_1`, `phi_2` evaluated on scalars and on 2x2
//! matrices (Cayley-Hamilton with the spectral divided difference).

use num_complex::Complex64;

/// Below this modulus the phi functions are summed from their Taylor series.
const SERIES_RADIUS: f64 = 0.5;
const SERIES_TERMS: usize = 24;

fn factorial_inv(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, j| acc / j as f64)
}

/// `phi_k(z) = sum_j z^j / (j+k)!`, so `phi_0 = exp`.
pub fn phi(k: usize, z: Complex64) -> Complex64 {
    if k == 0 {
        return z.exp();
    }
    if z.norm() < SERIES_RADIUS {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut pow = Complex64::new(1.0, 0.0);
        for j in 0..SERIES_TERMS {
            acc += pow * factorial_inv(j + k);
            pow *= z;
        }
        return acc;
    }
    // phi_k(z) = (phi_{k-1}(z) - 1/(k-1)!) / z
    (phi(k - 1, z) - factorial_inv(k - 1)) / z
}

/// Derivative of `phi_k`.
pub fn phi_prime(k: usize, z: Complex64) -> Complex64 {
    if k == 0 {
        return z.exp();
    }
    if z.norm() < SERIES_RADIUS {
        let mut acc = Complex64::new(0.0, 0.0);
        let mut pow = Complex64::new(1.0, 0.0);
        for j in 1..SERIES_TERMS {
            acc += pow * (j as f64 * factorial_inv(j + k));
            pow *= z;
        }
        return acc;
    }
    // phi_k'(z) = (phi_{k-1}(z) - k phi_k(z)) / z
    (phi(k - 1, z) - phi(k, z) * k as f64) / z
}

pub fn phi_real(k: usize, x: f64) -> f64 {
    phi(k, Complex64::new(x, 0.0)).re
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let m = self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        let (a, b) = (self.0, o.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let (a, b) = (self.0, o.0);
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let m = self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }

    pub fn transpose(&self) -> Mat2 {
        let m = self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let m = self.0;
        Some(Mat2([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]))
    }

    /// Eigenvalues from the characteristic polynomial `l^2 - tr l + det`.
    pub fn eigenvalues(&self) -> [Complex64; 2] {
        let half_tr = 0.5 * self.trace();
        let disc = Complex64::new(half_tr * half_tr - self.det(), 0.0).sqrt();
        let h = Complex64::new(half_tr, 0.0);
        [h + disc, h - disc]
    }

    /// Operator 2-norm.
    pub fn norm2(&self) -> f64 {
        let ata = self.transpose().mul(self);
        let ev = ata.eigenvalues();
        ev[0].re.max(ev[1].re).max(0.0).sqrt()
    }

    /// `f(M) = a I + b M` where `a, b` interpolate `f` on the spectrum.
    pub fn analytic<F, D>(&self, f: F, df: D) -> Mat2
    where
        F: Fn(Complex64) -> Complex64,
        D: Fn(Complex64) -> Complex64,
    {
        let [l1, l2] = self.eigenvalues();
        let gap = (l1 - l2).norm();
        let scale = 1.0f64.max(l1.norm()).max(l2.norm());
        let (a, b) = if gap <= 1e-6 * scale {
            let lm = (l1 + l2) * 0.5;
            let d = df(lm);
            (f(lm) - lm * d, d)
        } else {
            let (f1, f2) = (f(l1), f(l2));
            let b = (f1 - f2) / (l1 - l2);
            let a = (l1 * f2 - l2 * f1) / (l1 - l2);
            (a, b)
        };
        Mat2::IDENTITY.scale(a.re).add(&self.scale(b.re))
    }

    pub fn exp(&self) -> Mat2 {
        self.analytic(|z| z.exp(), |z| z.exp())
    }

    pub fn phi(&self, k: usize) -> Mat2 {
        self.analytic(|z| phi(k, z), |z| phi_prime(k, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: scaling and squaring with a long Taylor series.
    fn expm_taylor(m: &Mat2) -> Mat2 {
        let norm = m.0.iter().flatten().map(|v| v.abs()).sum::<f64>();
        let mut s = 0;
        while norm / 2f64.powi(s) > 0.125 {
            s += 1;
        }
        let a = m.scale(1.0 / 2f64.powi(s));
        let mut term = Mat2::IDENTITY;
        let mut acc = Mat2::IDENTITY;
        for j in 1..30 {
            term = term.mul(&a).scale(1.0 / j as f64);
            acc = acc.add(&term);
        }
        for _ in 0..s {
            acc = acc.mul(&acc);
        }
        acc
    }

    fn max_diff(a: &Mat2, b: &Mat2) -> f64 {
        a.0.iter()
            .flatten()
            .zip(b.0.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_phi_limits() {
        assert!((phi_real(1, 0.0) - 1.0).abs() < 1e-15);
        assert!((phi_real(2, 0.0) - 0.5).abs() < 1e-15);
        let x = -3.0f64;
        assert!((phi_real(1, x) - (x.exp() - 1.0) / x).abs() < 1e-14);
        assert!((phi_real(2, x) - (x.exp() - 1.0 - x) / (x * x)).abs() < 1e-14);
        // continuity across the series switch
        let a = phi_real(2, 0.4999999);
        let b = phi_real(2, 0.5000001);
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn phi_prime_matches_finite_difference() {
        for &x in &[-4.0, -0.3, 0.2, 1.3] {
            for k in 0..3 {
                let h = 1e-6;
                let fd = (phi_real(k, x + h) - phi_real(k, x - h)) / (2.0 * h);
                let d = phi_prime(k, Complex64::new(x, 0.0)).re;
                assert!((fd - d).abs() < 1e-7, "k={k} x={x}: {fd} vs {d}");
            }
        }
    }

    #[test]
    fn exp_matches_taylor_oracle() {
        let cases = [
            Mat2::new(0.0, 1.0, -4.0, 0.0),
            Mat2::new(0.0, 0.04, -1.0, -2.0).scale(25.0),
            Mat2::new(-1.0, 1.0, 0.0, -1.0),
            Mat2::new(0.3, -2.0, 0.7, 0.1),
        ];
        for m in &cases {
            let e = m.exp();
            let o = expm_taylor(m);
            let tol = 1e-12 * (1.0 + o.norm2());
            assert!(max_diff(&e, &o) < tol, "{m:?}: {e:?} vs {o:?}");
        }
    }

    #[test]
    fn matrix_phi_matches_definition() {
        let m = Mat2::new(-0.5, 1.2, -0.3, -2.0);
        let e = m.exp();
        let inv = m.inverse().unwrap();
        let p1 = inv.mul(&e.add(&Mat2::IDENTITY.scale(-1.0)));
        let p2 = inv.mul(&p1.add(&Mat2::IDENTITY.scale(-1.0)));
        assert!(max_diff(&m.phi(1), &p1) < 1e-13);
        assert!(max_diff(&m.phi(2), &p2) < 1e-13);
    }
}
