//! Galerkin sine basis, block-diagonal linear parts with exact propagators,
//! and the norms of the fast and slow spaces.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Mat2;

/// Orthonormal Dirichlet sine basis `phi_k(x) = sqrt(2/L) sin(k pi x / L)` on
/// `[0, L]`, with a collocation grid of `2 n + 1` interior points.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    n_modes: usize,
    domain_length: f64,
    grid_size: usize,
    // sine[k * grid_size + j] = phi_{k+1}(x_j)
    sine: Arc<Vec<f64>>,
}

impl ModeBasis {
    pub fn new(n_modes: usize, domain_length: f64) -> Result<Self> {
        Self::with_grid(n_modes, domain_length, 2 * n_modes + 1)
    }

    pub fn with_grid(n_modes: usize, domain_length: f64, grid_size: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::InvalidArgument("n_modes must be >= 1".into()));
        }
        if !(domain_length > 0.0) {
            return Err(Error::InvalidArgument("domain length must be positive".into()));
        }
        if grid_size < n_modes {
            return Err(Error::InvalidArgument(format!(
                "collocation grid of {grid_size} points cannot resolve {n_modes} modes"
            )));
        }
        let norm = (2.0 / domain_length).sqrt();
        let mut sine = Vec::with_capacity(n_modes * grid_size);
        for k in 1..=n_modes {
            for j in 1..=grid_size {
                let arg = std::f64::consts::PI * (k * j) as f64 / (grid_size + 1) as f64;
                sine.push(norm * arg.sin());
            }
        }
        Ok(Self {
            n_modes,
            domain_length,
            grid_size,
            sine: Arc::new(sine),
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = self.domain_length / (self.grid_size + 1) as f64;
        (1..=self.grid_size).map(|j| j as f64 * h).collect()
    }

    /// Eigenvalue of `-Laplacian` for mode `k` (1-based).
    pub fn laplacian_eigenvalue(&self, k: usize) -> f64 {
        let w = k as f64 * std::f64::consts::PI / self.domain_length;
        w * w
    }

    /// Evaluate `sum_k c_k phi_k(x_j)` on the collocation grid.
    pub fn to_grid(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.n_modes);
        debug_assert_eq!(out.len(), self.grid_size);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.sine[k * self.grid_size..(k + 1) * self.grid_size];
            for (o, s) in out.iter_mut().zip(row) {
                *o += c * s;
            }
        }
    }

    /// Discrete L2 projection of grid values onto the first `n_modes` modes.
    pub fn from_grid(&self, values: &[f64], out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.grid_size);
        debug_assert_eq!(out.len(), self.n_modes);
        let w = self.domain_length / (self.grid_size + 1) as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.sine[k * self.grid_size..(k + 1) * self.grid_size];
            *o = w * row.iter().zip(values).map(|(s, v)| s * v).sum::<f64>();
        }
    }
}

/// One diagonal block of a linear generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// `d/dt x = g x`.
    Scalar(f64),
    /// 2x2 generator; the block norm is `|norm_map * x|`.
    Pair { generator: Mat2, norm_map: Mat2 },
}

impl Block {
    pub fn width(&self) -> usize {
        match self {
            Block::Scalar(_) => 1,
            Block::Pair { .. } => 2,
        }
    }
}

/// Per-block linear map, e.g. a propagator or an exponential-integrator weight.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockOp {
    Scalar(f64),
    Pair(Mat2),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOps(pub Vec<BlockOp>);

impl BlockOps {
    /// `out += scale * Op x`.
    pub fn apply_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let mut i = 0;
        for op in &self.0 {
            match op {
                BlockOp::Scalar(a) => {
                    out[i] += scale * a * x[i];
                    i += 1;
                }
                BlockOp::Pair(m) => {
                    let v = m.apply([x[i], x[i + 1]]);
                    out[i] += scale * v[0];
                    out[i + 1] += scale * v[1];
                    i += 2;
                }
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_add(x, 1.0, &mut out);
        out
    }
}

/// Block-diagonal generator acting on a coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperator {
    blocks: Vec<Block>,
    dim: usize,
}

impl BlockOperator {
    pub fn new(blocks: Vec<Block>) -> Self {
        let dim = blocks.iter().map(Block::width).sum();
        Self { blocks, dim }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut i = 0;
        for b in &self.blocks {
            match b {
                Block::Scalar(_) => {
                    acc += x[i] * x[i];
                    i += 1;
                }
                Block::Pair { norm_map, .. } => {
                    let v = norm_map.apply([x[i], x[i + 1]]);
                    acc += v[0] * v[0] + v[1] * v[1];
                    i += 2;
                }
            }
        }
        acc.sqrt()
    }

    /// `phi_k(t G)` block by block (`k = 0` is the propagator `exp(t G)`).
    pub fn phi(&self, k: usize, t: f64) -> BlockOps {
        BlockOps(
            self.blocks
                .iter()
                .map(|b| match b {
                    Block::Scalar(g) => BlockOp::Scalar(crate::linalg::phi_real(k, g * t)),
                    Block::Pair { generator, .. } => BlockOp::Pair(generator.scale(t).phi(k)),
                })
                .collect(),
        )
    }

    pub fn propagator(&self, t: f64) -> BlockOps {
        self.phi(0, t)
    }

    /// `G x`.
    pub fn apply_generator(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut i = 0;
        for b in &self.blocks {
            match b {
                Block::Scalar(g) => {
                    out[i] = g * x[i];
                    i += 1;
                }
                Block::Pair { generator, .. } => {
                    let v = generator.apply([x[i], x[i + 1]]);
                    out[i] = v[0];
                    out[i + 1] = v[1];
                    i += 2;
                }
            }
        }
        out
    }

    /// Operator norm of `exp(t G)` in the block norm.
    pub fn propagator_norm(&self, t: f64) -> f64 {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Scalar(g) => (g * t).exp(),
                Block::Pair {
                    generator,
                    norm_map,
                } => {
                    let inv = norm_map.inverse().expect("norm map is invertible");
                    norm_map.mul(&generator.scale(t).exp()).mul(&inv).norm2()
                }
            })
            .fold(0.0, f64::max)
    }
}

/// How the fast coefficients are laid out and how the fast field is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastLayout {
    /// One coefficient per mode.
    Scalar,
    /// `(u_k, u'_k)` per mode; nonlinearities read `u` and force `u'`.
    Damped,
}

/// Linear part `A` of the fast equation with its decay rate `gamma1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastLinearPart {
    op: BlockOperator,
    layout: FastLayout,
    gamma1: f64,
    n_modes: usize,
}

impl FastLinearPart {
    /// Scalar modes with generator `-rates[k]`. `gamma1` must not exceed any rate.
    pub fn scalar(rates: Vec<f64>, gamma1: f64) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidArgument("no fast modes".into()));
        }
        if !(gamma1 > 0.0) {
            return Err(Error::Assumption(format!("gamma1 = {gamma1} must be positive")));
        }
        if let Some((k, r)) = rates.iter().enumerate().find(|(_, &r)| r < gamma1) {
            return Err(Error::Assumption(format!(
                "(A1): fast mode {} decays at rate {r} < gamma1 = {gamma1}",
                k + 1
            )));
        }
        let n_modes = rates.len();
        let op = BlockOperator::new(rates.into_iter().map(|r| Block::Scalar(-r)).collect());
        Ok(Self {
            op,
            layout: FastLayout::Scalar,
            gamma1,
            n_modes,
        })
    }

    /// 2x2 generator per mode. The block norm is the eigen-adapted norm in
    /// which `exp(tM)` has operator norm exactly `exp(max Re(lambda) t)`;
    /// `gamma1` is the smallest such decay rate over modes.
    pub fn damped(generators: Vec<Mat2>) -> Result<Self> {
        if generators.is_empty() {
            return Err(Error::InvalidArgument("no fast modes".into()));
        }
        let mut blocks = Vec::with_capacity(generators.len());
        let mut gamma1 = f64::INFINITY;
        for (k, m) in generators.iter().enumerate() {
            let (norm_map, decay) = adapted_norm(m).ok_or_else(|| {
                Error::Assumption(format!(
                    "fast mode {} has a defective (critically damped) generator",
                    k + 1
                ))
            })?;
            gamma1 = gamma1.min(decay);
            blocks.push(Block::Pair {
                generator: *m,
                norm_map,
            });
        }
        if !(gamma1 > 0.0) {
            return Err(Error::Assumption(format!(
                "(A1): fast generator does not decay (rate {gamma1})"
            )));
        }
        Ok(Self {
            op: BlockOperator::new(blocks),
            layout: FastLayout::Damped,
            gamma1,
            n_modes: generators.len(),
        })
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn layout(&self) -> FastLayout {
        self.layout
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn operator(&self) -> &BlockOperator {
        &self.op
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        self.op.norm(x)
    }

    /// Per-mode decay rates (`-max Re lambda`).
    pub fn mode_rates(&self) -> Vec<f64> {
        self.op
            .blocks()
            .iter()
            .map(|b| match b {
                Block::Scalar(g) => -g,
                Block::Pair { generator, .. } => {
                    let [a, b] = generator.eigenvalues();
                    -(a.re.max(b.re))
                }
            })
            .collect()
    }

    /// Smallest `-ln ||exp(tA)|| / t` over the given sample times.
    pub fn measured_decay_rate(&self, times: &[f64]) -> f64 {
        times
            .iter()
            .filter(|&&t| t > 0.0)
            .map(|&t| -self.op.propagator_norm(t).ln() / t)
            .fold(f64::INFINITY, f64::min)
    }

    /// `exp(A t / epsilon) x`; the semigroup is one-sided.
    pub fn apply_semigroup(&self, x: &[f64], t: f64, epsilon: f64) -> Result<Vec<f64>> {
        if t < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fast semigroup is only defined for t >= 0 (got {t})"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        check_len("fast coefficients", self.dim(), x.len())?;
        Ok(self.op.propagator(t / epsilon).apply(x))
    }

    /// Coefficient indices of the field read by the nonlinearity (`u`).
    pub fn field_index(&self, mode: usize) -> usize {
        match self.layout {
            FastLayout::Scalar => mode,
            FastLayout::Damped => 2 * mode,
        }
    }

    /// Coefficient index receiving the forcing of mode `mode`.
    pub fn forcing_index(&self, mode: usize) -> usize {
        match self.layout {
            FastLayout::Scalar => mode,
            FastLayout::Damped => 2 * mode + 1,
        }
    }

    /// Bound `c` with `||u||_{L2} <= c ||x||_1` for the field read by `f`.
    pub fn field_bound(&self) -> f64 {
        self.row_bounds().0
    }

    /// Bound `c` with `||forcing embedded in H1||_1 <= c ||forcing||_{L2}`.
    pub fn forcing_bound(&self) -> f64 {
        self.row_bounds().1
    }

    fn row_bounds(&self) -> (f64, f64) {
        let mut field: f64 = 0.0;
        let mut forcing: f64 = 0.0;
        for b in self.op.blocks() {
            match b {
                Block::Scalar(_) => {
                    field = field.max(1.0);
                    forcing = forcing.max(1.0);
                }
                Block::Pair { norm_map, .. } => {
                    let inv = norm_map.inverse().expect("invertible norm map");
                    let r = inv.0[0];
                    field = field.max((r[0] * r[0] + r[1] * r[1]).sqrt());
                    let c = norm_map.apply([0.0, 1.0]);
                    forcing = forcing.max((c[0] * c[0] + c[1] * c[1]).sqrt());
                }
            }
        }
        (field, forcing)
    }
}

/// Norm map `P^{-1}` built from (real Jordan) eigenvectors so that `P^{-1} M P`
/// is diagonal or a scaled rotation. Returns `None` for defective generators.
fn adapted_norm(m: &Mat2) -> Option<(Mat2, f64)> {
    let [l1, l2] = m.eigenvalues();
    let decay = -(l1.re.max(l2.re));
    let scale = 1.0f64.max(l1.norm());
    if (l1 - l2).norm() <= 1e-10 * scale {
        return None;
    }
    let a = m.0;
    let eigvec = |l: num_complex::Complex64| {
        let (x, y) = if a[0][1].abs() >= a[1][0].abs() && a[0][1] != 0.0 {
            (num_complex::Complex64::new(a[0][1], 0.0), l - a[0][0])
        } else if a[1][0] != 0.0 {
            (l - a[1][1], num_complex::Complex64::new(a[1][0], 0.0))
        } else {
            // already diagonal
            if (l - a[0][0]).norm() < (l - a[1][1]).norm() {
                (num_complex::Complex64::new(1.0, 0.0), num_complex::Complex64::new(0.0, 0.0))
            } else {
                (num_complex::Complex64::new(0.0, 0.0), num_complex::Complex64::new(1.0, 0.0))
            }
        };
        let n = (x.norm_sqr() + y.norm_sqr()).sqrt();
        (x / n, y / n)
    };
    let p = if l1.im.abs() > 0.0 {
        let (x, y) = eigvec(l1);
        Mat2::new(x.re, x.im, y.re, y.im)
    } else {
        let (x1, y1) = eigvec(l1);
        let (x2, y2) = eigvec(l2);
        Mat2::new(x1.re, x2.re, y1.re, y2.re)
    };
    Some((p.inverse()?, decay))
}

/// Coefficient layout of the slow space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlowLayout {
    /// `fields` scalar fields of `n` modes each, stored field-major.
    Fields { fields: usize },
    /// `(v_k, v'_k)` per mode with `omega_k = sqrt(lambda_k + beta)`;
    /// nonlinearities read `(v, v')` and force `v'`.
    Wave { beta: f64 },
}

/// Linear part `B` of the slow equation with its growth bound `gamma2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowLinearPart {
    op: BlockOperator,
    layout: SlowLayout,
    gamma2: f64,
    n_modes: usize,
    omega_min: f64,
}

impl SlowLinearPart {
    /// Diagonal generator per coefficient, `fields * n_modes` entries.
    /// `gamma2 = max(0, -min rate)` so that `||e^{Bt}|| <= e^{-gamma2 t}` for `t <= 0`.
    pub fn diagonal(fields: usize, n_modes: usize, rates: Vec<f64>) -> Result<Self> {
        if fields == 0 || n_modes == 0 {
            return Err(Error::InvalidArgument("empty slow space".into()));
        }
        check_len("slow rates", fields * n_modes, rates.len())?;
        let gamma2 = rates.iter().fold(0.0f64, |g, &r| g.max(-r));
        Ok(Self {
            op: BlockOperator::new(rates.into_iter().map(Block::Scalar).collect()),
            layout: SlowLayout::Fields { fields },
            gamma2,
            n_modes,
            omega_min: 1.0,
        })
    }

    /// Zero generator (`e^{Bt} = I`).
    pub fn identity(fields: usize, n_modes: usize) -> Result<Self> {
        Self::diagonal(fields, n_modes, vec![0.0; fields * n_modes])
    }

    /// Wave group `v'' = Laplacian v - beta v` under the beta-weighted energy norm
    /// `(|grad v|^2 + beta |v|^2 + |v'|^2)^{1/2}`, which it preserves exactly.
    pub fn wave(basis: &ModeBasis, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        let n = basis.n_modes();
        let mut blocks = Vec::with_capacity(n);
        let mut omega_min = f64::INFINITY;
        for k in 1..=n {
            let w2 = basis.laplacian_eigenvalue(k) + beta;
            let w = w2.sqrt();
            omega_min = omega_min.min(w);
            blocks.push(Block::Pair {
                generator: Mat2::new(0.0, 1.0, -w2, 0.0),
                norm_map: Mat2::new(w, 0.0, 0.0, 1.0),
            });
        }
        Ok(Self {
            op: BlockOperator::new(blocks),
            layout: SlowLayout::Wave { beta },
            gamma2: 0.0,
            n_modes: n,
            omega_min,
        })
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn layout(&self) -> SlowLayout {
        self.layout
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn operator(&self) -> &BlockOperator {
        &self.op
    }

    pub fn norm(&self, y: &[f64]) -> f64 {
        self.op.norm(y)
    }

    /// Number of physical fields read by the nonlinearities.
    pub fn input_fields(&self) -> usize {
        match self.layout {
            SlowLayout::Fields { fields } => fields,
            SlowLayout::Wave { .. } => 2,
        }
    }

    /// Number of physical fields forced by `g`.
    pub fn output_fields(&self) -> usize {
        match self.layout {
            SlowLayout::Fields { fields } => fields,
            SlowLayout::Wave { .. } => 1,
        }
    }

    /// Coefficient index of mode `mode` of input field `field`.
    pub fn input_index(&self, field: usize, mode: usize) -> usize {
        match self.layout {
            SlowLayout::Fields { .. } => field * self.n_modes + mode,
            SlowLayout::Wave { .. } => 2 * mode + field,
        }
    }

    /// Coefficient index receiving forcing field `field`, mode `mode`.
    pub fn output_index(&self, field: usize, mode: usize) -> usize {
        match self.layout {
            SlowLayout::Fields { .. } => field * self.n_modes + mode,
            SlowLayout::Wave { .. } => 2 * mode + 1,
        }
    }

    /// Weights `w_i` with `sum_i w_i^2 ||s_i||^2 <= ||y||_2^2` over input fields.
    pub fn input_weights(&self) -> Vec<f64> {
        match self.layout {
            SlowLayout::Fields { fields } => vec![1.0; fields],
            SlowLayout::Wave { .. } => vec![self.omega_min, 1.0],
        }
    }

    /// `e^{B t} y` for any sign of `t`.
    pub fn apply_group(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("slow coefficients", self.dim(), y.len())?;
        Ok(self.op.propagator(t).apply(y))
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Point of `H = H1 x H2` with the product norm `||x||_1 + ||y||_2`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StateVector {
    pub fast: Vec<f64>,
    pub slow: Vec<f64>,
}

impl StateVector {
    pub fn new(fast: Vec<f64>, slow: Vec<f64>) -> Self {
        Self { fast, slow }
    }

    pub fn zeros(fast_dim: usize, slow_dim: usize) -> Self {
        Self {
            fast: vec![0.0; fast_dim],
            slow: vec![0.0; slow_dim],
        }
    }

    pub fn norm(&self, fast: &FastLinearPart, slow: &SlowLinearPart) -> f64 {
        fast.norm(&self.fast) + slow.norm(&self.slow)
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        StateVector {
            fast: sub(&self.fast, &other.fast),
            slow: sub(&self.slow, &other.slow),
        }
    }

    pub fn add(&self, other: &StateVector) -> StateVector {
        StateVector {
            fast: add(&self.fast, &other.fast),
            slow: add(&self.slow, &other.slow),
        }
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
