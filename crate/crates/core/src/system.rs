//! Full problem description shared by every solver.

use crate::coupling::NonlinearityPair;
use crate::error::{Error, Result};
use crate::lyapunov_perron::WeightConfig;
use crate::noise::{sample_noise, NoisePath, TimeGrid};
use crate::spectral::{FastLinearPart, ModeBasis, SlowLinearPart};

/// `dx = (1/eps)(A x + f(x, y)) dt + (sigma/sqrt(eps)) dW`, `dy = (B y + g(x, y)) dt`.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub name: String,
    pub basis: ModeBasis,
    pub fast: FastLinearPart,
    pub slow: SlowLinearPart,
    pub coupling: NonlinearityPair,
    pub mu: f64,
    pub epsilon: f64,
    pub sigma: f64,
    /// Number of driven fast modes.
    pub noise_modes: usize,
}

impl SystemSpec {
    pub fn gamma1(&self) -> f64 {
        self.fast.gamma1()
    }

    pub fn gamma2(&self) -> f64 {
        self.slow.gamma2()
    }

    pub fn lipschitz(&self) -> f64 {
        self.coupling.lipschitz()
    }

    pub fn fast_dim(&self) -> usize {
        self.fast.dim()
    }

    pub fn slow_dim(&self) -> usize {
        self.slow.dim()
    }

    pub fn weights(&self) -> WeightConfig {
        WeightConfig {
            mu: self.mu,
            epsilon: self.epsilon,
            gamma1: self.gamma1(),
            gamma2: self.gamma2(),
            lipschitz: self.lipschitz(),
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    pub fn with_coupling(&self, coupling: NonlinearityPair) -> Self {
        Self {
            coupling,
            ..self.clone()
        }
    }

    /// Dimension and gate checks: (A3), the `mu` gap and contraction.
    pub fn validate(&self) -> Result<()> {
        if self.coupling.fast_dim() != self.fast_dim() || self.coupling.slow_dim() != self.slow_dim() {
            return Err(Error::InvalidArgument(format!(
                "coupling acts on {}x{} coefficients, system has {}x{}",
                self.coupling.fast_dim(),
                self.coupling.slow_dim(),
                self.fast_dim(),
                self.slow_dim()
            )));
        }
        if self.noise_modes > self.fast.n_modes() {
            return Err(Error::InvalidArgument(format!(
                "{} noise components exceed {} fast modes",
                self.noise_modes,
                self.fast.n_modes()
            )));
        }
        let violations = self.weights().violations();
        if let Some(v) = violations.into_iter().next() {
            return Err(Error::Assumption(v));
        }
        Ok(())
    }

    /// Noise path in the original scaling: OU process `eta^{1/eps}`.
    pub fn original_noise(&self, grid: TimeGrid, seed: u64) -> Result<NoisePath> {
        sample_noise(grid, &self.fast, self.noise_modes, self.sigma, self.epsilon, seed)
    }

    /// Noise path on the fast time scale: OU process `xi` (scale 1).
    pub fn unscaled_noise(&self, grid: TimeGrid, seed: u64) -> Result<NoisePath> {
        sample_noise(grid, &self.fast, self.noise_modes, self.sigma, 1.0, seed)
    }
}
