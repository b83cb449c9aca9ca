//! Ground-truth simulators and measurement generation.
//!
//! Three systems are provided: the Lorenz attractor observed through its
//! first coordinate, a frictionless pendulum observed through rendered
//! images, and a generic linear map observed in full (handy for smoke runs
//! and recovery checks). Every trajectory draws from its own PRNG stream
//! derived from `(seed, trajectory id)`, so generation is a parallel map
//! whose result does not depend on scheduling.

mod dataset;

pub use dataset::{
    read_header, DatasetError, DatasetHeader, NormStats, TrajectoryDataset, DATASET_MAGIC,
    DATASET_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;
pub const LORENZ_RHO: f64 = 28.0;

/// Right-hand side of the Lorenz system with the classical chaotic parameters.
pub fn lorenz_rhs(s: &[f64]) -> Vec<f64> {
    lorenz_rhs_with(LORENZ_SIGMA, LORENZ_BETA, LORENZ_RHO, s)
}

pub fn lorenz_rhs_with(sigma: f64, beta: f64, rho: f64, s: &[f64]) -> Vec<f64> {
    let (x, y, z) = (s[0], s[1], s[2]);
    vec![sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step(rhs: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], dt: f64) -> Vec<f64> {
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = rhs(x);
    let k2 = rhs(&axpy(dt / 2.0, &k1));
    let k3 = rhs(&axpy(dt / 2.0, &k2));
    let k4 = rhs(&axpy(dt, &k3));
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

pub const PENDULUM_GRAVITY: f64 = 9.81;
/// RK4 substeps per pendulum step. One RK4 step of 0.1 s drifts the energy
/// by ~1e-3 over a trajectory; ten substeps bring this below 1e-7.
pub const PENDULUM_SUBSTEPS: usize = 10;

/// Advances `(θ, θ̇)` of `θ̈ = −(g/l) sin θ` by `dt`. θ is never wrapped.
pub fn pendulum_step(state: [f64; 2], dt: f64) -> [f64; 2] {
    pendulum_step_with(state, dt, PENDULUM_GRAVITY, PENDULUM_SUBSTEPS)
}

pub fn pendulum_step_with(state: [f64; 2], dt: f64, g_over_l: f64, substeps: usize) -> [f64; 2] {
    let rhs = |s: &[f64]| vec![s[1], -g_over_l * s[0].sin()];
    let h = dt / substeps.max(1) as f64;
    let mut s = state.to_vec();
    for _ in 0..substeps.max(1) {
        s = rk4_step(rhs, &s, h);
    }
    [s[0], s[1]]
}

pub fn pendulum_energy(state: [f64; 2], g_over_l: f64) -> f64 {
    0.5 * state[1] * state[1] - g_over_l * state[0].cos()
}

/// Renders the pendulum bob as an anti-aliased disc on a black
/// `size × size` image (row-major, +y pointing down).
///
/// The disc has radius `size/6` and its center sits at
/// `0.8 · (size/2 − radius) · (sin θ, cos θ)` from the image center, so θ = 0
/// hangs straight down. Intensity falls off linearly over one pixel at the
/// edge.
pub fn render_pendulum(theta: f64, size: usize) -> Vec<f64> {
    let half = size as f64 / 2.0;
    let radius = size as f64 / 6.0;
    let arm = 0.8 * (half - radius);
    let (cx, cy) = (half + arm * theta.sin(), half + arm * theta.cos());
    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            img.push((radius + 0.5 - dist).clamp(0.0, 1.0));
        }
    }
    img
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = theta - two_pi * (theta / two_pi).round();
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumConfig {
    pub dt: f64,
    pub horizon: usize,
    pub g_over_l: f64,
    pub image_size: usize,
    pub noise_std: f64,
    pub theta_range: (f64, f64),
    pub omega_range: (f64, f64),
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            horizon: 100,
            g_over_l: PENDULUM_GRAVITY,
            image_size: 24,
            noise_std: 0.2,
            theta_range: (-std::f64::consts::PI, std::f64::consts::PI),
            omega_range: (-1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub beta: f64,
    pub rho: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Initial state is uniform in `[lo, hi]³`.
    pub init_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            sigma: LORENZ_SIGMA,
            beta: LORENZ_BETA,
            rho: LORENZ_RHO,
            dt: 0.005,
            horizon: 10_000,
            init_range: (-10.0, 10.0),
            noise_std: 2.5,
        }
    }
}

/// `x_{t+1} = A x_t`, observed in full.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConfig {
    /// Row-major `d × d`.
    pub matrix: Vec<f64>,
    pub state_dim: usize,
    pub horizon: usize,
    pub init_range: (f64, f64),
    pub noise_std: f64,
}

impl LinearConfig {
    /// Planar rotation by `angle` radians per step.
    pub fn rotation(angle: f64, horizon: usize, noise_std: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            matrix: vec![c, -s, s, c],
            state_dim: 2,
            horizon,
            init_range: (-1.0, 1.0),
            noise_std,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.state_dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.matrix[i * d + j] * x[j]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemConfig {
    Pendulum(PendulumConfig),
    Lorenz(LorenzConfig),
    Linear(LinearConfig),
}

impl SystemConfig {
    pub fn horizon(&self) -> usize {
        match self {
            SystemConfig::Pendulum(c) => c.horizon,
            SystemConfig::Lorenz(c) => c.horizon,
            SystemConfig::Linear(c) => c.horizon,
        }
    }

    pub fn measurement_dim(&self) -> usize {
        match self {
            SystemConfig::Pendulum(c) => c.image_size * c.image_size,
            SystemConfig::Lorenz(_) => 1,
            SystemConfig::Linear(c) => c.state_dim,
        }
    }

    pub fn noise_std(&self) -> f64 {
        match self {
            SystemConfig::Pendulum(c) => c.noise_std,
            SystemConfig::Lorenz(c) => c.noise_std,
            SystemConfig::Linear(c) => c.noise_std,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, SystemConfig::Pendulum(_))
    }

    /// Noiseless latent states of one trajectory, `horizon` rows.
    pub fn simulate(&self, rng: &mut Xoshiro256PlusPlus) -> Vec<Vec<f64>> {
        match self {
            SystemConfig::Pendulum(c) => {
                let mut s = [
                    rng.gen_range(c.theta_range.0..=c.theta_range.1),
                    rng.gen_range(c.omega_range.0..=c.omega_range.1),
                ];
                let mut out = Vec::with_capacity(c.horizon);
                for _ in 0..c.horizon {
                    out.push(s.to_vec());
                    s = pendulum_step_with(s, c.dt, c.g_over_l, PENDULUM_SUBSTEPS);
                }
                out
            }
            SystemConfig::Lorenz(c) => {
                let mut s: Vec<f64> = (0..3)
                    .map(|_| rng.gen_range(c.init_range.0..=c.init_range.1))
                    .collect();
                let rhs = |v: &[f64]| lorenz_rhs_with(c.sigma, c.beta, c.rho, v);
                let mut out = Vec::with_capacity(c.horizon);
                for _ in 0..c.horizon {
                    out.push(s.clone());
                    s = rk4_step(rhs, &s, c.dt);
                }
                out
            }
            SystemConfig::Linear(c) => {
                let mut s: Vec<f64> = (0..c.state_dim)
                    .map(|_| rng.gen_range(c.init_range.0..=c.init_range.1))
                    .collect();
                let mut out = Vec::with_capacity(c.horizon);
                for _ in 0..c.horizon {
                    out.push(s.clone());
                    s = c.apply(&s);
                }
                out
            }
        }
    }

    /// Noiseless measurement of a latent state.
    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        match self {
            SystemConfig::Pendulum(c) => render_pendulum(state[0], c.image_size),
            SystemConfig::Lorenz(_) => vec![state[0]],
            SystemConfig::Linear(_) => state.to_vec(),
        }
    }
}

/// Independent stream for trajectory `id` of a run seeded with `seed`.
pub fn trajectory_rng(seed: u64, id: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.rotate_left(32) ^ id,
    )
}

/// Box–Muller standard normal sampler (caches the second variate).
#[derive(Clone, Debug, Default)]
pub struct GaussianSampler {
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample(&mut self, rng: &mut impl Rng) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Simulates `n` trajectories and corrupts them with i.i.d. Gaussian noise.
///
/// Values are rounded to `f32` so a dataset held in memory is identical to
/// the same dataset read back from disk.
pub fn generate_dataset(config: &SystemConfig, n: usize, seed: u64) -> TrajectoryDataset {
    let noise = config.noise_std();
    let per_traj: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = trajectory_rng(seed, j as u64);
            let states = config.simulate(&mut rng);
            let mut normal = GaussianSampler::new();
            let mut clean = Vec::new();
            let mut noisy = Vec::new();
            for s in &states {
                for v in config.observe(s) {
                    clean.push(v as f32 as f64);
                    let eps = if noise > 0.0 {
                        noise * normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    noisy.push((v + eps) as f32 as f64);
                }
            }
            (noisy, clean)
        })
        .collect();
    let (meas, truth): (Vec<_>, Vec<_>) = per_traj.into_iter().unzip();
    TrajectoryDataset::new(
        n,
        config.horizon(),
        config.measurement_dim(),
        meas.concat(),
        Some(truth.concat()),
        noise,
        config.is_image(),
    )
    .expect("generated dataset is consistent")
}

#[cfg(test)]
mod tests;
