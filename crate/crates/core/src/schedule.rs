//! Noise schedule and the noising operators.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`. None of these functions own an RNG;
//! the caller always supplies the noise draw.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Scene, SceneRole};

/// Linear β schedule with its derived products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs T ≥ 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < β_start ≤ β_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-process noise scale, `σᵗ = √βᵗ`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// `√(1 − ᾱᵗ)`, the standard deviation of the offset noise at `t`.
    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// A noised scene together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub points: Vec<Point3>,
    pub t: usize,
    pub noise: Vec<Point3>,
}

impl NoisySample {
    pub fn to_scene(&self) -> Result<Scene> {
        Scene::new(self.points.clone(), SceneRole::Noisy)
    }
}

fn check_shapes(sched: &NoiseSchedule, t: usize, n: usize, noise: &[Point3]) -> Result<()> {
    sched.check_timestep(t)?;
    if noise.len() != n {
        return Err(Error::invalid(format!(
            "noise has {} rows but the scene has {n} points",
            noise.len()
        )));
    }
    Ok(())
}

/// `xᵗ = √ᾱᵗ x⁰ + √(1−ᾱᵗ) ε`, applied per point.
pub fn diffuse_standard(
    x0: &[Point3],
    t: usize,
    noise: &[Point3],
    sched: &NoiseSchedule,
) -> Result<NoisySample> {
    check_shapes(sched, t, x0.len(), noise)?;
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.noise_scale(t);
    let points = x0
        .iter()
        .zip(noise)
        .map(|(p, e)| [a * p[0] + s * e[0], a * p[1] + s * e[1], a * p[2] + s * e[2]])
        .collect();
    Ok(NoisySample {
        points,
        t,
        noise: noise.to_vec(),
    })
}

/// Local point-offset noising: `pᵗ = p + √(1−ᾱᵗ) ε`. Points are never rescaled.
pub fn diffuse_offset(
    points: &[Point3],
    t: usize,
    noise: &[Point3],
    sched: &NoiseSchedule,
) -> Result<NoisySample> {
    check_shapes(sched, t, points.len(), noise)?;
    let s = sched.noise_scale(t);
    let out = points
        .iter()
        .zip(noise)
        .map(|(p, e)| [p[0] + s * e[0], p[1] + s * e[1], p[2] + s * e[2]])
        .collect();
    Ok(NoisySample {
        points: out,
        t,
        noise: noise.to_vec(),
    })
}

/// Repeats the scan `k_dup` times: point `i·N + j` is scan point `j`.
pub fn pseudo_dense(scan: &Scene, k_dup: usize) -> Result<Scene> {
    if k_dup == 0 {
        return Err(Error::invalid("K_dup must be at least 1"));
    }
    let mut points = Vec::with_capacity(scan.len() * k_dup);
    for _ in 0..k_dup {
        points.extend_from_slice(scan.points());
    }
    Scene::new(points, scan.role())
}

/// `n` independent standard-normal 3-vectors.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect()
}
