//! Teacher training and the samplers.
//!
//! All samplers start from the pseudo-dense scan `P*` noised by offset:
//! `Gᵀ = P* + √(1−ᾱᵀ) ε`. Reverse updates act on the offset `Gᵗ − P*`, which
//! is the quantity the forward process perturbs.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Scene, SceneRole};
use crate::net::{
    encode_condition, points_to_array, Adam, AdamConfig, Architecture, DenoiserModel, Role, Tape,
};
use crate::schedule::{diffuse_offset, gaussian_noise, pseudo_dense, NoiseSchedule};

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scan: Scene,
    pub gt: Scene,
}

/// Seeded generator for an independent stream of a seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How a student turns one noise prediction into a clean scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inversion {
    /// The reverse-step formula applied once at `t`:
    /// `G⁰ = P* + (Gᵗ − P* − (1−αᵗ)/√(1−ᾱᵗ) ε̂)/√αᵗ`.
    Paper,
    /// Exact inverse of offset noising: `G⁰ = Gᵗ − √(1−ᾱᵗ) ε̂`.
    #[default]
    OffsetConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub architecture: Architecture,
    /// Passes over the training set; one optimizer step per scene.
    pub epochs: usize,
    pub lr: f64,
    /// GT points drawn per step; all points when the scene is smaller.
    pub batch_points: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            epochs: 20,
            lr: 2e-3,
            batch_points: 512,
            seed: 0,
        }
    }
}

/// Teacher plus its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: DenoiserModel,
    pub epoch_losses: Vec<f64>,
}

/// Mean over rows of `‖ε − ε̂‖²` for points `Gᵗ = G + √(1−ᾱᵗ)ε`, recorded on
/// `tape`. Returns the loss variable.
pub fn record_denoising_loss(
    tape: &mut Tape,
    model: &DenoiserModel,
    bound: &crate::net::Bound,
    scan: &Scene,
    clean: &[Point3],
    t: usize,
    noise: &[Point3],
    sched: &NoiseSchedule,
) -> Result<crate::net::Var> {
    let noisy = diffuse_offset(clean, t, noise, sched)?;
    let cond = encode_condition(scan, &noisy.points);
    let x = tape.leaf(points_to_array(&noisy.points));
    let c = tape.leaf(cond.features);
    let pred = model.forward_on(tape, bound, x, c, t)?;
    let target = tape.leaf(points_to_array(noise));
    let diff = tape.sub(pred, target);
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / clean.len() as f64))
}

/// Fits a teacher on `dataset` with Adam. Deterministic in `cfg.seed`.
pub fn train_teacher(
    dataset: &[ScenePair],
    sched: &NoiseSchedule,
    cfg: &TeacherConfig,
) -> Result<TrainedTeacher> {
    if dataset.is_empty() {
        return Err(Error::invalid("teacher training needs at least one scene"));
    }
    if cfg.batch_points == 0 {
        return Err(Error::invalid("batch_points must be positive"));
    }
    let mut model = DenoiserModel::new(cfg.architecture.clone(), Role::Teacher, cfg.seed)?;
    let mut adam = Adam::new(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream_rng(cfg.seed, 1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for &s in &order {
            let pair = &dataset[s];
            let gt = pair.gt.points();
            let batch: Vec<Point3> = if gt.len() <= cfg.batch_points {
                gt.to_vec()
            } else {
                sample(&mut rng, gt.len(), cfg.batch_points)
                    .into_iter()
                    .map(|i| gt[i])
                    .collect()
            };
            let t = rng.random_range(1..=sched.steps());
            let noise = gaussian_noise(&mut rng, batch.len());
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = record_denoising_loss(&mut tape, &model, &bound, &pair.scan, &batch, t, &noise, sched)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training {
                    message: "teacher loss became non-finite".into(),
                    diagnostics: format!("epoch {epoch}, scene {s}, t {t}"),
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &bound);
            adam.step(&mut model)?;
        }
        epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(TrainedTeacher {
        model,
        epoch_losses,
    })
}

/// Mean denoising loss over `dataset` with `draws` seeded `(t, ε)` draws per
/// scene, on every GT point.
pub fn denoising_loss(
    model: &DenoiserModel,
    dataset: &[ScenePair],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() || draws == 0 {
        return Err(Error::invalid("need at least one scene and one draw"));
    }
    let mut rng = stream_rng(seed, 2);
    let mut total = 0.0;
    for pair in dataset {
        for _ in 0..draws {
            let t = rng.random_range(1..=sched.steps());
            let noise = gaussian_noise(&mut rng, pair.gt.len());
            let noisy = diffuse_offset(pair.gt.points(), t, &noise, sched)?;
            let pred = predict_noise(model, &pair.scan, &noisy.points, t)?;
            let sq: f64 = pred
                .rows()
                .into_iter()
                .zip(&noise)
                .map(|(r, e)| (0..3).map(|a| (r[a] - e[a]).powi(2)).sum::<f64>())
                .sum();
            total += sq / pair.gt.len() as f64;
        }
    }
    Ok(total / (dataset.len() * draws) as f64)
}

/// `ε̂(points, P, t)` with the condition recomputed for `points`.
pub fn predict_noise(model: &DenoiserModel, scan: &Scene, points: &[Point3], t: usize) -> Result<Array2<f64>> {
    let cond = encode_condition(scan, points);
    model.forward(points, &cond, t)
}

/// `(xᵗ − (1−αᵗ)/√(1−ᾱᵗ) ε̂)/√αᵗ + σᵗz`; the `σᵗz` term is present iff `z`
/// is given.
pub fn reverse_formula(
    x: &[Point3],
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&[Point3]>,
) -> Result<Vec<Point3>> {
    sched.check_timestep(t)?;
    if eps_hat.dim() != (x.len(), 3) || z.is_some_and(|z| z.len() != x.len()) {
        return Err(Error::invalid("reverse step inputs disagree in shape"));
    }
    let alpha = sched.alpha(t);
    let inv = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / sched.noise_scale(t);
    let sigma = sched.sigma(t);
    Ok(x.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = [0.0; 3];
            for a in 0..3 {
                q[a] = inv * (p[a] - coef * eps_hat[[i, a]]);
                if let Some(z) = z {
                    q[a] += sigma * z[i][a];
                }
            }
            q
        })
        .collect())
}

/// One denoising step on absolute coordinates:
/// `G^{t−1} = (Gᵗ − (1−αᵗ)/√(1−ᾱᵗ) ε̂)/√αᵗ + σᵗz`.
pub fn reverse_step(
    model: &DenoiserModel,
    g_t: &[Point3],
    scan: &Scene,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&[Point3]>,
) -> Result<Vec<Point3>> {
    sched.check_timestep(t)?;
    let eps = predict_noise(model, scan, g_t, t)?;
    reverse_formula(g_t, &eps, t, sched, z)
}

/// Step count, descending timestep subsequence and noise switch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub timesteps: Vec<usize>,
    /// Adds `σᵗz` in multi-step sampling.
    pub stochastic: bool,
    pub k_dup: usize,
}

impl SamplerConfig {
    /// `steps` timesteps evenly spaced from `T` down to 1. A single step
    /// uses `T` alone.
    pub fn evenly_spaced(total: usize, steps: usize, k_dup: usize) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!("steps must be in [1, {total}], got {steps}")));
        }
        let timesteps = if steps == 1 {
            vec![total]
        } else {
            let span = (total - 1) as f64 / (steps - 1) as f64;
            (0..steps)
                .map(|i| (total as f64 - span * i as f64).round() as usize)
                .collect()
        };
        let cfg = Self {
            timesteps,
            stochastic: false,
            k_dup,
        };
        cfg.validate(total)?;
        Ok(cfg)
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        let ts = &self.timesteps;
        if ts.is_empty() {
            return Err(Error::invalid("sampler needs at least one timestep"));
        }
        if self.k_dup == 0 {
            return Err(Error::invalid("K_dup must be at least 1"));
        }
        if ts.iter().any(|&t| t == 0 || t > total) {
            return Err(Error::invalid(format!("timesteps must lie in [1, {total}]")));
        }
        if ts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("timesteps must be strictly descending"));
        }
        if ts.len() > 1 && *ts.last().unwrap() != 1 {
            return Err(Error::invalid("a multi-step subsequence must end at t = 1"));
        }
        Ok(())
    }
}

/// `Gᵀ` and the pseudo-dense scan it was built from.
fn initial_state(scan: &Scene, sched: &NoiseSchedule, k_dup: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<Point3>, Vec<Point3>)> {
    let dense = pseudo_dense(scan, k_dup)?.into_points();
    let noise = gaussian_noise(rng, dense.len());
    let g = diffuse_offset(&dense, sched.steps(), &noise, sched)?.points;
    Ok((dense, g))
}

fn offsets(g: &[Point3], anchor: &[Point3]) -> Vec<Point3> {
    g.iter()
        .zip(anchor)
        .map(|(p, q)| [p[0] - q[0], p[1] - q[1], p[2] - q[2]])
        .collect()
}

fn shifted(off: Vec<Point3>, anchor: &[Point3]) -> Vec<Point3> {
    off.into_iter()
        .zip(anchor)
        .map(|(o, q)| [q[0] + o[0], q[1] + o[1], q[2] + o[2]])
        .collect()
}

/// Applies `inversion` to one prediction at timestep `t`.
pub fn invert(
    g_t: &[Point3],
    anchor: &[Point3],
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    inversion: Inversion,
) -> Result<Vec<Point3>> {
    match inversion {
        Inversion::Paper => Ok(shifted(
            reverse_formula(&offsets(g_t, anchor), eps_hat, t, sched, None)?,
            anchor,
        )),
        Inversion::OffsetConsistent => {
            sched.check_timestep(t)?;
            if eps_hat.dim() != (g_t.len(), 3) {
                return Err(Error::invalid("prediction shape does not match the points"));
            }
            let s = sched.noise_scale(t);
            Ok(g_t
                .iter()
                .enumerate()
                .map(|(i, p)| [p[0] - s * eps_hat[[i, 0]], p[1] - s * eps_hat[[i, 1]], p[2] - s * eps_hat[[i, 2]]])
                .collect())
        }
    }
}

/// Reverse chain over `cfg.timesteps`. With `steps = T` this is the full
/// denoising trajectory.
pub fn sample_multistep(
    model: &DenoiserModel,
    scan: &Scene,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Scene> {
    cfg.validate(sched.steps())?;
    let mut rng = stream_rng(seed, 3);
    let (anchor, mut g) = initial_state(scan, sched, cfg.k_dup, &mut rng)?;
    for &t in &cfg.timesteps {
        let eps = predict_noise(model, scan, &g, t)?;
        let z = cfg.stochastic.then(|| gaussian_noise(&mut rng, g.len()));
        let off = reverse_formula(&offsets(&g, &anchor), &eps, t, sched, z.as_deref())?;
        g = shifted(off, &anchor);
    }
    Scene::new(g, SceneRole::Completion)
}

/// Single prediction at `T` followed by the reverse formula once.
pub fn sample_onestep(model: &DenoiserModel, scan: &Scene, sched: &NoiseSchedule, k_dup: usize, seed: u64) -> Result<Scene> {
    sample_onestep_with(model, scan, sched, k_dup, seed, Inversion::Paper)
}

pub fn sample_onestep_with(
    model: &DenoiserModel,
    scan: &Scene,
    sched: &NoiseSchedule,
    k_dup: usize,
    seed: u64,
    inversion: Inversion,
) -> Result<Scene> {
    let cfg = SamplerConfig {
        timesteps: vec![sched.steps()],
        stochastic: false,
        k_dup,
    };
    sample_fewstep(model, scan, sched, &cfg, seed, inversion)
}

/// Student generation: invert at each timestep, then re-noise the clean
/// estimate to the next timestep with a fresh draw.
pub fn sample_fewstep(
    model: &DenoiserModel,
    scan: &Scene,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    inversion: Inversion,
) -> Result<Scene> {
    cfg.validate(sched.steps())?;
    let mut rng = stream_rng(seed, 3);
    let (anchor, mut g) = initial_state(scan, sched, cfg.k_dup, &mut rng)?;
    let mut clean = Vec::new();
    for (i, &t) in cfg.timesteps.iter().enumerate() {
        let eps = predict_noise(model, scan, &g, t)?;
        clean = invert(&g, &anchor, &eps, t, sched, inversion)?;
        if let Some(&next) = cfg.timesteps.get(i + 1) {
            let noise = gaussian_noise(&mut rng, clean.len());
            g = diffuse_offset(&clean, next, &noise, sched)?.points;
        }
    }
    Scene::new(clean, SceneRole::Completion)
}
