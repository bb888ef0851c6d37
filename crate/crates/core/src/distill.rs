//! Few-step student distillation.
//!
//! Each iteration the student `η` generates a completion in one step, takes a
//! gradient step on the score-difference surrogate plus the structural loss,
//! and the auxiliary model `φ` is then re-fit on that completion.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_noise, record_denoising_loss, stream_rng, Inversion, ScenePair};
use crate::error::{Error, Result};
use crate::geometry::{
    correspond_keypoints, distance_matrix, gather, nearest_index, select_keypoints, select_keypoints_baseline,
    DistanceMatrix, KeypointMethod, KeypointSet, Point3, Scene, SceneRole,
};
use crate::net::{array_to_points, encode_condition, points_to_array, sgd_step, DenoiserModel, Role, Tape, Var};
use crate::schedule::{gaussian_noise, pseudo_dense, diffuse_offset, NoiseSchedule};

/// Scaling of the summed terms inside the student objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// The surrogate summed over points and the full squared Frobenius norm.
    Sum,
    /// The surrogate divided by the point count and the Frobenius term by
    /// `n²`, so every term is a mean like the scene loss.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda_scene: f64,
    pub lambda_point: f64,
    pub keypoint_fraction: f64,
    pub keypoint_method: KeypointMethod,
    pub k_nn: usize,
    /// Fraction of GT points drawn as keypoint candidates.
    pub prefilter: f64,
    pub k_dup: usize,
    /// Inclusive timestep range for the surrogate; `None` means
    /// `[⌈0.02T⌉, ⌊0.98T⌋]`.
    pub t_range: Option<(usize, usize)>,
    pub student_steps: usize,
    pub aux_steps: usize,
    pub lr_student: f64,
    pub lr_aux: f64,
    pub iterations: usize,
    pub seed: u64,
    pub inversion: Inversion,
    pub reduction: Reduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_scene: 0.5,
            lambda_point: 0.01,
            keypoint_fraction: 1.0 / 30.0,
            keypoint_method: KeypointMethod::Curvature,
            k_nn: 180,
            prefilter: 0.1,
            k_dup: 10,
            t_range: None,
            student_steps: 1,
            aux_steps: 1,
            lr_student: 5e-2,
            lr_aux: 1e-3,
            iterations: 500,
            seed: 0,
            inversion: Inversion::default(),
            reduction: Reduction::default(),
        }
    }
}

impl DistillConfig {
    pub fn timestep_range(&self, total: usize) -> (usize, usize) {
        self.t_range.unwrap_or_else(|| {
            let lo = ((0.02 * total as f64).ceil() as usize).max(1);
            let hi = ((0.98 * total as f64).floor() as usize).clamp(lo, total);
            (lo, hi)
        })
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if !(self.lambda_scene >= 0.0 && self.lambda_point >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let (lo, hi) = self.timestep_range(total);
        if lo < 1 || hi > total || lo > hi {
            return Err(Error::invalid(format!("timestep range [{lo}, {hi}] not within [1, {total}]")));
        }
        if self.student_steps == 0 || self.aux_steps == 0 {
            return Err(Error::invalid("alternation ratio components must be at least 1"));
        }
        if self.k_dup == 0 {
            return Err(Error::invalid("K_dup must be at least 1"));
        }
        if !(self.lr_student >= 0.0 && self.lr_aux >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        Ok(())
    }
}

fn check_finite(what: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training {
            message: format!("{what} produced non-finite values"),
            diagnostics: format!("shape {:?}", a.dim()),
        })
    }
}

/// Records `⟨stopgrad(ε_θ − ε_φ), Gᵗ⟩` with `Gᵗ = G⁰ + √(1−ᾱᵗ)ε` and returns
/// it with the mean per-point `‖ε_θ − ε_φ‖²`.
#[allow(clippy::too_many_arguments)]
pub fn kl_surrogate_loss(
    tape: &mut Tape,
    teacher: &DenoiserModel,
    aux: &DenoiserModel,
    g0: Var,
    scan: &Scene,
    t: usize,
    noise: &[Point3],
    sched: &NoiseSchedule,
    reduction: Reduction,
) -> Result<(Var, f64)> {
    let clean = array_to_points(tape.value(g0));
    let noisy = diffuse_offset(&clean, t, noise, sched)?;
    let s = sched.noise_scale(t);
    let offset = tape.leaf(points_to_array(noise).mapv(|e| s * e));
    let g_t = tape.add(g0, offset);
    let cond = encode_condition(scan, &noisy.points);
    let eps_teacher = teacher.forward(&noisy.points, &cond, t)?;
    let eps_aux = aux.forward(&noisy.points, &cond, t)?;
    check_finite("teacher", &eps_teacher)?;
    check_finite("auxiliary model", &eps_aux)?;
    let d = eps_teacher - eps_aux;
    let m = clean.len() as f64;
    let gap = d.iter().map(|v| v * v).sum::<f64>() / m;
    let loss = tape.dot_const(g_t, d);
    let loss = match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => tape.scale(loss, 1.0 / m),
    };
    Ok((loss, gap))
}

/// One-sided mean squared distance from each completion point to its
/// nearest ground-truth point.
pub fn scene_loss(completion: &Scene, gt: &Scene) -> f64 {
    let g = gt.points();
    completion
        .points()
        .iter()
        .map(|p| crate::geometry::dist2(p, &g[nearest_index(g, p)]))
        .sum::<f64>()
        / completion.len() as f64
}

/// `‖D − D_G‖²_F`.
pub fn point_loss(d: &DistanceMatrix, d_g: &DistanceMatrix) -> Result<f64> {
    if d.size() != d_g.size() {
        return Err(Error::invalid(format!(
            "distance matrices are {}×{0} and {}×{1}",
            d.size(),
            d_g.size()
        )));
    }
    Ok(d.entries()
        .iter()
        .zip(d_g.entries())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

/// Components of `λ_scene·L_scene + λ_point·L_point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralTerms {
    pub scene: f64,
    pub point: f64,
    pub total: f64,
}

impl StructuralTerms {
    pub fn weighted(scene: f64, point: f64, lambda_scene: f64, lambda_point: f64) -> Self {
        Self {
            scene,
            point,
            total: lambda_scene * scene + lambda_point * point,
        }
    }
}

/// Keypoints on the ground truth per `cfg`.
pub fn gt_keypoints(gt: &Scene, cfg: &DistillConfig, seed: u64) -> Result<KeypointSet> {
    match cfg.keypoint_method {
        KeypointMethod::Curvature => {
            let k = cfg.k_nn.min(gt.len().saturating_sub(1)).max(1);
            select_keypoints(gt, cfg.keypoint_fraction, k, cfg.prefilter, seed)
        }
        m => select_keypoints_baseline(gt, cfg.keypoint_fraction, m, seed),
    }
}

/// Structural loss with keypoints already chosen on `gt`.
pub fn structural_loss(completion: &Scene, gt: &Scene, keys: &KeypointSet, cfg: &DistillConfig) -> Result<StructuralTerms> {
    let d = distance_matrix(gt, keys)?;
    let matched = correspond_keypoints(gt, keys, completion);
    let d_g = distance_matrix(completion, &matched)?;
    Ok(StructuralTerms::weighted(
        scene_loss(completion, gt),
        point_loss(&d, &d_g)?,
        cfg.lambda_scene,
        cfg.lambda_point,
    ))
}

/// Records both structural terms on `tape`; returns `(scene, point)`.
pub fn record_structural(tape: &mut Tape, g0: Var, gt: &Scene, keys: &KeypointSet) -> Result<(Var, Var)> {
    let completion = Scene::new(array_to_points(tape.value(g0)), SceneRole::Completion)?;
    let scene = tape.nearest_sq_mean(g0, gt.points());
    let matched = correspond_keypoints(gt, keys, &completion);
    let d = DistanceMatrix::from_points(&gather(gt, keys)?);
    let n = d.size();
    let d = tape.leaf(Array2::from_shape_vec((n, n), d.entries().to_vec()).expect("square"));
    let rows = tape.gather_rows(g0, matched.indices);
    let d_g = tape.pairwise_distance(rows);
    let diff = tape.sub(d_g, d);
    let point = tape.sum_squares(diff);
    Ok((scene, point))
}

/// One denoising-loss SGD step on `aux` with `completion` as data. Returns
/// the loss before the update.
pub fn auxiliary_step(
    aux: &mut DenoiserModel,
    completion: &Scene,
    scan: &Scene,
    sched: &NoiseSchedule,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = rng.random_range(1..=sched.steps());
    let noise = gaussian_noise(rng, completion.len());
    let mut tape = Tape::new();
    let bound = aux.bind(&mut tape);
    let loss = record_denoising_loss(&mut tape, aux, &bound, scan, completion.points(), t, &noise, sched)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Training {
            message: "auxiliary loss became non-finite".into(),
            diagnostics: format!("t {t}"),
        });
    }
    let grads = tape.backward(loss)?;
    aux.accumulate_grads(&grads, &bound);
    sgd_step(aux, lr)?;
    Ok(value)
}

/// Per-iteration losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub scene: usize,
    pub t: usize,
    /// Mean per-point `‖ε_θ − ε_φ‖²`.
    pub kl: f64,
    pub scene_loss: f64,
    pub point_loss: f64,
    pub aux_loss: f64,
}

/// Teacher, auxiliary and student models plus the loop bookkeeping.
#[derive(Debug, Clone)]
pub struct DistillState {
    teacher: DenoiserModel,
    teacher_checksum: String,
    pub aux: DenoiserModel,
    pub student: DenoiserModel,
    pub iteration: usize,
    pub history: Vec<HistoryRecord>,
    keypoints: HashMap<usize, KeypointSet>,
    rng: ChaCha8Rng,
    cfg: DistillConfig,
}

impl DistillState {
    /// `φ` and `η` start as copies of `θ`.
    pub fn new(teacher: &DenoiserModel, cfg: DistillConfig) -> Self {
        let teacher = teacher.clone_as(Role::Teacher);
        Self {
            teacher_checksum: teacher.checksum(),
            aux: teacher.clone_as(Role::Auxiliary),
            student: teacher.clone_as(Role::Student),
            teacher,
            iteration: 0,
            history: Vec::new(),
            keypoints: HashMap::new(),
            rng: stream_rng(cfg.seed, 4),
            cfg,
        }
    }

    pub fn teacher(&self) -> &DenoiserModel {
        &self.teacher
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    fn keypoints_for(&mut self, index: usize, gt: &Scene) -> Result<KeypointSet> {
        if let Some(k) = self.keypoints.get(&index) {
            return Ok(k.clone());
        }
        let keys = gt_keypoints(gt, &self.cfg, self.cfg.seed ^ (index as u64).wrapping_mul(0x9e37_79b9))?;
        self.keypoints.insert(index, keys.clone());
        Ok(keys)
    }

    /// One student update on scene `index` of the dataset. Returns the
    /// completion it generated (detached) and the loss record fields.
    fn student_update(&mut self, index: usize, pair: &ScenePair, sched: &NoiseSchedule) -> Result<(Scene, usize, f64, StructuralTerms)> {
        let cfg = &self.cfg;
        let total = sched.steps();
        let anchor = pseudo_dense(&pair.scan, cfg.k_dup)?.into_points();
        let init = gaussian_noise(&mut self.rng, anchor.len());
        let g_big_t = diffuse_offset(&anchor, total, &init, sched)?.points;
        let (lo, hi) = cfg.timestep_range(total);
        let t = self.rng.random_range(lo..=hi);
        let noise = gaussian_noise(&mut self.rng, anchor.len());
        let keys = self.keypoints_for(index, &pair.gt)?;
        let cfg = &self.cfg;

        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape);
        let g0 = record_student_completion(&mut tape, &self.student, &bound, &pair.scan, &anchor, &g_big_t, sched, cfg.inversion)?;
        check_finite("student", tape.value(g0))?;
        let (kl, gap) = kl_surrogate_loss(&mut tape, &self.teacher, &self.aux, g0, &pair.scan, t, &noise, sched, cfg.reduction)?;
        let (scene, point) = record_structural(&mut tape, g0, &pair.gt, &keys)?;
        let terms = StructuralTerms::weighted(tape.scalar(scene), tape.scalar(point), cfg.lambda_scene, cfg.lambda_point);
        let point_scale = match cfg.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / (keys.len() * keys.len()) as f64,
        };
        let ws = tape.scale(scene, cfg.lambda_scene);
        let wp = tape.scale(point, cfg.lambda_point * point_scale);
        let structural = tape.add(ws, wp);
        let total_loss = tape.add(kl, structural);
        let completion = Scene::new(array_to_points(tape.value(g0)), SceneRole::Completion)?;
        let grads = tape.backward(total_loss)?;
        self.student.accumulate_grads(&grads, &bound);
        sgd_step(&mut self.student, cfg.lr_student)?;
        Ok((completion, t, gap, terms))
    }

    /// One full iteration on `dataset[index]`. On failure the student and
    /// auxiliary model are restored to their state before the iteration.
    pub fn step(&mut self, index: usize, pair: &ScenePair, sched: &NoiseSchedule) -> Result<&HistoryRecord> {
        let backup = (self.student.clone(), self.aux.clone());
        match self.step_inner(index, pair, sched) {
            Ok(()) => Ok(self.history.last().expect("pushed")),
            Err(e) => {
                (self.student, self.aux) = backup;
                Err(match e {
                    Error::Training { message, diagnostics } => Error::Training {
                        message,
                        diagnostics: format!("iteration {}, scene {index}: {diagnostics}", self.iteration),
                    },
                    other => other,
                })
            }
        }
    }

    fn step_inner(&mut self, index: usize, pair: &ScenePair, sched: &NoiseSchedule) -> Result<()> {
        let mut last = None;
        for _ in 0..self.cfg.student_steps {
            last = Some(self.student_update(index, pair, sched)?);
        }
        let (completion, t, gap, terms) = last.expect("student_steps ≥ 1");
        let mut aux_loss = 0.0;
        for _ in 0..self.cfg.aux_steps {
            aux_loss = auxiliary_step(&mut self.aux, &completion, &pair.scan, sched, self.cfg.lr_aux, &mut self.rng)?;
        }
        if self.teacher.checksum() != self.teacher_checksum {
            return Err(Error::State("teacher parameters changed during distillation".into()));
        }
        self.history.push(HistoryRecord {
            iteration: self.iteration,
            scene: index,
            t,
            kl: gap,
            scene_loss: terms.scene,
            point_loss: terms.point,
            aux_loss,
        });
        self.iteration += 1;
        Ok(())
    }

    /// Runs the configured number of iterations, drawing a scene per
    /// iteration.
    pub fn run(&mut self, dataset: &[ScenePair], sched: &NoiseSchedule) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::invalid("distillation needs at least one scene"));
        }
        self.cfg.validate(sched.steps())?;
        let mut picker = stream_rng(self.cfg.seed, 5);
        for _ in 0..self.cfg.iterations {
            let i = picker.random_range(0..dataset.len());
            self.step(i, &dataset[i], sched)?;
        }
        Ok(())
    }
}

/// Records the student's one-step completion `G⁰` from `Gᵀ` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn record_student_completion(
    tape: &mut Tape,
    student: &DenoiserModel,
    bound: &crate::net::Bound,
    scan: &Scene,
    anchor: &[Point3],
    g_big_t: &[Point3],
    sched: &NoiseSchedule,
    inversion: Inversion,
) -> Result<Var> {
    let total = sched.steps();
    let cond = encode_condition(scan, g_big_t);
    let x = tape.leaf(points_to_array(g_big_t));
    let c = tape.leaf(cond.features);
    let pred = student.forward_on(tape, bound, x, c, total)?;
    let s = sched.noise_scale(total);
    let (base, k) = match inversion {
        Inversion::OffsetConsistent => (points_to_array(g_big_t), -s),
        Inversion::Paper => {
            let alpha = sched.alpha(total);
            let inv = 1.0 / alpha.sqrt();
            let base = Array2::from_shape_fn((anchor.len(), 3), |(i, a)| {
                anchor[i][a] + inv * (g_big_t[i][a] - anchor[i][a])
            });
            (base, -inv * (1.0 - alpha) / s)
        }
    };
    let base = tape.leaf(base);
    let step = tape.scale(pred, k);
    Ok(tape.add(base, step))
}

/// Result of [`distill`].
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: DenoiserModel,
    pub aux: DenoiserModel,
    pub history: Vec<HistoryRecord>,
}

pub fn distill(teacher: &DenoiserModel, dataset: &[ScenePair], sched: &NoiseSchedule, cfg: &DistillConfig) -> Result<DistillOutcome> {
    let mut state = DistillState::new(teacher, cfg.clone());
    state.run(dataset, sched)?;
    Ok(DistillOutcome {
        student: state.student,
        aux: state.aux,
        history: state.history,
    })
}

/// Mean squared noise prediction gap between two models on `points`.
pub fn prediction_gap(a: &DenoiserModel, b: &DenoiserModel, scan: &Scene, points: &[Point3], t: usize) -> Result<f64> {
    let d = predict_noise(a, scan, points, t)? - predict_noise(b, scan, points, t)?;
    Ok(d.iter().map(|v| v * v).sum::<f64>() / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_loss_cases() {
        let c = Scene::new(vec![[0.0; 3], [2.0, 0.0, 0.0]], SceneRole::Completion).unwrap();
        let g = Scene::new(vec![[1.0, 0.0, 0.0]], SceneRole::GroundTruth).unwrap();
        assert_eq!(scene_loss(&c, &g), 1.0);
        assert_eq!(scene_loss(&c, &c), 0.0);
    }

    #[test]
    fn weighted_terms() {
        let t = StructuralTerms::weighted(1.0, 4.0, 0.5, 0.01);
        assert!((t.total - 0.54).abs() < 1e-15);
        assert_eq!(StructuralTerms::weighted(3.0, 7.0, 0.0, 0.0).total, 0.0);
    }

    #[test]
    fn default_timestep_range() {
        let c = DistillConfig::default();
        assert_eq!(c.timestep_range(50), (1, 49));
        assert_eq!(c.timestep_range(100), (2, 98));
        assert!(c.validate(50).is_ok());
        let bad = DistillConfig { t_range: Some((0, 10)), ..c.clone() };
        assert!(bad.validate(50).is_err());
        let bad = DistillConfig { aux_steps: 0, ..c };
        assert!(bad.validate(50).is_err());
    }

    #[test]
    fn point_loss_dimension_mismatch() {
        let a = DistanceMatrix::from_points(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = DistanceMatrix::from_points(&[[0.0; 3]]);
        assert!(point_loss(&a, &b).is_err());
        assert_eq!(point_loss(&a, &a).unwrap(), 0.0);
    }
}
