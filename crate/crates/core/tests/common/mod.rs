//! Shared fixtures, brute-force oracles and finite-difference checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scenedistill_core::diffusion::{predict_noise, record_denoising_loss, Inversion};
use scenedistill_core::distill::{
    kl_surrogate_loss, record_structural, record_student_completion, scene_loss, structural_loss, DistillConfig,
    Reduction,
};
use scenedistill_core::geometry::{dist2, select_keypoints_baseline, KeypointMethod, Point3, Scene, SceneRole};
use scenedistill_core::net::{points_to_array, Architecture, DenoiserModel, Role, Tape};
use scenedistill_core::schedule::{diffuse_offset, gaussian_noise, pseudo_dense, NoiseSchedule};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)])
        .collect()
}

pub fn scene(points: Vec<Point3>, role: SceneRole) -> Scene {
    Scene::new(points, role).expect("non-empty finite points")
}

/// Uniform random rotation from a unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = [0.0; 4];
    for v in &mut q {
        *v = rng.sample(StandardNormal);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

// ---- oracles -------------------------------------------------------------

/// Indices of the `k` nearest other points, by a full stable sort.
pub fn knn_oracle(points: &[Point3], query: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..points.len()).filter(|&i| i != query).collect();
    all.sort_by(|&a, &b| dist2(&points[a], &points[query]).total_cmp(&dist2(&points[b], &points[query])));
    all.truncate(k);
    all
}

/// Roots of `det(C − λI) = 0` for symmetric `C` by the trigonometric
/// cubic formula, ascending.
pub fn cubic_eigen_oracle(c: &[[f64; 3]; 3]) -> [f64; 3] {
    let p1 = c[0][1].powi(2) + c[0][2].powi(2) + c[1][2].powi(2);
    let q = (c[0][0] + c[1][1] + c[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut d = [c[0][0], c[1][1], c[2][2]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let p2 = (c[0][0] - q).powi(2) + (c[1][1] - q).powi(2) + (c[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *c;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [lo, 3.0 * q - hi - lo, hi]
}

pub fn chamfer_oracle(a: &[Point3], b: &[Point3]) -> f64 {
    let one_way = |x: &[Point3], y: &[Point3]| {
        let mut total = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

/// Minimum mean matching distance over all permutations.
pub fn emd_oracle(a: &[Point3], b: &[Point3]) -> f64 {
    fn go(a: &[Point3], b: &[Point3], used: &mut Vec<bool>, i: usize, acc: f64, best: &mut f64) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                go(a, b, used, i + 1, acc + dist2(&a[i], &b[j]).sqrt(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, &mut vec![false; b.len()], 0, 0.0, &mut best);
    best / a.len() as f64
}

// ---- finite differences --------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn small_arch() -> Architecture {
    Architecture { hidden_width: 8, depth: 2, time_embed_dim: 4, ..Architecture::default() }
}

/// A model whose every parameter, the output layer included, is random.
pub fn random_model(role: Role, seed: u64) -> DenoiserModel {
    let mut model = DenoiserModel::new(small_arch(), role, seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    for p in model.parameters_mut() {
        p.value.mapv_inplace(|v| v + 0.3 * r.sample::<f64, _>(StandardNormal));
    }
    model
}

/// `(tensor, row, col)` probes spread over all parameter tensors.
fn probes(model: &DenoiserModel, count: usize, r: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let shapes: Vec<[usize; 2]> = model.parameters().iter().map(|(_, t)| t.shape()).collect();
    (0..count)
        .map(|i| {
            let k = i % shapes.len();
            (k, r.random_range(0..shapes[k][0]), r.random_range(0..shapes[k][1]))
        })
        .collect()
}

fn nudged(model: &DenoiserModel, (k, r, c): (usize, usize, usize), h: f64) -> DenoiserModel {
    let mut m = model.clone();
    m.parameters_mut().nth(k).unwrap().value[[r, c]] += h;
    m
}

/// Worst relative error between analytic parameter gradients and central
/// differences of `f` over a few probes.
fn param_check(model: &mut DenoiserModel, r: &mut impl Rng, f: impl Fn(&DenoiserModel) -> f64) -> f64 {
    let grads: Vec<_> = model.parameters().iter().map(|(_, t)| t.grad.clone().unwrap()).collect();
    probes(model, 10, r)
        .into_iter()
        .map(|probe| {
            let (k, i, j) = probe;
            let numeric = (f(&nudged(model, probe, FD_STEP)) - f(&nudged(model, probe, -FD_STEP))) / (2.0 * FD_STEP);
            rel_err(grads[k][[i, j]], numeric)
        })
        .fold(0.0, f64::max)
}

/// Coordinate-wise check of a gradient with respect to a point array.
fn point_check(points: &[Point3], grad: &ndarray::Array2<f64>, f: impl Fn(&[Point3]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..points.len() {
        for a in 0..3 {
            let mut plus = points.to_vec();
            let mut minus = points.to_vec();
            plus[i][a] += FD_STEP;
            minus[i][a] -= FD_STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad[[i, a]], numeric));
        }
    }
    worst
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
}

/// Denoising loss gradient with respect to the model parameters.
pub fn denoising_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let sched = schedule();
    let scan = scene(random_points(&mut r, 6, 1.0), SceneRole::Scan);
    let clean = random_points(&mut r, 10, 1.0);
    let t = r.random_range(1..=sched.steps());
    let noise = gaussian_noise(&mut r, clean.len());
    let loss_of = |m: &DenoiserModel| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let l = record_denoising_loss(&mut tape, m, &b, &scan, &clean, t, &noise, &sched).unwrap();
        tape.scalar(l)
    };
    let mut model = random_model(Role::Auxiliary, seed);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = record_denoising_loss(&mut tape, &model, &bound, &scan, &clean, t, &noise, &sched).unwrap();
    let grads = tape.backward(loss).unwrap();
    model.accumulate_grads(&grads, &bound);
    param_check(&mut model, &mut r, loss_of)
}

/// Scene loss gradient with respect to the completion points.
pub fn scene_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let g0 = random_points(&mut r, 25, 1.0);
    let gt = scene(random_points(&mut r, 40, 1.0), SceneRole::GroundTruth);
    let mut tape = Tape::new();
    let x = tape.leaf(points_to_array(&g0));
    let loss = tape.nearest_sq_mean(x, gt.points());
    let grads = tape.backward(loss).unwrap();
    point_check(&g0, grads.wrt(x).unwrap(), |p| scene_loss(&scene(p.to_vec(), SceneRole::Completion), &gt))
}

/// Keypoint distance-matrix loss gradient with respect to the completion.
pub fn point_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt = scene(random_points(&mut r, 30, 2.0), SceneRole::GroundTruth);
    let g0: Vec<Point3> = gt
        .points()
        .iter()
        .map(|p| [p[0] + 0.02 * r.sample::<f64, _>(StandardNormal), p[1] + 0.02 * r.sample::<f64, _>(StandardNormal), p[2] + 0.02 * r.sample::<f64, _>(StandardNormal)])
        .collect();
    let keys = select_keypoints_baseline(&gt, 0.2, KeypointMethod::Random, seed).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(points_to_array(&g0));
    let (_, point) = record_structural(&mut tape, x, &gt, &keys).unwrap();
    let grads = tape.backward(point).unwrap();
    let cfg = DistillConfig::default();
    point_check(&g0, grads.wrt(x).unwrap(), |p| {
        structural_loss(&scene(p.to_vec(), SceneRole::Completion), &gt, &keys, &cfg).unwrap().point
    })
}

/// Student-parameter gradient of the score-difference surrogate against
/// finite differences of `⟨d, Gᵗ(η)⟩` with `d` frozen.
pub fn surrogate_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let sched = schedule();
    let inversion = if seed % 2 == 0 { Inversion::OffsetConsistent } else { Inversion::Paper };
    let teacher = random_model(Role::Teacher, seed.wrapping_add(1));
    let aux = random_model(Role::Auxiliary, seed.wrapping_add(2));
    let mut student = random_model(Role::Student, seed.wrapping_add(3));
    let scan = scene(random_points(&mut r, 5, 1.0), SceneRole::Scan);
    let anchor = pseudo_dense(&scan, 2).unwrap().into_points();
    let init = gaussian_noise(&mut r, anchor.len());
    let g_big_t = diffuse_offset(&anchor, sched.steps(), &init, &sched).unwrap().points;
    let t = r.random_range(1..=sched.steps());
    let noise = gaussian_noise(&mut r, anchor.len());

    let completion = |m: &DenoiserModel| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let g0 = record_student_completion(&mut tape, m, &b, &scan, &anchor, &g_big_t, &sched, inversion).unwrap();
        scenedistill_core::net::array_to_points(tape.value(g0))
    };
    let base = completion(&student);
    let noisy = diffuse_offset(&base, t, &noise, &sched).unwrap().points;
    let d = predict_noise(&teacher, &scan, &noisy, t).unwrap() - predict_noise(&aux, &scan, &noisy, t).unwrap();
    let s = sched.noise_scale(t);
    let objective = |m: &DenoiserModel| {
        completion(m)
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(i, (p, e))| (0..3).map(|a| d[[i, a]] * (p[a] + s * e[a])).sum::<f64>())
            .sum::<f64>()
    };

    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let g0 = record_student_completion(&mut tape, &student, &bound, &scan, &anchor, &g_big_t, &sched, inversion).unwrap();
    let (kl, _) = kl_surrogate_loss(&mut tape, &teacher, &aux, g0, &scan, t, &noise, &sched, Reduction::Sum).unwrap();
    let grads = tape.backward(kl).unwrap();
    student.accumulate_grads(&grads, &bound);
    param_check(&mut student, &mut r, objective)
}
