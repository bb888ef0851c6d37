//! Point-set primitives: scenes, nearest-neighbor queries, neighborhood
//! covariance and curvature, keypoint selection and correspondence, and
//! keypoint distance matrices.
//!
//! All queries are exhaustive. Every ranking uses the same total order:
//! smaller distance (or larger score) first, then smaller index.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in meters.
pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// What a point set stands for in the completion pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneRole {
    /// Sparse sensor scan `P`.
    Scan,
    /// Dense ground truth `G`.
    GroundTruth,
    /// A completed scene `G⁰`.
    Completion,
    /// An intermediate noisy scene `Gᵗ`.
    Noisy,
}

/// An ordered, non-empty set of finite 3D points.
///
/// Index identity is meaningful: keypoint correspondences and noise draws are
/// addressed by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    points: Vec<Point3>,
    role: SceneRole,
}

impl Scene {
    pub fn new(points: Vec<Point3>, role: SceneRole) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a scene needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, role })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn role(&self) -> SceneRole {
        self.role
    }

    pub fn with_role(mut self, role: SceneRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `x ↦ R·x + t` to every point.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: &Point3) -> Scene {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = *translation;
                for (r, row) in rotation.iter().enumerate() {
                    q[r] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                }
                q
            })
            .collect();
        Scene {
            points,
            role: self.role,
        }
    }
}

/// Index of the point in `candidates` closest to `query`, ties to the smaller index.
pub fn nearest_index(candidates: &[Point3], query: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = dist2(c, query);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn rank_by_distance(scene: &Scene, query: usize, k: usize) -> Vec<usize> {
    let q = scene.points[query];
    let mut cand: Vec<(f64, usize)> = scene
        .points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, p)| (dist2(p, &q), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_key);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_key);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// The `k` nearest neighbors of point `query`, excluding the query itself.
pub fn knn(scene: &Scene, query: usize, k: usize) -> Result<Vec<usize>> {
    if query >= scene.len() {
        return Err(Error::invalid(format!(
            "query index {query} out of range for {} points",
            scene.len()
        )));
    }
    if k == 0 || k >= scene.len() {
        return Err(Error::invalid(format!(
            "K_nn must lie in [1, {}], got {k}",
            scene.len() - 1
        )));
    }
    Ok(rank_by_distance(scene, query, k))
}

/// Local shape statistics around one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: usize,
    pub members: Vec<usize>,
    pub centroid: Point3,
    pub covariance: [[f64; 3]; 3],
    /// Ascending, clamped at zero.
    pub eigenvalues: [f64; 3],
}

impl Neighborhood {
    /// All neighbors coincide with their centroid.
    pub fn is_degenerate(&self) -> bool {
        self.eigenvalues.iter().sum::<f64>() <= 0.0
    }
}

/// Eigenvalues below this are treated as round-off and clamped to zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

pub fn neighborhood_stats(scene: &Scene, center: usize, k: usize) -> Result<Neighborhood> {
    let members = knn(scene, center, k)?;
    Ok(stats_of(scene.points(), center, members))
}

fn stats_of(points: &[Point3], center: usize, members: Vec<usize>) -> Neighborhood {
    let inv_k = 1.0 / members.len() as f64;
    let mut centroid = [0.0; 3];
    for &m in &members {
        for a in 0..3 {
            centroid[a] += points[m][a];
        }
    }
    for c in &mut centroid {
        *c *= inv_k;
    }
    let mut cov = [[0.0; 3]; 3];
    for &m in &members {
        let d = sub(&points[m], &centroid);
        for r in 0..3 {
            for c in r..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for r in 0..3 {
        for c in r..3 {
            cov[r][c] *= inv_k;
            cov[c][r] = cov[r][c];
        }
    }
    let mut eigenvalues = symmetric_eigenvalues(&cov);
    for l in &mut eigenvalues {
        if *l < EIGEN_CLAMP {
            *l = 0.0;
        }
    }
    Neighborhood {
        center,
        members,
        centroid,
        covariance: cov,
        eigenvalues,
    }
}

/// Eigenvalues of a symmetric 3×3 matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut a = *m;
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        let diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2];
        if off <= f64::EPSILON * f64::EPSILON * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with the rotation acting on rows/cols p and q.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(f64::total_cmp);
    ev
}

/// Surface variation `λ₁ / (λ₁+λ₂+λ₃)`, in `[0, 1/3]`. Degenerate
/// neighborhoods get 0.
pub fn curvature(nb: &Neighborhood) -> f64 {
    let total: f64 = nb.eigenvalues.iter().sum();
    if total <= 0.0 {
        0.0
    } else {
        (nb.eigenvalues[0] / total).clamp(0.0, 1.0 / 3.0)
    }
}

/// Selected keypoints, ordered by decreasing curvature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub source: SceneRole,
    pub indices: Vec<usize>,
    pub curvatures: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How keypoints are chosen. Only curvature ranking is used for training;
/// the other two exist as comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointMethod {
    Curvature,
    Random,
    Farthest,
}

/// Number of keypoints for a scene of `n_points`: `max(3, ⌊fraction·n_points⌋)`.
pub fn keypoint_count(n_points: usize, fraction: f64) -> usize {
    ((fraction * n_points as f64).floor() as usize).max(3)
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::invalid(format!("{name} must lie in (0, 1], got {f}")));
    }
    Ok(())
}

/// Curvature keypoints.
///
/// A seeded uniform subset of `prefilter·N` candidates is drawn first
/// (skipped when `prefilter` is 1), each candidate is scored by the curvature
/// of its `k_nn`-neighborhood in the full scene, and the top
/// `max(3, ⌊fraction·N⌋)` are kept. Degenerate neighborhoods rank last.
pub fn select_keypoints(
    scene: &Scene,
    fraction: f64,
    k_nn: usize,
    prefilter: f64,
    seed: u64,
) -> Result<KeypointSet> {
    check_fraction("keypoint fraction", fraction)?;
    check_fraction("prefilter fraction", prefilter)?;
    let n_points = scene.len();
    let n = keypoint_count(n_points, fraction);
    if n > n_points {
        return Err(Error::invalid(format!(
            "scene has {n_points} points, fewer than the {n} keypoints required"
        )));
    }
    if k_nn == 0 || k_nn >= n_points {
        return Err(Error::invalid(format!(
            "K_nn must lie in [1, {}], got {k_nn}",
            n_points - 1
        )));
    }
    let candidates = prefilter_candidates(n_points, n, prefilter, seed);

    struct Scored {
        index: usize,
        kappa: f64,
        degenerate: bool,
    }
    let mut scored: Vec<Scored> = candidates
        .into_iter()
        .map(|i| {
            let members = rank_by_distance(scene, i, k_nn);
            let nb = stats_of(scene.points(), i, members);
            Scored {
                index: i,
                kappa: curvature(&nb),
                degenerate: nb.is_degenerate(),
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        a.degenerate
            .cmp(&b.degenerate)
            .then(b.kappa.total_cmp(&a.kappa))
            .then(a.index.cmp(&b.index))
    });
    scored.truncate(n);
    Ok(KeypointSet {
        source: scene.role(),
        indices: scored.iter().map(|s| s.index).collect(),
        curvatures: scored.iter().map(|s| s.kappa).collect(),
    })
}

fn prefilter_candidates(n_points: usize, n: usize, prefilter: f64, seed: u64) -> Vec<usize> {
    if prefilter >= 1.0 {
        return (0..n_points).collect();
    }
    let count = ((prefilter * n_points as f64).round() as usize).clamp(n, n_points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n_points, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Baseline keypoint selectors with the same count rule as [`select_keypoints`].
/// Curvatures are reported as zero.
pub fn select_keypoints_baseline(
    scene: &Scene,
    fraction: f64,
    method: KeypointMethod,
    seed: u64,
) -> Result<KeypointSet> {
    check_fraction("keypoint fraction", fraction)?;
    let n_points = scene.len();
    let n = keypoint_count(n_points, fraction);
    if n > n_points {
        return Err(Error::invalid(format!(
            "scene has {n_points} points, fewer than the {n} keypoints required"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = match method {
        KeypointMethod::Random | KeypointMethod::Curvature => {
            sample(&mut rng, n_points, n).into_vec()
        }
        KeypointMethod::Farthest => {
            let pts = scene.points();
            let mut chosen = vec![rng.random_range(0..n_points)];
            let mut nearest: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[chosen[0]])).collect();
            while chosen.len() < n {
                let mut best = 0;
                for i in 1..n_points {
                    if nearest[i] > nearest[best] {
                        best = i;
                    }
                }
                chosen.push(best);
                for (i, p) in pts.iter().enumerate() {
                    nearest[i] = nearest[i].min(dist2(p, &pts[best]));
                }
            }
            chosen
        }
    };
    Ok(KeypointSet {
        source: scene.role(),
        curvatures: vec![0.0; indices.len()],
        indices,
    })
}

/// Maps each ground-truth keypoint to its nearest completion point. The
/// result may contain repeated indices.
pub fn correspond_keypoints(gt: &Scene, keys: &KeypointSet, completion: &Scene) -> KeypointSet {
    let indices = keys
        .indices
        .iter()
        .map(|&i| nearest_index(completion.points(), &gt.points()[i]))
        .collect();
    KeypointSet {
        source: completion.role(),
        indices,
        curvatures: keys.curvatures.clone(),
    }
}

/// Square matrix of pairwise Euclidean distances, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn from_points(points: &[Point3]) -> Self {
        let n = points.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist(&points[i], &points[j]);
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Self { n, entries }
    }
}

pub fn distance_matrix(scene: &Scene, keys: &KeypointSet) -> Result<DistanceMatrix> {
    let pts = gather(scene, keys)?;
    Ok(DistanceMatrix::from_points(&pts))
}

pub(crate) fn gather(scene: &Scene, keys: &KeypointSet) -> Result<Vec<Point3>> {
    keys.indices
        .iter()
        .map(|&i| {
            scene.points().get(i).copied().ok_or_else(|| {
                Error::invalid(format!("keypoint index {i} out of range for {} points", scene.len()))
            })
        })
        .collect()
}
