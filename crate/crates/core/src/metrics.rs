//! Completion quality metrics.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, dist2, nearest_index, Point3, Scene};

/// `(1/|P|) Σ min‖p−q‖² + (1/|Q|) Σ min‖q−p‖²`, in squared meters.
pub fn chamfer(p: &Scene, q: &Scene) -> f64 {
    one_sided(p.points(), q.points()) + one_sided(q.points(), p.points())
}

fn one_sided(from: &[Point3], to: &[Point3]) -> f64 {
    from.iter()
        .map(|a| dist2(a, &to[nearest_index(to, a)]))
        .sum::<f64>()
        / from.len() as f64
}

/// Axis-aligned bird's-eye-view grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub bins: usize,
    /// `[x_min, y_min, x_max, y_max]` in meters.
    pub bounds: [f64; 4],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            bounds: [-4.5, -4.5, 4.5, 4.5],
        }
    }
}

/// Normalized cell masses over a [`GridConfig`], row-major in `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyHistogram {
    pub grid: GridConfig,
    pub mass: Vec<f64>,
}

impl OccupancyHistogram {
    /// Points outside the bounds fall into the nearest boundary cell.
    pub fn build(scene: &Scene, grid: GridConfig) -> Result<Self> {
        let [x0, y0, x1, y1] = grid.bounds;
        if grid.bins == 0 || !(x1 > x0 && y1 > y0) {
            return Err(Error::invalid("histogram needs bins ≥ 1 and non-empty bounds"));
        }
        let b = grid.bins;
        let cell = |v: f64, lo: f64, hi: f64| {
            let f = ((v - lo) / (hi - lo) * b as f64).floor();
            f.clamp(0.0, (b - 1) as f64) as usize
        };
        let mut mass = vec![0.0; b * b];
        for p in scene.points() {
            mass[cell(p[0], x0, x1) * b + cell(p[1], y0, y1)] += 1.0;
        }
        let n = scene.len() as f64;
        mass.iter_mut().for_each(|m| *m /= n);
        Ok(Self { grid, mass })
    }
}

/// Jensen–Shannon divergence between two mass vectors, base 2.
pub fn jsd_masses(a: &[f64], b: &[f64]) -> f64 {
    let term = |p: f64, m: f64| if p > 0.0 { p * (p / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&p, &q) in a.iter().zip(b) {
        let m = 0.5 * (p + q);
        total += 0.5 * term(p, m) + 0.5 * term(q, m);
    }
    total.clamp(0.0, 1.0)
}

/// JSD of the bird's-eye-view occupancy histograms of `a` and `b`.
pub fn jsd(a: &Scene, b: &Scene, grid: GridConfig) -> Result<f64> {
    let ha = OccupancyHistogram::build(a, grid)?;
    let hb = OccupancyHistogram::build(b, grid)?;
    Ok(jsd_masses(&ha.mass, &hb.mass))
}

/// `n` points of `points`: distinct when there are enough, otherwise all of
/// them followed by draws with replacement.
fn subsample(points: &[Point3], n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if points.len() >= n {
        let mut idx = sample(&mut rng, points.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        let mut out = points.to_vec();
        while out.len() < n {
            out.push(points[rng.random_range(0..points.len())]);
        }
        out
    }
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Mean matched Euclidean distance of the optimal one-to-one matching
/// between seeded `n`-point subsamples of `p` and `q`, in meters.
pub fn emd(p: &Scene, q: &Scene, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("EMD subsample size must be positive"));
    }
    let a = subsample(p.points(), n, seed);
    let b = subsample(q.points(), n, seed);
    Ok(emd_points(&a, &b))
}

/// Exact EMD between two equal-size point lists.
pub fn emd_points(a: &[Point3], b: &[Point3]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len(), "EMD needs equal-size sets");
    let cost: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| dist(x, y))).collect();
    let assignment = min_cost_assignment(&cost, n);
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum::<f64>()
        / n as f64
}

/// Occupied voxel coordinates `⌊p/r⌋` at resolution `r`.
pub fn voxelize(scene: &Scene, r: f64) -> Result<HashSet<[i64; 3]>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("voxel resolution must be positive, got {r}")));
    }
    Ok(scene
        .points()
        .iter()
        .map(|p| [(p[0] / r).floor() as i64, (p[1] / r).floor() as i64, (p[2] / r).floor() as i64])
        .collect())
}

pub fn voxel_iou(a: &Scene, b: &Scene, r: f64) -> Result<f64> {
    let va = voxelize(a, r)?;
    let vb = voxelize(b, r)?;
    let inter = va.intersection(&vb).count();
    let union = va.len() + vb.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub grid: GridConfig,
    pub emd_points: usize,
    pub iou_resolutions: Vec<f64>,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            emd_points: 256,
            iou_resolutions: vec![0.5, 0.2, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouAt {
    /// Voxel edge in meters.
    pub resolution: f64,
    pub iou: f64,
}

/// CD in m², EMD in m, JSD and IoU unitless, wall time in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub jsd: f64,
    pub emd: f64,
    pub iou: Vec<IouAt>,
    pub wall_time_s: f64,
}

/// All metrics for one completion; `wall_time_s` is the caller's timing of
/// the completion itself.
pub fn evaluate(completion: &Scene, gt: &Scene, cfg: &MetricConfig, wall_time_s: f64) -> Result<MetricReport> {
    let iou = cfg
        .iou_resolutions
        .iter()
        .map(|&r| Ok(IouAt { resolution: r, iou: voxel_iou(completion, gt, r)? }))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        cd: chamfer(completion, gt),
        jsd: jsd(completion, gt, cfg.grid)?,
        emd: emd(completion, gt, cfg.emd_points, cfg.seed)?,
        iou,
        wall_time_s,
    })
}
