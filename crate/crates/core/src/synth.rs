//! Synthetic street scenes, simulated sparse scans, and point-cloud files.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScenePair;
use crate::error::{Error, Result};
use crate::geometry::{Point3, Scene, SceneRole};
use crate::io_util::write_atomic;

/// A solid standing on the ground plane `z = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Cars and walls. `size` is full length, width and height.
    Box { center: [f64; 2], size: [f64; 3], yaw: f64 },
    /// Traffic cones and poles.
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

impl Shape {
    /// Area of the sampled surface: every face except the bottom.
    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Box { size: [l, w, h], .. } => l * w + 2.0 * (l + w) * h,
            Shape::Cylinder { radius, height, .. } => PI * radius * radius + TAU * radius * height,
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Shape::Box { center, .. } | Shape::Cylinder { center, .. } => center,
        }
    }

    fn height(&self) -> f64 {
        match *self {
            Shape::Box { size, .. } => size[2],
            Shape::Cylinder { height, .. } => height,
        }
    }

    /// Radius of the footprint's bounding circle.
    fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { size, .. } => 0.5 * size[0].hypot(size[1]),
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    fn contains_footprint(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Box { center, size, yaw } => {
                let (s, c) = yaw.sin_cos();
                let (dx, dy) = (x - center[0], y - center[1]);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= 0.5 * size[0] && v.abs() <= 0.5 * size[1]
            }
            Shape::Cylinder { center, radius, .. } => (x - center[0]).hypot(y - center[1]) <= radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Box { size, .. } => size.iter().all(|&s| s > 0.0 && s.is_finite()),
            Shape::Cylinder { radius, height, .. } => radius > 0.0 && height > 0.0 && radius.is_finite() && height.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("object dimensions must be positive: {self:?}")))
        }
    }

    /// Surface samples with outward normals.
    fn sample(&self, density: f64, rng: &mut ChaCha8Rng, out: &mut Vec<(Point3, Point3)>) {
        let count = |area: f64| (area * density).round() as usize;
        match *self {
            Shape::Box { center, size: [l, w, h], yaw } => {
                let (s, c) = yaw.sin_cos();
                let world = |u: f64, v: f64, z: f64| [center[0] + c * u - s * v, center[1] + s * u + c * v, z];
                let rot = |nu: f64, nv: f64, nz: f64| [c * nu - s * nv, s * nu + c * nv, nz];
                for _ in 0..count(l * w) {
                    let (u, v) = (rng.random_range(-0.5..0.5) * l, rng.random_range(-0.5..0.5) * w);
                    out.push((world(u, v, h), [0.0, 0.0, 1.0]));
                }
                for sign in [-1.0, 1.0] {
                    for _ in 0..count(w * h) {
                        let (v, z) = (rng.random_range(-0.5..0.5) * w, rng.random_range(0.0..h));
                        out.push((world(sign * 0.5 * l, v, z), rot(sign, 0.0, 0.0)));
                    }
                    for _ in 0..count(l * h) {
                        let (u, z) = (rng.random_range(-0.5..0.5) * l, rng.random_range(0.0..h));
                        out.push((world(u, sign * 0.5 * w, z), rot(0.0, sign, 0.0)));
                    }
                }
            }
            Shape::Cylinder { center, radius, height } => {
                for _ in 0..count(PI * radius * radius) {
                    let r = radius * rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..TAU);
                    out.push(([center[0] + r * a.cos(), center[1] + r * a.sin(), height], [0.0, 0.0, 1.0]));
                }
                for _ in 0..count(TAU * radius * height) {
                    let a = rng.random_range(0.0..TAU);
                    let z = rng.random_range(0.0..height);
                    let (sa, ca) = a.sin_cos();
                    out.push(([center[0] + radius * ca, center[1] + radius * sa, z], [ca, sa, 0.0]));
                }
            }
        }
    }
}

/// Virtual range sensor used to derive the sparse scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub position: Point3,
    /// Azimuth × elevation bins; each bin keeps its closest point.
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
    /// Elevation window in radians covered by the bins.
    pub elevation_range: [f64; 2],
    /// Drop points shadowed by objects.
    pub shadowing: bool,
    /// Azimuth intervals `[from, to]` (radians, counter-clockwise) where the
    /// sensor sees nothing.
    pub occluded_sectors: Vec<[f64; 2]>,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, 1.2],
            azimuth_bins: 160,
            elevation_bins: 12,
            elevation_range: [-0.6, 0.3],
            shadowing: true,
            occluded_sectors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square ground patch centered on the origin, in meters;
    /// zero means no ground.
    pub ground_extent: f64,
    pub objects: Vec<Shape>,
    /// Ground-truth samples per square meter.
    pub gt_density: f64,
    /// Fraction of sensor returns kept in the scan.
    pub keep_fraction: f64,
    /// `None` skips sensor simulation: the scan is the thinned ground truth.
    pub sensor: Option<SensorSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ground_extent >= 0.0 && self.ground_extent.is_finite()) {
            return Err(Error::invalid("ground extent must be finite and non-negative"));
        }
        if self.ground_extent == 0.0 && self.objects.is_empty() {
            return Err(Error::invalid("scene has neither ground nor objects"));
        }
        if !(self.gt_density > 0.0 && self.gt_density.is_finite()) {
            return Err(Error::invalid("GT density must be positive"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid(format!("keep fraction must be in (0, 1], got {}", self.keep_fraction)));
        }
        if let Some(s) = &self.sensor {
            if s.azimuth_bins == 0 || s.elevation_bins == 0 || s.elevation_range[0] >= s.elevation_range[1] {
                return Err(Error::invalid("sensor needs positive bin counts and a non-empty elevation window"));
            }
        }
        self.objects.iter().try_for_each(Shape::validate)
    }

    /// A street-like scene: 1–2 cars, an optional wall and 1–3 cones on an
    /// 8 m ground patch, seen from a sensor at the center.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5ee_d000_0000);
        let half: f64 = 3.4;
        let mut objects: Vec<Shape> = Vec::new();
        let place = |rng: &mut ChaCha8Rng, radius: f64, objects: &[Shape]| -> [f64; 2] {
            for _ in 0..200 {
                let c: [f64; 2] = [rng.random_range(-half..half), rng.random_range(-half..half)];
                let clear_sensor = c[0].hypot(c[1]) > radius + 0.8;
                let clear_others = objects
                    .iter()
                    .all(|o| (c[0] - o.center()[0]).hypot(c[1] - o.center()[1]) > radius + o.footprint_radius() + 0.2);
                if clear_sensor && clear_others {
                    return c;
                }
            }
            [half, half]
        };
        for _ in 0..rng.random_range(1..=2) {
            let size: [f64; 3] = [rng.random_range(2.2..2.8), rng.random_range(1.0..1.3), rng.random_range(0.8..1.1)];
            let center = place(&mut rng, 0.5 * size[0].hypot(size[1]), &objects);
            objects.push(Shape::Box { center, size, yaw: rng.random_range(0.0..PI) });
        }
        if rng.random_bool(0.5) {
            let size = [rng.random_range(2.5..3.5), 0.2, rng.random_range(0.8..1.2)];
            let center = place(&mut rng, 0.5 * size[0], &objects);
            objects.push(Shape::Box { center, size, yaw: rng.random_range(0.0..PI) });
        }
        for _ in 0..rng.random_range(1..=3) {
            let radius = rng.random_range(0.12..0.2);
            let center = place(&mut rng, radius, &objects);
            objects.push(Shape::Cylinder { center, radius, height: rng.random_range(0.5..0.8) });
        }
        let mut sensor = SensorSpec::default();
        if rng.random_bool(0.5) {
            let from = rng.random_range(0.0..TAU);
            sensor.occluded_sectors.push([from, from + rng.random_range(0.3..0.8)]);
        }
        Self {
            seed,
            ground_extent: 8.0,
            objects,
            gt_density: 25.0,
            keep_fraction: 0.4,
            sensor: Some(sensor),
        }
    }
}

fn azimuth(p: &Point3, origin: &Point3) -> f64 {
    (p[1] - origin[1]).atan2(p[0] - origin[0]).rem_euclid(TAU)
}

fn in_sector(a: f64, sector: &[f64; 2]) -> bool {
    (a - sector[0]).rem_euclid(TAU) <= (sector[1] - sector[0]).max(0.0)
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Samples the ground truth and derives the scan. Scan points are copies of
/// ground-truth points, in ground-truth order.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Scene, Scene)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // (point, normal, owner object)
    let mut samples: Vec<(Point3, Point3, Option<usize>)> = Vec::new();
    if spec.ground_extent > 0.0 {
        let e = spec.ground_extent;
        let n = (e * e * spec.gt_density).round() as usize;
        for _ in 0..n {
            let x = rng.random_range(-0.5..0.5) * e;
            let y = rng.random_range(-0.5..0.5) * e;
            if !spec.objects.iter().any(|o| o.contains_footprint(x, y)) {
                samples.push(([x, y, 0.0], [0.0, 0.0, 1.0], None));
            }
        }
    }
    for (k, obj) in spec.objects.iter().enumerate() {
        let mut buf = Vec::new();
        obj.sample(spec.gt_density, &mut rng, &mut buf);
        samples.extend(buf.into_iter().map(|(p, n)| (p, n, Some(k))));
    }
    if samples.is_empty() {
        return Err(Error::invalid("scene spec produced no points"));
    }
    let gt: Vec<Point3> = samples.iter().map(|s| s.0).collect();

    let mut visible: Vec<usize> = (0..samples.len()).collect();
    if let Some(sensor) = &spec.sensor {
        visible = sense(sensor, &spec.objects, &samples);
    }
    if spec.keep_fraction < 1.0 && !visible.is_empty() {
        let keep = ((spec.keep_fraction * visible.len() as f64).round() as usize).max(1);
        let mut picked = sample(&mut rng, visible.len(), keep).into_vec();
        picked.sort_unstable();
        visible = picked.into_iter().map(|i| visible[i]).collect();
    }
    if visible.is_empty() {
        return Err(Error::invalid("the sensor sees no points in this scene"));
    }
    let scan = visible.iter().map(|&i| gt[i]).collect();
    Ok((
        Scene::new(gt, SceneRole::GroundTruth)?,
        Scene::new(scan, SceneRole::Scan)?,
    ))
}

/// Indices of samples the sensor returns, ascending.
fn sense(sensor: &SensorSpec, objects: &[Shape], samples: &[(Point3, Point3, Option<usize>)]) -> Vec<usize> {
    let o = sensor.position;
    // Angular footprint of each object: (azimuth, half-width, nearest range, top elevation there).
    let shadows: Vec<(f64, f64, f64, f64)> = objects
        .iter()
        .map(|obj| {
            let c = obj.center();
            let r = (c[0] - o[0]).hypot(c[1] - o[1]);
            let fr = obj.footprint_radius();
            let near = (r - fr).max(1e-6);
            let half = if r > fr { (fr / r).asin() } else { PI };
            (azimuth(&[c[0], c[1], 0.0], &o), half, near, (obj.height() - o[2]).atan2(near))
        })
        .collect();
    let [e0, e1] = sensor.elevation_range;
    let mut best: std::collections::HashMap<(usize, usize), (f64, usize)> = std::collections::HashMap::new();
    for (i, (p, n, owner)) in samples.iter().enumerate() {
        let to_sensor = [o[0] - p[0], o[1] - p[1], o[2] - p[2]];
        if n[0] * to_sensor[0] + n[1] * to_sensor[1] + n[2] * to_sensor[2] <= 0.0 {
            continue;
        }
        let az = azimuth(p, &o);
        if sensor.occluded_sectors.iter().any(|s| in_sector(az, s)) {
            continue;
        }
        let range_xy = (p[0] - o[0]).hypot(p[1] - o[1]);
        let elev = (p[2] - o[2]).atan2(range_xy);
        if sensor.shadowing
            && shadows.iter().enumerate().any(|(k, &(a, half, near, top))| {
                Some(k) != *owner && angle_gap(az, a) < half && range_xy > near && elev < top
            })
        {
            continue;
        }
        if elev < e0 || elev >= e1 {
            continue;
        }
        let ab = ((az / TAU * sensor.azimuth_bins as f64) as usize).min(sensor.azimuth_bins - 1);
        let eb = (((elev - e0) / (e1 - e0) * sensor.elevation_bins as f64) as usize).min(sensor.elevation_bins - 1);
        let range = (range_xy * range_xy + (p[2] - o[2]).powi(2)).sqrt();
        best.entry((ab, eb))
            .and_modify(|cur| {
                if range < cur.0 {
                    *cur = (range, i);
                }
            })
            .or_insert((range, i));
    }
    let mut kept: Vec<usize> = best.into_values().map(|(_, i)| i).collect();
    kept.sort_unstable();
    kept
}

/// Writes one `x y z` line per point with 17 significant digits.
pub fn write_pointcloud(scene: &Scene, path: &Path) -> Result<()> {
    let mut text = String::with_capacity(scene.len() * 72);
    for p in scene.points() {
        text.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p[0], p[1], p[2]));
    }
    write_atomic(path, text.as_bytes())
}

/// Reads an `x y z` text file. Blank lines are skipped.
pub fn read_pointcloud(path: &Path, role: SceneRole) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pointcloud(&text, path, role)
}

pub fn parse_pointcloud(text: &str, path: &Path, role: SceneRole) -> Result<Scene> {
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(line_no, format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (a, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| err(line_no, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite value {f:?}")));
            }
            p[a] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(0, "file contains no points".into()));
    }
    Scene::new(points, role)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Relative to the manifest's directory.
    pub scan: PathBuf,
    pub gt: PathBuf,
    pub split: Split,
    pub spec: SceneSpec,
}

/// Index of a generated dataset, stored as TOML next to the point clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for e in &self.scenes {
            if !names.insert(&e.name) {
                return Err(Error::Config(format!("scene {:?} listed twice", e.name)));
            }
        }
        Ok(())
    }

    /// Reads every scene of `split`, resolving paths against `root`.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<ScenePair>> {
        self.scenes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                Ok(ScenePair {
                    scan: read_pointcloud(&root.join(&e.scan), SceneRole::Scan)?,
                    gt: read_pointcloud(&root.join(&e.gt), SceneRole::GroundTruth)?,
                })
            })
            .collect()
    }
}

/// Scene seeds for a dataset: train scenes first, then held-out ones.
pub fn dataset_specs(seed: u64, train: usize, held_out: usize) -> Vec<(Split, SceneSpec)> {
    (0..train + held_out)
        .map(|i| {
            let split = if i < train { Split::Train } else { Split::HeldOut };
            (split, SceneSpec::random(seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        })
        .collect()
}

/// Generates scenes in memory.
pub fn generate_pairs(specs: &[(Split, SceneSpec)]) -> Result<Vec<(Split, ScenePair)>> {
    specs
        .iter()
        .map(|(split, spec)| {
            let (gt, scan) = generate_scene(spec)?;
            Ok((*split, ScenePair { scan, gt }))
        })
        .collect()
}

/// Writes point clouds and `manifest.toml` into `dir`.
pub fn generate_dataset(dir: &Path, seed: u64, train: usize, held_out: usize) -> Result<DatasetManifest> {
    let mut scenes = Vec::new();
    for (i, (split, spec)) in dataset_specs(seed, train, held_out).into_iter().enumerate() {
        let (gt, scan) = generate_scene(&spec)?;
        let name = format!("scene_{i:04}");
        let scan_path = PathBuf::from(format!("{name}.scan.xyz"));
        let gt_path = PathBuf::from(format!("{name}.gt.xyz"));
        write_pointcloud(&scan, &dir.join(&scan_path))?;
        write_pointcloud(&gt, &dir.join(&gt_path))?;
        scenes.push(ManifestEntry { name, scan: scan_path, gt: gt_path, split, spec });
    }
    let manifest = DatasetManifest { seed, scenes };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
