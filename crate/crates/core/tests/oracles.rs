mod common;

use std::path::Path;

use common::*;
use rand::Rng;
use scenedistill_core::geometry::{
    correspond_keypoints, knn, nearest_index, select_keypoints_baseline, symmetric_eigenvalues, KeypointMethod,
    SceneRole,
};
use scenedistill_core::metrics::{chamfer, emd, emd_points, evaluate, MetricConfig};
use scenedistill_core::net::encode_condition;
use scenedistill_core::synth::read_pointcloud;

#[test]
fn knn_matches_full_sort() {
    let mut r = rng(1);
    for _ in 0..20 {
        let pts = random_points(&mut r, 50, 2.0);
        let s = scene(pts.clone(), SceneRole::GroundTruth);
        for q in 0..pts.len() {
            assert_eq!(knn(&s, q, 5).unwrap(), knn_oracle(&pts, q, 5));
        }
    }
}

#[test]
fn eigenvalues_match_cubic_roots() {
    let mut r = rng(2);
    for _ in 0..200 {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v: f64 = r.random_range(-2.0..2.0);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        let got = symmetric_eigenvalues(&m);
        let want = cubic_eigen_oracle(&m);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() <= 1e-8, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn chamfer_matches_double_loop() {
    let mut r = rng(3);
    for _ in 0..20 {
        let n = r.random_range(1..=200);
        let m = r.random_range(1..=200);
        let a = random_points(&mut r, n, 3.0);
        let b = random_points(&mut r, m, 3.0);
        let got = chamfer(&scene(a.clone(), SceneRole::Completion), &scene(b.clone(), SceneRole::GroundTruth));
        assert!((got - chamfer_oracle(&a, &b)).abs() <= 1e-12);
    }
}

#[test]
fn emd_matches_all_permutations() {
    let mut r = rng(4);
    for n in 1..=6 {
        for _ in 0..10 {
            let a = random_points(&mut r, n, 1.0);
            let b = random_points(&mut r, n, 1.0);
            assert!((emd_points(&a, &b) - emd_oracle(&a, &b)).abs() <= 1e-12);
            let sa = scene(a.clone(), SceneRole::Completion);
            let sb = scene(b.clone(), SceneRole::GroundTruth);
            assert!((emd(&sa, &sb, n, 9).unwrap() - emd_oracle(&a, &b)).abs() <= 1e-12);
        }
    }
}

#[test]
fn correspondence_matches_brute_force() {
    let mut r = rng(5);
    let gt = scene(random_points(&mut r, 60, 2.0), SceneRole::GroundTruth);
    let comp = random_points(&mut r, 80, 2.0);
    let keys = select_keypoints_baseline(&gt, 0.1, KeypointMethod::Random, 3).unwrap();
    let matched = correspond_keypoints(&gt, &keys, &scene(comp.clone(), SceneRole::Completion));
    for (&k, &m) in keys.indices.iter().zip(&matched.indices) {
        let q = gt.points()[k];
        let best = (0..comp.len())
            .min_by(|&a, &b| {
                let da: f64 = (0..3).map(|i| (comp[a][i] - q[i]).powi(2)).sum();
                let db: f64 = (0..3).map(|i| (comp[b][i] - q[i]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(m, best);
        assert_eq!(m, nearest_index(&comp, &q));
    }
}

#[test]
fn condition_matches_three_nearest_offsets() {
    let mut r = rng(6);
    let scan_pts = random_points(&mut r, 30, 2.0);
    let scan = scene(scan_pts.clone(), SceneRole::Scan);
    let query = random_points(&mut r, 25, 2.0);
    let enc = encode_condition(&scan, &query);
    for (row, p) in query.iter().enumerate() {
        let mut order: Vec<usize> = (0..scan_pts.len()).collect();
        order.sort_by(|&a, &b| {
            let da: f64 = (0..3).map(|i| (scan_pts[a][i] - p[i]).powi(2)).sum();
            let db: f64 = (0..3).map(|i| (scan_pts[b][i] - p[i]).powi(2)).sum();
            da.total_cmp(&db)
        });
        for (k, &idx) in order.iter().take(3).enumerate() {
            for a in 0..3 {
                assert_eq!(enc.features[[row, 3 * k + a]], scan_pts[idx][a] - p[a]);
            }
        }
    }
}

#[test]
fn metrics_match_scripted_fixture() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let comp = read_pointcloud(&dir.join("completion.xyz"), SceneRole::Completion).unwrap();
    let gt = read_pointcloud(&dir.join("gt.xyz"), SceneRole::GroundTruth).unwrap();
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let cfg = MetricConfig { emd_points: gt.len(), ..MetricConfig::default() };
    let report = evaluate(&comp, &gt, &cfg, 0.0).unwrap();
    let close = |got: f64, key: &str| {
        let want = expected[key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-12, "{key}: {got} vs {want}");
    };
    close(report.cd, "cd");
    close(report.jsd, "jsd");
    close(report.emd, "emd");
    for (got, want) in report.iou.iter().zip(expected["iou"].as_array().unwrap()) {
        assert_eq!(got.resolution, want[0].as_f64().unwrap());
        assert!((got.iou - want[1].as_f64().unwrap()).abs() <= 1e-12);
    }
}
