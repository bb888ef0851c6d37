use ndarray::Array2;

use crate::geometry::{dist2, Point3, Scene};

/// Number of scan neighbors whose offsets condition each point.
pub const COND_NEIGHBORS: usize = 3;
pub const COND_DIM: usize = 3 * COND_NEIGHBORS;

/// Per-point conditioning features derived from the sparse scan: the offsets
/// `scan − point` to the three nearest scan points, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoding {
    pub features: Array2<f64>,
}

impl ConditionEncoding {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }
}

/// Scans with fewer than three points repeat their farthest found neighbor.
pub fn encode_condition(scan: &Scene, points: &[Point3]) -> ConditionEncoding {
    let sp = scan.points();
    let mut features = Array2::zeros((points.len(), COND_DIM));
    for (r, p) in points.iter().enumerate() {
        // (dist², index), kept sorted; ties resolve to the smaller index
        // because later candidates only displace strictly farther entries.
        let mut best = [(f64::INFINITY, usize::MAX); COND_NEIGHBORS];
        for (i, q) in sp.iter().enumerate() {
            let d = dist2(p, q);
            if d < best[COND_NEIGHBORS - 1].0 {
                let mut k = COND_NEIGHBORS - 1;
                while k > 0 && d < best[k - 1].0 {
                    best[k] = best[k - 1];
                    k -= 1;
                }
                best[k] = (d, i);
            }
        }
        let mut last = best[0].1;
        for (k, &(_, idx)) in best.iter().enumerate() {
            let idx = if idx == usize::MAX { last } else { idx };
            last = idx;
            for a in 0..3 {
                features[[r, 3 * k + a]] = sp[idx][a] - p[a];
            }
        }
    }
    ConditionEncoding { features }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SceneRole;

    #[test]
    fn coincident_point_has_zero_first_offset() {
        let scan = Scene::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [5.0, 5.0, 5.0]],
            SceneRole::Scan,
        )
        .unwrap();
        let enc = encode_condition(&scan, &[[1.0, 0.0, 0.0]]);
        let row: Vec<f64> = enc.features.row(0).to_vec();
        assert_eq!(&row[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&row[3..6], &[-1.0, 0.0, 0.0]);
        assert_eq!(&row[6..9], &[-1.0, 2.0, 0.0]);
    }

    #[test]
    fn short_scan_repeats_neighbor() {
        let scan = Scene::new(vec![[1.0, 0.0, 0.0]], SceneRole::Scan).unwrap();
        let enc = encode_condition(&scan, &[[0.0; 3]]);
        assert_eq!(enc.features.row(0).to_vec(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
