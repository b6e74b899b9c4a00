//! Exact k-nearest-neighbor graph over a point set.
//!
//! Small inputs use an exhaustive scan; larger ones bucket points into a
//! uniform grid and search outward ring by ring. Both paths order candidates
//! by `(squared distance, index)`, so results are identical.

use std::collections::HashMap;

use nalgebra::Vector3;

pub const DEFAULT_K: usize = 5;
const BRUTE_FORCE_BELOW: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.as_slice()))
    }

    /// Total number of directed edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

pub fn knn_build(points: &[Vector3<f64>], k: usize) -> KnnGraph {
    if points.len() < BRUTE_FORCE_BELOW {
        knn_brute_force(points, k)
    } else {
        knn_grid(points, k)
    }
}

fn sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

fn take_k(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.truncate(k);
    cands.into_iter().map(|(_, j)| j).collect()
}

pub fn knn_brute_force(points: &[Vector3<f64>], k: usize) -> KnnGraph {
    let neighbors = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let cands = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| (sq(p, q), j))
                .collect();
            take_k(cands, k)
        })
        .collect();
    KnnGraph { k, neighbors }
}

fn knn_grid(points: &[Vector3<f64>], k: usize) -> KnnGraph {
    let n = points.len();
    let want = k.min(n.saturating_sub(1));
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    // Aim for ~2 points per cell over the occupied volume.
    let vol = extent.iter().map(|e| e.max(1e-9)).product::<f64>();
    let mut cell = (2.0 * vol / n as f64).cbrt();
    let longest = extent.max();
    if !(cell > 0.0) || !cell.is_finite() {
        cell = 1.0;
    }
    cell = cell.max(longest / 256.0).max(1e-12);
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        let r = (p - lo) / cell;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = ((longest / cell).ceil() as i64 + 1).max(1);

    let neighbors = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut cands: Vec<(f64, usize)> = Vec::new();
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            if let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                                cands.extend(
                                    bucket
                                        .iter()
                                        .filter(|&&j| j != i)
                                        .map(|&j| (sq(p, &points[j]), j)),
                                );
                            }
                        }
                    }
                }
                // Every point outside the searched cube is at least `ring * cell` away.
                if cands.len() >= want {
                    let mut d: Vec<f64> = cands.iter().map(|c| c.0).collect();
                    d.sort_by(f64::total_cmp);
                    let kth = if want == 0 { 0.0 } else { d[want - 1] };
                    let bound = ring as f64 * cell;
                    if kth < bound * bound {
                        break;
                    }
                }
                if ring > max_ring {
                    break;
                }
                ring += 1;
            }
            take_k(cands, k)
        })
        .collect();
    KnnGraph { k, neighbors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collinear_points() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(3.0, 0.0, 0.0),
        ];
        let g = knn_build(&pts, 1);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn k_is_clamped_to_n_minus_one() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        let g = knn_build(&pts, 10);
        for (i, n) in g.iter() {
            assert_eq!(n.len(), 2);
            assert!(!n.contains(&i));
        }
    }

    #[test]
    fn grid_matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &n in &[500usize, 1200, 2000] {
            let pts: Vec<_> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(0.0..3.0),
                    )
                })
                .collect();
            assert_eq!(knn_grid(&pts, 5), knn_brute_force(&pts, 5));
        }
    }

    #[test]
    fn grid_handles_duplicates_and_flat_sets() {
        let mut pts: Vec<_> = (0..300)
            .map(|i| Vector3::new((i % 20) as f64, (i / 20) as f64, 0.0))
            .collect();
        pts.extend(pts.clone());
        assert_eq!(knn_grid(&pts, 5), knn_brute_force(&pts, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn grid_equals_exhaustive(seed in any::<u64>(), n in 2usize..700, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
                .collect();
            prop_assert_eq!(knn_grid(&pts, k), knn_brute_force(&pts, k));
        }
    }
}
