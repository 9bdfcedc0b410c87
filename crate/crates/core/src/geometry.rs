//! Point sets and the spatial algorithms the attention layers rely on:
//! farthest point sampling, k-nearest neighbours, unit-cube normalization
//! and train-time similarity augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// `N` points with optional per-point features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point>,
    features: Option<Tensor>,
    /// Row-major `N × label_cols` integer labels.
    labels: Vec<i32>,
    label_cols: usize,
    pub class_label: Option<i32>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Argument("point cloud needs at least one point".into()));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("point positions must be finite".into()));
        }
        Ok(PointCloud {
            positions,
            features: None,
            labels: Vec::new(),
            label_cols: 0,
            class_label: None,
        })
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != self.len() {
            return Err(Error::dim(
                "with_features",
                format!("features {:?} for {} points", features.shape(), self.len()),
            ));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Attaches one label per point.
    pub fn with_labels(self, labels: Vec<i32>) -> Result<Self> {
        self.with_label_table(labels, 1)
    }

    /// Attaches `cols` labels per point, row-major.
    pub fn with_label_table(mut self, labels: Vec<i32>, cols: usize) -> Result<Self> {
        if labels.len() != self.len() * cols {
            return Err(Error::dim(
                "with_labels",
                format!("{} labels for {} points × {cols} columns", labels.len(), self.len()),
            ));
        }
        self.label_cols = if labels.is_empty() { 0 } else { cols };
        self.labels = labels;
        Ok(self)
    }

    pub fn with_class(mut self, class: i32) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn label_cols(&self) -> usize {
        self.label_cols
    }

    pub fn label_table(&self) -> &[i32] {
        &self.labels
    }

    /// First label column, when labels are present.
    pub fn point_labels(&self) -> Option<Vec<i32>> {
        if self.label_cols == 0 {
            return None;
        }
        Some(self.labels.iter().step_by(self.label_cols).copied().collect())
    }

    /// Positions as an `N × 3` tensor.
    pub fn position_tensor(&self) -> Tensor {
        let data = self.positions.iter().flatten().copied().collect();
        Tensor::new(&[self.len(), 3], data).expect("N×3")
    }

    /// Input features for the network: stored features, else the positions.
    pub fn input_features(&self) -> Tensor {
        self.features.clone().unwrap_or_else(|| self.position_tensor())
    }

    /// Same cloud with point `i` of the result taken from `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Argument("not a permutation of the point indices".into()));
        }
        let positions = perm.iter().map(|&p| self.positions[p]).collect();
        let features = match &self.features {
            Some(f) => Some(f.gather_rows(perm)?),
            None => None,
        };
        let c = self.label_cols;
        let labels = perm
            .iter()
            .flat_map(|&p| self.labels[p * c..(p + 1) * c].iter().copied())
            .collect();
        Ok(PointCloud {
            positions,
            features,
            labels,
            label_cols: c,
            class_label: self.class_label,
        })
    }

    pub(crate) fn with_positions(&self, positions: Vec<Point>) -> Self {
        PointCloud {
            positions,
            ..self.clone()
        }
    }
}

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len() as f64;
    c.map(|v| v / n)
}

/// Greedy farthest point sampling over raw positions.
///
/// The first pick is the point farthest from the centroid; every later pick
/// maximizes the distance to its nearest already-chosen point. Ties go to the
/// lowest index. Indices are returned in selection order.
pub fn farthest_point_sample_points(points: &[Point], count: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(Error::Argument(format!(
            "farthest point sampling needs 1 <= M <= N, got M={count}, N={n}"
        )));
    }
    let c = centroid(points);
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = squared_distance(p, &c);
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = first;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == count {
            break;
        }
        let anchor = points[current];
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = squared_distance(&points[i], &anchor);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && nearest[i] > next_d {
                next_d = nearest[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

pub fn farthest_point_sample(cloud: &PointCloud, count: usize) -> Result<Vec<usize>> {
    farthest_point_sample_points(cloud.positions(), count)
}

/// For each of `M` centers, `K` neighbour indices into the source cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    centers: Vec<usize>,
    neighbors: Vec<usize>,
    k: usize,
}

impl NeighborhoodIndex {
    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors_of(&self, m: usize) -> &[usize] {
        &self.neighbors[m * self.k..(m + 1) * self.k]
    }

    /// Flattened `M × K` neighbour table.
    pub fn flat_neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    /// Each center index repeated `K` times, aligned with [`Self::flat_neighbors`].
    pub fn repeated_centers(&self) -> Vec<usize> {
        self.centers
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, self.k))
            .collect()
    }
}

/// Brute-force k-nearest neighbours by squared Euclidean distance.
///
/// The center itself is always slot 0; the remaining slots are ordered by
/// distance, ties broken by lower point index.
pub fn knn_points(points: &[Point], centers: &[usize], k: usize) -> Result<NeighborhoodIndex> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("knn needs 1 <= K <= N, got K={k}, N={n}")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::Argument(format!("center index {bad} out of range for {n} points")));
    }
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        let anchor = points[c];
        scratch.clear();
        scratch.extend(
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != c)
                .map(|(j, p)| (squared_distance(p, &anchor), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let rest = k - 1;
        if rest > 0 && rest < scratch.len() {
            scratch.select_nth_unstable_by(rest - 1, cmp);
            scratch.truncate(rest);
        }
        scratch.sort_unstable_by(cmp);
        neighbors.push(c);
        neighbors.extend(scratch.iter().take(rest).map(|&(_, j)| j));
    }
    Ok(NeighborhoodIndex {
        centers: centers.to_vec(),
        neighbors,
        k,
    })
}

pub fn knn(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<NeighborhoodIndex> {
    knn_points(cloud.positions(), centers, k)
}

/// Centers the cloud and scales it uniformly so the largest absolute
/// coordinate is 1. Features and labels are carried over unchanged.
pub fn normalize_unit_cube(cloud: &PointCloud) -> PointCloud {
    let c = centroid(cloud.positions());
    let shifted: Vec<Point> = cloud
        .positions()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let extent = shifted.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let positions = shifted.into_iter().map(|p| p.map(|v| v * scale)).collect();
    cloud.with_positions(positions)
}

pub const AUGMENT_SCALE: (f64, f64) = (0.67, 1.5);
pub const AUGMENT_SHIFT: f64 = 0.2;

/// Random uniform rescale followed by a random translation, seeded.
pub fn augment(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(AUGMENT_SCALE.0..=AUGMENT_SCALE.1);
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-AUGMENT_SHIFT..=AUGMENT_SHIFT));
    let positions = cloud
        .positions()
        .iter()
        .map(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]])
        .collect();
    cloud.with_positions(positions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn lcg_points(n: usize, seed: u64) -> Vec<Point> {
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        (0..n).map(|_| [next(), next(), next()]).collect()
    }

    #[test]
    fn fps_examples() {
        assert_eq!(farthest_point_sample(&cloud(&[[0.3, 0.1, 2.0]]), 1).unwrap(), vec![0]);
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2).unwrap(), vec![1, 0]);
        let pts = lcg_points(17, 3);
        let mut all = farthest_point_sample(&cloud(&pts), 17).unwrap();
        all.sort();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_bad_counts() {
        let c = cloud(&[[0.0; 3], [1.0; 3]]);
        assert!(matches!(farthest_point_sample(&c, 0), Err(Error::Argument(_))));
        assert!(matches!(farthest_point_sample(&c, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn fps_with_duplicate_points_never_repeats() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]);
        let mut s = farthest_point_sample(&c, 4).unwrap();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_examples() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let nb = knn(&c, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(nb.flat_neighbors(), &[0, 1, 2, 3]);
        let nb = knn(&c, &[1], 3).unwrap();
        assert_eq!(nb.neighbors_of(0), &[1, 0, 2]);
        assert!(knn(&c, &[1], 5).is_err());

        let mut pts = vec![[5.0, 5.0, 5.0]; 6];
        pts[0] = [0.0, 0.0, 0.0];
        pts[2] = [1.0, 0.0, 0.0];
        pts[5] = [-1.0, 0.0, 0.0];
        let nb = knn(&cloud(&pts), &[0], 2).unwrap();
        assert_eq!(nb.neighbors_of(0), &[0, 2]);
    }

    #[test]
    fn knn_self_first_even_with_duplicates() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [1.0; 3]]);
        let nb = knn(&c, &[1], 2).unwrap();
        assert_eq!(nb.neighbors_of(0), &[1, 0]);
    }

    #[test]
    fn normalize_examples() {
        let corners: Vec<Point> = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -2.0 } else { 2.0 },
                    if i & 2 == 0 { -2.0 } else { 2.0 },
                    if i & 4 == 0 { -2.0 } else { 2.0 },
                ]
            })
            .collect();
        let n = normalize_unit_cube(&cloud(&corners));
        assert!(n.positions().iter().flatten().all(|v| v.abs() == 1.0));
        let single = normalize_unit_cube(&cloud(&[[3.0, -4.0, 7.5]]));
        assert_eq!(single.positions(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_random_cloud() {
        let pts: Vec<Point> = lcg_points(50, 9).into_iter().map(|p| [p[0] * 3.0 + 1.0, p[1], p[2] - 4.0]).collect();
        let n = normalize_unit_cube(&cloud(&pts));
        let c = centroid(n.positions());
        assert!(c.iter().all(|v| v.abs() < 1e-12));
        let m = n.positions().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((m - 1.0).abs() < 1e-12);
        let twice = normalize_unit_cube(&n);
        for (a, b) in twice.positions().iter().zip(n.positions()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augment_is_seeded_similarity() {
        let c = cloud(&lcg_points(20, 4));
        let a = augment(&c, 11);
        assert_eq!(a, augment(&c, 11));
        let d = |cl: &PointCloud, i: usize, j: usize| squared_distance(&cl.positions()[i], &cl.positions()[j]).sqrt();
        let r0 = d(&c, 0, 1) / d(&c, 2, 3);
        let r1 = d(&a, 0, 1) / d(&a, 2, 3);
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn augment_bounds_over_many_seeds() {
        let c = cloud(&lcg_points(64, 5));
        let max_in = c.positions().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let bound = AUGMENT_SCALE.1 * max_in + AUGMENT_SHIFT;
        for seed in 0..1000 {
            let a = augment(&c, seed);
            assert!(a.positions().iter().flatten().all(|v| v.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn permuted_moves_labels_and_features() {
        let c = cloud(&[[0.0; 3], [1.0; 3], [2.0; 3]])
            .with_labels(vec![7, 8, 9])
            .unwrap()
            .with_features(Tensor::from_fn(&[3, 1], |i| i as f64))
            .unwrap();
        let p = c.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.point_labels().unwrap(), vec![9, 7, 8]);
        assert_eq!(p.features().unwrap().data(), &[2.0, 0.0, 1.0]);
        assert!(c.permuted(&[0, 0, 1]).is_err());
    }
}
