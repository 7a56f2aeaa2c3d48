//! Point clouds, normalization, farthest point sampling, kNN grouping and
//! resolution resampling. All distances use the xyz columns only.

pub mod spc1;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N×D` points; columns 0..3 are xyz, 3..6 (when present) rgb in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.ndim() != 2 || points.cols() < 3 || points.rows() == 0 {
            return Err(Error::invalid(format!(
                "point cloud must be N×D with N ≥ 1, D ≥ 3; got {:?}",
                points.shape()
            )));
        }
        if !points.is_finite() {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(self.points.gather_rows(indices)?)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..self.len() {
            let p = self.xyz(i);
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / self.len() as f64)
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| norm(self.xyz(i)))
            .fold(0.0, f64::max)
    }
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub(crate) fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Center xyz at the centroid and scale so the farthest point has norm 1.
/// Colour columns are untouched; an all-identical cloud maps to the origin.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if !cloud.points.is_finite() {
        return Err(Error::NonFinite("point cloud".into()));
    }
    let c = cloud.centroid();
    let mut pts = cloud.points.clone();
    let d = pts.cols();
    for row in pts.data_mut().chunks_mut(d) {
        for a in 0..3 {
            row[a] -= c[a];
        }
    }
    let r = (0..pts.rows())
        .map(|i| norm([pts.row(i)[0], pts.row(i)[1], pts.row(i)[2]]))
        .fold(0.0, f64::max);
    if r > 0.0 {
        for row in pts.data_mut().chunks_mut(d) {
            for v in &mut row[..3] {
                *v /= r;
            }
        }
    }
    PointCloud::new(pts)
}

/// How farthest point sampling picks its first point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Index 0 (deterministic mode).
    First,
    /// Uniform over the cloud from a seeded generator.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centers {
    pub indices: Vec<usize>,
    /// `N_s×3` xyz of the selected points.
    pub coords: Tensor,
    /// Euclidean distance from each selection to the previously selected set
    /// at the moment it was chosen (`inf` for the first, `0` for repeats).
    pub selection_distances: Vec<f64>,
}

/// Greedy farthest point sampling. Ties go to the lowest index. When more
/// samples than points are requested, the full FPS order repeats cyclically.
pub fn fps(cloud: &PointCloud, n_samples: usize, start: FpsStart) -> Result<Centers> {
    if n_samples == 0 {
        return Err(Error::invalid("fps needs at least one sample"));
    }
    let n = cloud.len();
    let first = match start {
        FpsStart::First => 0,
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
    };
    let distinct = n_samples.min(n);
    let xyz: Vec<[f64; 3]> = (0..n).map(|i| cloud.xyz(i)).collect();
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(n_samples);
    let mut dists = Vec::with_capacity(n_samples);

    let mut next = first;
    let mut next_d = f64::INFINITY;
    for _ in 0..distinct {
        order.push(next);
        dists.push(next_d.sqrt());
        chosen[next] = true;
        let p = xyz[next];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = sq_dist(xyz[i], p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        next = best;
        next_d = best_d;
    }
    for i in distinct..n_samples {
        order.push(order[i % distinct]);
        dists.push(0.0);
    }
    let coords: Vec<f64> = order.iter().flat_map(|&i| xyz[i]).collect();
    Ok(Centers {
        coords: Tensor::new(vec![n_samples, 3], coords)?,
        indices: order,
        selection_distances: dists,
    })
}

/// Local neighbourhoods, flattened group-major: row `c·k + j` is neighbour
/// `j` of center `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Groups {
    pub k: usize,
    pub neighbor_indices: Vec<usize>,
    /// `(N_s·k)×3` offsets `neighbor xyz − center xyz`.
    pub rel_coords: Tensor,
    /// `(N_s·k)×D` raw point rows.
    pub features: Tensor,
}

impl Groups {
    pub fn n_groups(&self) -> usize {
        self.neighbor_indices.len() / self.k
    }

    pub fn group(&self, c: usize) -> &[usize] {
        &self.neighbor_indices[c * self.k..(c + 1) * self.k]
    }
}

/// The `k` nearest points to each center: the center itself first, then the
/// rest by ascending distance with lowest-index tie-break. Groups of a cloud
/// with fewer than `k` points are padded by repeating the center.
pub fn knn_group(cloud: &PointCloud, centers: &Centers, k: usize) -> Result<Groups> {
    if k == 0 {
        return Err(Error::invalid("knn_group needs k ≥ 1"));
    }
    let n = cloud.len();
    let d = cloud.dim();
    let mut indices = Vec::with_capacity(centers.indices.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &ci in &centers.indices {
        if ci >= n {
            return Err(Error::invalid(format!("center {ci} out of range for {n} points")));
        }
        let cp = cloud.xyz(ci);
        cand.clear();
        cand.extend((0..n).filter(|&i| i != ci).map(|i| (sq_dist(cloud.xyz(i), cp), i)));
        let take = (k - 1).min(cand.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take > 0 && take < cand.len() {
            cand.select_nth_unstable_by(take - 1, cmp);
        }
        cand[..take].sort_unstable_by(cmp);
        indices.push(ci);
        indices.extend(cand[..take].iter().map(|&(_, i)| i));
        indices.extend(std::iter::repeat_n(ci, k - 1 - take));
    }
    let mut rel = Vec::with_capacity(indices.len() * 3);
    let mut feats = Vec::with_capacity(indices.len() * d);
    for (row, &i) in indices.iter().enumerate() {
        let c = cloud.xyz(centers.indices[row / k]);
        let p = cloud.xyz(i);
        rel.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        feats.extend_from_slice(cloud.row(i));
    }
    Ok(Groups {
        k,
        rel_coords: Tensor::new(vec![indices.len(), 3], rel)?,
        features: Tensor::new(vec![indices.len(), d], feats)?,
        neighbor_indices: indices,
    })
}

/// Change resolution to `target` points. Downsampling keeps a seeded FPS
/// subset; upsampling keeps every point and appends seeded-uniform duplicates.
pub fn resample(cloud: &PointCloud, target: usize, seed: u64) -> Result<PointCloud> {
    if target == 0 {
        return Err(Error::invalid("resample target must be ≥ 1"));
    }
    let n = cloud.len();
    if target == n {
        return Ok(cloud.clone());
    }
    if target < n {
        let centers = fps(cloud, target, FpsStart::Seeded(seed))?;
        return cloud.select(&centers.indices);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n)
        .chain((n..target).map(|_| rng.random_range(0..n)))
        .collect();
    cloud.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Tensor::randn(&[n, 6], 1.0, &mut rng)).unwrap()
    }

    /// Exhaustive greedy FPS: recompute every candidate's distance to the
    /// whole selected set at each step.
    fn fps_oracle(cloud: &PointCloud, m: usize) -> Vec<usize> {
        let mut sel = vec![0usize];
        while sel.len() < m {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..cloud.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| sq_dist(cloud.xyz(i), cloud.xyz(s)))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    /// All-pairs sort oracle for one center.
    fn knn_oracle(cloud: &PointCloud, center: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..cloud.len())
            .map(|i| (sq_dist(cloud.xyz(i), cloud.xyz(center)), i))
            .collect();
        all.sort_by(|a, b| {
            // the center sorts first, then distance, then index
            (a.1 != center)
                .cmp(&(b.1 != center))
                .then(a.0.partial_cmp(&b.0).unwrap())
                .then(a.1.cmp(&b.1))
        });
        let mut out: Vec<usize> = all.into_iter().map(|p| p.1).take(k).collect();
        out.resize(k, center);
        out
    }

    #[test]
    fn normalize_examples() {
        let unit = PointCloud::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
        let n = normalize(&unit).unwrap();
        for (a, b) in n.points().data().iter().zip(unit.points().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = PointCloud::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(normalize(&single).unwrap().points().data(), &[0.0, 0.0, 0.0]);
        let two = PointCloud::from_rows(&[vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            normalize(&two).unwrap().points().data(),
            &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn normalize_keeps_colours_and_hits_unit_radius() {
        let c = random_cloud(200, 3);
        let n = normalize(&c).unwrap();
        let cen = n.centroid();
        assert!(cen.iter().all(|v| v.abs() < 1e-9));
        assert!((n.max_norm() - 1.0).abs() < 1e-9);
        for i in 0..200 {
            assert_eq!(&n.row(i)[3..], &c.row(i)[3..]);
        }
    }

    #[test]
    fn non_finite_cloud_is_rejected() {
        let t = Tensor::new(vec![1, 3], vec![0.0, f64::NAN, 1.0]).unwrap();
        assert!(PointCloud::new(t).is_err());
    }

    #[test]
    fn fps_line_example() {
        let c = PointCloud::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![1.0, 0.0, 0.0]])
            .unwrap();
        assert_eq!(fps(&c, 2, FpsStart::First).unwrap().indices, vec![0, 2]);
    }

    #[test]
    fn fps_full_is_permutation_and_repeats_cyclically() {
        let c = random_cloud(17, 4);
        let mut idx = fps(&c, 17, FpsStart::Seeded(9)).unwrap().indices;
        idx.sort();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
        let over = fps(&c, 40, FpsStart::First).unwrap();
        assert_eq!(over.indices.len(), 40);
        for i in 17..40 {
            assert_eq!(over.indices[i], over.indices[i % 17]);
        }
    }

    #[test]
    fn fps_zero_samples_is_error() {
        assert!(fps(&random_cloud(5, 1), 0, FpsStart::First).is_err());
    }

    #[test]
    fn fps_coords_match_indices() {
        let c = random_cloud(30, 5);
        let centers = fps(&c, 8, FpsStart::Seeded(2)).unwrap();
        for (r, &i) in centers.indices.iter().enumerate() {
            assert_eq!(centers.coords.row(r), &c.xyz(i)[..]);
        }
    }

    #[test]
    fn knn_k1_is_center_and_kn_is_sorted_permutation() {
        let c = random_cloud(20, 6);
        let centers = fps(&c, 5, FpsStart::First).unwrap();
        let g1 = knn_group(&c, &centers, 1).unwrap();
        assert_eq!(g1.neighbor_indices, centers.indices);
        assert!(g1.rel_coords.data().iter().all(|&v| v == 0.0));
        let gn = knn_group(&c, &centers, 20).unwrap();
        for (ci, &center) in centers.indices.iter().enumerate() {
            let grp = gn.group(ci);
            let mut sorted = grp.to_vec();
            sorted.sort();
            assert_eq!(sorted, (0..20).collect::<Vec<_>>());
            let dists: Vec<f64> = grp.iter().map(|&i| sq_dist(c.xyz(i), c.xyz(center))).collect();
            assert!(dists.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn knn_pads_small_clouds_with_center() {
        let c = random_cloud(3, 7);
        let centers = fps(&c, 2, FpsStart::First).unwrap();
        let g = knn_group(&c, &centers, 5).unwrap();
        assert_eq!(g.group(0)[3..], [centers.indices[0]; 2]);
        assert_eq!(g.features.shape(), &[10, 6]);
    }

    #[test]
    fn knn_matches_all_pairs_oracle_on_50_point_clouds() {
        for seed in 0..20 {
            let c = random_cloud(50, 100 + seed);
            let centers = fps(&c, 10, FpsStart::Seeded(seed)).unwrap();
            let g = knn_group(&c, &centers, 8).unwrap();
            for (ci, &center) in centers.indices.iter().enumerate() {
                assert_eq!(g.group(ci), knn_oracle(&c, center, 8));
            }
        }
    }

    #[test]
    fn resample_examples() {
        let c = random_cloud(64, 8);
        assert_eq!(resample(&c, 64, 1).unwrap(), c);
        let up = resample(&c, 128, 1).unwrap();
        assert_eq!(up.len(), 128);
        for i in 0..128 {
            assert!((0..64).any(|j| c.row(j) == up.row(i)));
        }
        assert_eq!(resample(&c, 16, 2).unwrap().len(), 16);
    }

    #[test]
    fn downsample_then_normalize_is_centered() {
        let c = random_cloud(8192, 9);
        let n = normalize(&resample(&c, 2048, 3).unwrap()).unwrap();
        assert!(n.centroid().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn duplicate_points_do_not_break_fps_distinctness() {
        let c = PointCloud::from_rows(&vec![vec![1.0, 1.0, 1.0]; 6]).unwrap();
        let mut idx = fps(&c, 6, FpsStart::First).unwrap().indices;
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fps_matches_exhaustive_oracle(n in 1usize..=64, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let c = random_cloud(n, seed);
            let m = 1 + ((n - 1) as f64 * frac) as usize;
            prop_assert_eq!(fps(&c, m, FpsStart::First).unwrap().indices, fps_oracle(&c, m));
        }

        #[test]
        fn fps_selection_distances_never_increase(n in 2usize..=100, seed in any::<u64>()) {
            let c = random_cloud(n, seed);
            let d = fps(&c, n, FpsStart::Seeded(seed)).unwrap().selection_distances;
            prop_assert!(d.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn knn_matches_oracle(n in 1usize..=256, k in 1usize..=12, seed in any::<u64>()) {
            let c = random_cloud(n, seed);
            let centers = fps(&c, 4.min(n), FpsStart::Seeded(seed)).unwrap();
            let g = knn_group(&c, &centers, k).unwrap();
            for (ci, &center) in centers.indices.iter().enumerate() {
                prop_assert_eq!(g.group(ci), &knn_oracle(&c, center, k)[..]);
                for j in 0..k {
                    let row = ci * k + j;
                    let p = c.xyz(g.neighbor_indices[row]);
                    let q = c.xyz(center);
                    for a in 0..3 {
                        prop_assert_eq!(g.rel_coords.row(row)[a], p[a] - q[a]);
                    }
                }
            }
        }
    }
}
