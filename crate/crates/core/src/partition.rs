//! Point → segment partitions (voxels or superpoints), feature pooling and
//! projection of point labels onto segments.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Groups, Var};
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::spatial::Grid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingMode {
    Voxel,
    Superpoint,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(Self::Voxel),
            "superpoint" => Ok(Self::Superpoint),
            _ => Err(Error::Config(format!("unknown pooling mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Voxel => "voxel",
            Self::Superpoint => "superpoint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub mode: PoolingMode,
    segment_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    pub voxel_size: Option<f64>,
    /// Points whose neighborhood was too degenerate for a plane fit.
    pub degenerate_normals: usize,
}

impl Partition {
    /// Builds a partition from arbitrary labels; segments are renumbered by
    /// their lowest point index.
    pub fn from_labels(mode: PoolingMode, labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("partition of zero points".into()));
        }
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for &l in labels {
            if !remap.contains_key(&l) {
                remap.insert(l, order.len());
                order.push(l);
            }
        }
        let segment_of: Vec<usize> = labels.iter().map(|l| remap[l]).collect();
        Ok(Self::from_dense(mode, segment_of, order.len()))
    }

    /// Builds a partition that keeps the given segment ids; every id in
    /// `0..num_segments` must own at least one point.
    pub fn from_segment_ids(mode: PoolingMode, segment_of: Vec<usize>, num_segments: usize) -> Result<Self> {
        let mut used = vec![false; num_segments];
        for &s in &segment_of {
            *used
                .get_mut(s)
                .ok_or_else(|| Error::Contract(format!("segment id {s} out of range 0..{num_segments}")))? = true;
        }
        if let Some(s) = used.iter().position(|&u| !u) {
            return Err(Error::Contract(format!("segment {s} has no points")));
        }
        Ok(Self::from_dense(mode, segment_of, num_segments))
    }

    fn from_dense(mode: PoolingMode, segment_of: Vec<usize>, m: usize) -> Self {
        let mut members = vec![Vec::new(); m];
        for (i, &s) in segment_of.iter().enumerate() {
            members[s].push(i);
        }
        debug_assert!(members.iter().all(|m| !m.is_empty()));
        Self {
            mode,
            segment_of,
            members,
            voxel_size: None,
            degenerate_normals: 0,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.members.len()
    }

    pub fn num_points(&self) -> usize {
        self.segment_of.len()
    }

    pub fn segment_of(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn members(&self, s: usize) -> &[usize] {
        &self.members[s]
    }

    pub fn groups(&self) -> Arc<Groups> {
        Arc::new(Groups::new(self.members.clone(), self.segment_of.len()).expect("valid partition"))
    }
}

/// Occupied cells of the grid `floor(coord / voxel_size)`, numbered in
/// lexicographic `(ix, iy, iz)` order.
pub fn voxelize(scene: &Scene, voxel_size: f64) -> Result<Partition> {
    if !(voxel_size > 0.0) {
        return Err(Error::Contract(format!("voxel size {voxel_size} must be positive")));
    }
    let keys: Vec<(i64, i64, i64)> = scene
        .points
        .iter()
        .map(|p| {
            (
                (p[0] / voxel_size).floor() as i64,
                (p[1] / voxel_size).floor() as i64,
                (p[2] / voxel_size).floor() as i64,
            )
        })
        .collect();
    let mut uniq = keys.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let segment_of = keys
        .iter()
        .map(|k| uniq.binary_search(k).expect("present"))
        .collect();
    let mut p = Partition::from_dense(PoolingMode::Voxel, segment_of, uniq.len());
    p.voxel_size = Some(voxel_size);
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointParams {
    pub k_neighbors: usize,
    pub angle_threshold_deg: f64,
    /// Maximum Euclidean RGB distance for two points to join.
    pub color_bound: f64,
    pub min_segment_size: usize,
}

impl Default for SuperpointParams {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            angle_threshold_deg: 20.0,
            color_bound: 0.2,
            min_segment_size: 5,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller root so results do not depend on edge order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues ascending with matching unit eigenvectors.
pub(crate) fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off < 1e-15 * (a[0][0].abs() + a[1][1].abs() + a[2][2].abs()).max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
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
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let vals = [a[idx[0]][idx[0]], a[idx[1]][idx[1]], a[idx[2]][idx[2]]];
    let vecs = [
        [v[0][idx[0]], v[1][idx[0]], v[2][idx[0]]],
        [v[0][idx[1]], v[1][idx[1]], v[2][idx[1]]],
        [v[0][idx[2]], v[1][idx[2]], v[2][idx[2]]],
    ];
    (vals, vecs)
}

/// Plane-fit normal of a neighborhood, or `None` if it is (nearly) collinear.
fn plane_normal(pts: &[[f64; 3]], idx: &[usize]) -> Option<[f64; 3]> {
    let n = idx.len() as f64;
    if idx.len() < 3 {
        return None;
    }
    let mut c = [0.0; 3];
    for &i in idx {
        for a in 0..3 {
            c[a] += pts[i][a] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for &i in idx {
        let d = [pts[i][0] - c[0], pts[i][1] - c[1], pts[i][2] - c[2]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += d[a] * d[b] / n;
            }
        }
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    if vals[2] <= 0.0 || vals[1] <= 1e-6 * vals[2] {
        return None;
    }
    Some(vecs[0])
}

/// Region growing over a k-nearest-neighbor graph. Neighbors join when their
/// normals are within the angle threshold and their colors within the color
/// bound; undersized regions are then merged into the nearest neighbor region.
pub fn build_superpoints(scene: &Scene, params: &SuperpointParams) -> Result<Partition> {
    let n = scene.len();
    if params.k_neighbors == 0 || n < params.k_neighbors {
        return Err(Error::Contract(format!(
            "superpoints need at least k={} points, scene has {n}",
            params.k_neighbors
        )));
    }
    let pts: Vec<[f64; 3]> = (0..n).map(|i| scene.xyz(i)).collect();
    let (lo, hi) = scene.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let cell = (extent / (n as f64).cbrt()).max(1e-3);
    let grid = Grid::new(&pts, cell);
    let knn: Vec<Vec<usize>> = (0..n).map(|i| grid.knn(i, params.k_neighbors)).collect();

    let mut degenerate = 0;
    let normals: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let mut nb = knn[i].clone();
            nb.push(i);
            plane_normal(&pts, &nb).unwrap_or_else(|| {
                degenerate += 1;
                [0.0, 0.0, 1.0]
            })
        })
        .collect();

    let cos_thr = params.angle_threshold_deg.to_radians().cos();
    let color_dist = |i: usize, j: usize| {
        let (a, b) = (&scene.points[i], &scene.points[j]);
        ((a[3] - b[3]).powi(2) + (a[4] - b[4]).powi(2) + (a[5] - b[5]).powi(2)).sqrt()
    };
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for &j in &knn[i] {
            let ni = normals[i];
            let nj = normals[j];
            let dot = (ni[0] * nj[0] + ni[1] * nj[1] + ni[2] * nj[2]).abs();
            if dot > cos_thr && color_dist(i, j) < params.color_bound {
                uf.union(i, j);
            }
        }
    }

    // Merge small regions, smallest first, into the region of the closest
    // color-compatible point outside them; graph neighbors first, then any
    // point. Only without any compatible point is color ignored.
    loop {
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            *sizes.entry(uf.find(i)).or_default() += 1;
        }
        let mut small: Vec<(usize, usize)> = sizes
            .iter()
            .filter(|(_, &s)| s < params.min_segment_size)
            .map(|(&r, &s)| (s, r))
            .collect();
        if small.is_empty() || sizes.len() == 1 {
            break;
        }
        small.sort_unstable();
        let (_, root) = small[0];
        let mut best: Option<(bool, f64, usize)> = None;
        for i in 0..n {
            if uf.find(i) != root {
                continue;
            }
            for &j in &knn[i] {
                if uf.find(j) == root {
                    continue;
                }
                let d = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>();
                let incompatible = color_dist(i, j) >= params.color_bound;
                let key = (incompatible, d, j);
                if best.map_or(true, |b| (key.0, key.1, key.2) < b) {
                    best = Some(key);
                }
            }
        }
        if best.map_or(true, |b| b.0) {
            // no compatible neighbor in the graph: look for the nearest
            // color-compatible point anywhere (sparse surfaces)
            let members: Vec<usize> = (0..n).filter(|&i| uf.find(i) == root).collect();
            let mut far: Option<(f64, usize)> = None;
            for &i in &members {
                for j in 0..n {
                    if color_dist(i, j) >= params.color_bound || uf.find(j) == root {
                        continue;
                    }
                    let d = (0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum::<f64>();
                    if far.map_or(true, |f| (d, j) < f) {
                        far = Some((d, j));
                    }
                }
            }
            if let Some((d, j)) = far {
                best = Some((false, d, j));
            }
        }
        match best {
            Some((_, _, j)) => {
                let any = (0..n).find(|&i| uf.find(i) == root).expect("nonempty");
                uf.union(any, j);
            }
            None => {
                // isolated in the graph: nothing to merge with
                let any = (0..n).find(|&i| uf.find(i) == root).expect("nonempty");
                let nearest = (0..n)
                    .filter(|&j| uf.find(j) != root)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..3).map(|k| (pts[any][k] - pts[a][k]).powi(2)).sum();
                        let db: f64 = (0..3).map(|k| (pts[any][k] - pts[b][k]).powi(2)).sum();
                        da.total_cmp(&db).then(a.cmp(&b))
                    })
                    .expect("more than one region");
                uf.union(any, nearest);
            }
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    let mut p = Partition::from_labels(PoolingMode::Superpoint, &labels)?;
    p.degenerate_normals = degenerate;
    Ok(p)
}

/// Mean of point features per segment (value only).
pub fn pool(features: &Tensor, partition: &Partition) -> Result<Tensor> {
    let (n, c) = features.dims2()?;
    if n != partition.num_points() {
        return Err(Error::shape("pool", features.shape(), &[partition.num_points(), c]));
    }
    let mut out = vec![0.0; partition.num_segments() * c];
    for (s, m) in partition.members.iter().enumerate() {
        let row = &mut out[s * c..(s + 1) * c];
        for &i in m {
            for (o, v) in row.iter_mut().zip(features.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / m.len() as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::matrix(partition.num_segments(), c, out)
}

/// Differentiable pooling on a tape.
pub fn pool_var(features: &Var, partition: &Partition) -> Result<Var> {
    features.group_mean(partition.groups())
}

/// Ground truth expressed over segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGroundTruth {
    /// Voted scene instance id per segment (−1 = none).
    pub segment_instance: Vec<i32>,
    /// Voted semantic id per segment (−1 = unlabeled).
    pub segment_semantic: Vec<i32>,
    pub instances: Vec<GtInstance>,
    /// `semantic_masks[c][s]` is true when segment `s` has semantic id `c`.
    pub semantic_masks: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    /// Scene instance id.
    pub id: i32,
    /// Semantic class id.
    pub semantic: usize,
    pub mask: Vec<bool>,
}

impl SegmentGroundTruth {
    pub fn num_segments(&self) -> usize {
        self.segment_instance.len()
    }

    /// Index into `instances` for each segment.
    pub fn segment_gt_index(&self) -> Vec<Option<usize>> {
        self.segment_instance
            .iter()
            .map(|&id| self.instances.iter().position(|g| g.id == id))
            .collect()
    }

    pub fn instance_mask_tensor(&self) -> Option<Tensor> {
        let m = self.num_segments();
        let k = self.instances.len();
        if k == 0 {
            return None;
        }
        let mut data = vec![0.0; m * k];
        for (j, g) in self.instances.iter().enumerate() {
            for (s, &b) in g.mask.iter().enumerate() {
                if b {
                    data[s * k + j] = 1.0;
                }
            }
        }
        Some(Tensor::matrix(m, k, data).expect("nonempty"))
    }
}

/// Majority vote where −1 wins only with a strict majority and ties go to the smaller id.
fn vote(values: impl Iterator<Item = i32>) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    let mut total = 0;
    for v in values {
        *counts.entry(v).or_default() += 1;
        total += 1;
    }
    let void = counts.remove(&-1).unwrap_or(0);
    if 2 * void > total {
        return -1;
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(-1, |(&id, _)| id)
}

pub fn project_ground_truth(scene: &Scene, partition: &Partition) -> Result<SegmentGroundTruth> {
    if partition.num_points() != scene.len() {
        return Err(Error::shape("project_ground_truth", &[scene.len()], &[partition.num_points()]));
    }
    let m = partition.num_segments();
    let mut inst_class: BTreeMap<i32, usize> = BTreeMap::new();
    for i in 0..scene.len() {
        if scene.instance_id[i] >= 0 {
            inst_class.insert(scene.instance_id[i], scene.semantic_id[i] as usize);
        }
    }
    let mut segment_instance = Vec::with_capacity(m);
    let mut segment_semantic = Vec::with_capacity(m);
    for s in 0..m {
        let pts = &partition.members[s];
        let inst = vote(pts.iter().map(|&i| scene.instance_id[i]));
        let sem = if inst >= 0 {
            inst_class[&inst] as i32
        } else {
            vote(pts.iter().map(|&i| scene.semantic_id[i]))
        };
        segment_instance.push(inst);
        segment_semantic.push(sem);
    }
    let mut ids: Vec<i32> = segment_instance.iter().copied().filter(|&i| i >= 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let instances = ids
        .into_iter()
        .map(|id| GtInstance {
            id,
            semantic: inst_class[&id],
            mask: segment_instance.iter().map(|&x| x == id).collect(),
        })
        .collect();
    let semantic_masks = (0..scene.catalog.len())
        .map(|c| segment_semantic.iter().map(|&x| x == c as i32).collect())
        .collect();
    Ok(SegmentGroundTruth {
        segment_instance,
        segment_semantic,
        instances,
        semantic_masks,
    })
}

/// Broadcasts per-segment values to the points of each segment.
pub fn unpool_masks<T: Copy>(segment_values: &[T], partition: &Partition) -> Result<Vec<T>> {
    if segment_values.len() != partition.num_segments() {
        return Err(Error::shape(
            "unpool_masks",
            &[segment_values.len()],
            &[partition.num_segments()],
        ));
    }
    Ok(partition.segment_of.iter().map(|&s| segment_values[s]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ClassCatalog;

    fn scene_at(coords: &[[f64; 3]], inst: Vec<i32>, sem: Vec<i32>) -> Scene {
        Scene::new(
            coords.iter().map(|c| [c[0], c[1], c[2], 0.5, 0.5, 0.5]).collect(),
            inst,
            sem,
            ClassCatalog::from_pairs(&[("floor", false), ("chair", true)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn explicit_segment_ids_are_kept() {
        let p = Partition::from_segment_ids(PoolingMode::Voxel, vec![1, 0, 1], 2).unwrap();
        assert_eq!(p.segment_of(), &[1, 0, 1]);
        assert_eq!(p.members(1), &[0, 2]);
        assert!(Partition::from_segment_ids(PoolingMode::Voxel, vec![0, 2], 3).is_err());
        assert!(Partition::from_segment_ids(PoolingMode::Voxel, vec![0, 3], 3).is_err());
    }

    #[test]
    fn voxel_examples() {
        let s = scene_at(&[[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]], vec![-1, -1], vec![0, 0]);
        assert_eq!(voxelize(&s, 0.02).unwrap().num_segments(), 1);
        let s = scene_at(&[[0.0, 0.0, 0.0], [0.03, 0.0, 0.0]], vec![-1, -1], vec![0, 0]);
        assert_eq!(voxelize(&s, 0.02).unwrap().num_segments(), 2);
        assert!(voxelize(&s, 0.0).is_err());
    }

    #[test]
    fn voxel_numbering_is_lexicographic() {
        let s = scene_at(
            &[[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.0]],
            vec![-1; 4],
            vec![0; 4],
        );
        let p = voxelize(&s, 0.1).unwrap();
        assert_eq!(p.segment_of(), &[3, 2, 1, 0]);
    }

    #[test]
    fn pool_examples() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let one = Partition::from_labels(PoolingMode::Superpoint, &[0, 0]).unwrap();
        assert_eq!(pool(&f, &one).unwrap().data(), &[2.0, 3.0]);
        let single = Partition::from_labels(PoolingMode::Superpoint, &[7, 3]).unwrap();
        assert_eq!(pool(&f, &single).unwrap(), f);
        let bad = Tensor::zeros(3, 2);
        assert!(pool(&bad, &one).is_err());
    }

    #[test]
    fn majority_vote_rules() {
        assert_eq!(vote([5, 5, 5, -1].into_iter()), 5);
        assert_eq!(vote([7, 7, 5, 5].into_iter()), 5);
        assert_eq!(vote([-1, -1, 5, 5].into_iter()), 5);
        assert_eq!(vote([-1, -1, -1, 5, 5].into_iter()), -1);
        assert_eq!(vote([-1, -1, -1, 5, 5, 7, 7].into_iter()), 5);
    }

    #[test]
    fn projection_on_mixed_segment() {
        let coords = [[0.0; 3]; 4];
        let s = scene_at(&coords, vec![5, 5, 5, -1], vec![1, 1, 1, 0]);
        let p = Partition::from_labels(PoolingMode::Voxel, &[0, 0, 0, 0]).unwrap();
        let gt = project_ground_truth(&s, &p).unwrap();
        assert_eq!(gt.segment_instance, vec![5]);
        assert_eq!(gt.segment_semantic, vec![1]);
        assert_eq!(gt.instances[0].mask, vec![true]);
        assert_eq!(gt.semantic_masks, vec![vec![false], vec![true]]);
    }

    #[test]
    fn projection_tie_prefers_smaller_instance() {
        let coords = [[0.0; 3]; 4];
        let s = scene_at(&coords, vec![9, 9, 4, 4], vec![1; 4]);
        let p = Partition::from_labels(PoolingMode::Voxel, &[0; 4]).unwrap();
        let gt = project_ground_truth(&s, &p).unwrap();
        assert_eq!(gt.segment_instance, vec![4]);
        assert_eq!(gt.instances.len(), 1);
    }

    #[test]
    fn unpool_examples() {
        let p = Partition::from_labels(PoolingMode::Voxel, &[0, 0, 0]).unwrap();
        assert_eq!(unpool_masks(&[true], &p).unwrap(), vec![true; 3]);
        assert!(unpool_masks(&[true, false], &p).is_err());
    }

    #[test]
    fn planar_patch_is_one_superpoint() {
        let mut coords = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                coords.push([i as f64 * 0.05, j as f64 * 0.05 + 0.001 * i as f64, 0.0]);
            }
        }
        let s = scene_at(&coords, vec![-1; 100], vec![0; 100]);
        let p = build_superpoints(&s, &SuperpointParams::default()).unwrap();
        assert_eq!(p.num_segments(), 1);
        assert_eq!(p.degenerate_normals, 0);
    }

    #[test]
    fn distant_parallel_planes_are_two_superpoints() {
        let mut coords = Vec::new();
        for z in [0.0, 5.0] {
            for i in 0..8 {
                for j in 0..8 {
                    coords.push([i as f64 * 0.05, j as f64 * 0.05 + 0.002 * i as f64, z]);
                }
            }
        }
        let n = coords.len();
        let s = scene_at(&coords, vec![-1; n], vec![0; n]);
        let p = build_superpoints(&s, &SuperpointParams::default()).unwrap();
        assert_eq!(p.num_segments(), 2);
        assert_eq!(p.members(0).len(), 64);
    }

    #[test]
    fn collinear_points_use_up_normal() {
        let coords: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let s = scene_at(&coords, vec![-1; 20], vec![0; 20]);
        let p = build_superpoints(&s, &SuperpointParams::default()).unwrap();
        assert_eq!(p.degenerate_normals, 20);
        assert_eq!(p.num_segments(), 1);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let (vals, vecs) = symmetric_eigen3([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12 && (vals[2] - 5.0).abs() < 1e-12);
        let v = vecs[0];
        assert!((v[0] + v[1]).abs() < 1e-12 && v[2].abs() < 1e-12);
    }
}
