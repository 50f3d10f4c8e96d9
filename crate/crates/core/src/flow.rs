//! Per-cluster rigid Gaussian scene flow between consecutive frames, dynamic
//! propagation, and the static history queue.
//!
//! Pipeline: remove ground (percentile-seeded RANSAC plane), density-cluster
//! both frames, greedily associate clusters across frames by centroid
//! distance, register each matched pair with point-to-point ICP, and read the
//! flow of every previous-frame Gaussian off its cluster's rigid transform.
//! Ground, noise, and unmatched Gaussians carry zero flow.

use crate::core::{lattice_key, Gaussian, GridSpec};
use crate::spatial::KdTree;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use std::collections::HashMap;

/// Ground segmentation and clustering knobs; defaults are desk-scale sound.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Neighborhood radius for density clustering, meters.
    pub cluster_eps: f64,
    /// Minimum member count for a cluster; smaller groups become noise.
    pub min_cluster_size: usize,
    /// Maximum centroid distance for cross-frame cluster association, meters.
    pub associate_gate: f64,
    /// Plane inlier distance for ground classification, meters.
    pub ground_inlier: f64,
    /// Fraction of lowest-z centers seeding the plane fit.
    pub ground_percentile: f64,
    /// Maximum ICP rounds per cluster pair.
    pub icp_max_rounds: usize,
    /// Transform-delta convergence threshold.
    pub icp_tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            cluster_eps: 0.8,
            min_cluster_size: 10,
            associate_gate: 3.0,
            ground_inlier: 0.25,
            ground_percentile: 0.3,
            icp_max_rounds: 30,
            icp_tol: 1e-4,
        }
    }
}

/// Role of one previous-frame Gaussian in the flow estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowLabel {
    Ground,
    Noise,
    Cluster(usize),
}

/// Rigid transform recovered for one matched cluster pair.
#[derive(Debug, Clone)]
pub struct ClusterTransform {
    pub prev_cluster: usize,
    pub curr_cluster: usize,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub rms: f64,
}

/// Per-previous-Gaussian rigid motion vectors with the cluster partition.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub vectors: Vec<Vector3<f64>>,
    pub cluster_of: Vec<FlowLabel>,
    pub transforms: Vec<ClusterTransform>,
}

impl FlowField {
    /// All-zero field (flow disabled or first frame): everything static.
    pub fn zero(n: usize) -> Self {
        FlowField {
            vectors: vec![Vector3::zeros(); n],
            cluster_of: vec![FlowLabel::Noise; n],
            transforms: Vec::new(),
        }
    }
}

/// Splits centers into (ground, object) index sets. RANSAC plane fit seeded
/// from the lowest-z percentile; when the best plane tilts more than 30 degrees
/// from +z the fit falls back to the horizontal plane at the seed percentile.
/// Fewer than 3 centers: everything is object.
pub fn remove_ground(centers: &[Vector3<f64>], params: &FlowParams) -> (Vec<usize>, Vec<usize>) {
    if centers.len() < 3 {
        return (Vec::new(), (0..centers.len()).collect());
    }
    let mut zs: Vec<f64> = centers.iter().map(|c| c.z).collect();
    zs.sort_by(f64::total_cmp);
    let z_seed = zs[((zs.len() as f64 - 1.0) * params.ground_percentile) as usize];
    let candidates: Vec<usize> = (0..centers.len())
        .filter(|&i| centers[i].z <= z_seed)
        .collect();

    let plane = if candidates.len() >= 3 {
        ransac_plane(centers, &candidates, params.ground_inlier)
    } else {
        None
    };
    let min_up = 30f64.to_radians().cos();
    let (normal, offset) = match plane {
        Some((n, d)) if n.z.abs() >= min_up => (n, d),
        // Fallback: horizontal plane through the seed percentile height.
        _ => (Vector3::new(0.0, 0.0, 1.0), -z_seed),
    };

    let mut ground = Vec::new();
    let mut object = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        if (normal.dot(c) + offset).abs() <= params.ground_inlier {
            ground.push(i);
        } else {
            object.push(i);
        }
    }
    (ground, object)
}

/// Best plane (unit normal, offset) through RANSAC over candidate triples,
/// scored by candidate inlier count. Deterministically seeded.
fn ransac_plane(
    centers: &[Vector3<f64>],
    candidates: &[usize],
    inlier_dist: f64,
) -> Option<(Vector3<f64>, f64)> {
    let mut rng = StdRng::seed_from_u64(0x9c0_ffee);
    let mut best: Option<(Vector3<f64>, f64)> = None;
    let mut best_count = 0usize;
    for _ in 0..128 {
        let pick = |rng: &mut StdRng| candidates[rng.random_range(0..candidates.len())];
        let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
        if a == b || b == c || a == c {
            continue;
        }
        let n = (centers[b] - centers[a]).cross(&(centers[c] - centers[a]));
        let norm = n.norm();
        if norm < 1e-9 {
            continue;
        }
        let n = n / norm;
        let d = -n.dot(&centers[a]);
        let count = candidates
            .iter()
            .filter(|&&i| (n.dot(&centers[i]) + d).abs() <= inlier_dist)
            .count();
        if count > best_count {
            best_count = count;
            best = Some((n, d));
        }
    }
    best
}

/// Single-linkage density clustering: points chained by distances <= eps form
/// one cluster; components smaller than `min_cluster_size` are noise. Cluster
/// ids are assigned in order of each cluster's smallest member index.
pub fn cluster(centers: &[Vector3<f64>], indices: &[usize], params: &FlowParams) -> Vec<FlowLabel> {
    let eps2 = params.cluster_eps * params.cluster_eps;
    let inv_eps = 1.0 / params.cluster_eps;
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (local, &gi) in indices.iter().enumerate() {
        let c = centers[gi];
        let key = (
            (c.x * inv_eps).floor() as i64,
            (c.y * inv_eps).floor() as i64,
            (c.z * inv_eps).floor() as i64,
        );
        grid.entry(key).or_default().push(local);
    }

    let mut parent: Vec<usize> = (0..indices.len()).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (local, &gi) in indices.iter().enumerate() {
        let c = centers[gi];
        let key = (
            (c.x * inv_eps).floor() as i64,
            (c.y * inv_eps).floor() as i64,
            (c.z * inv_eps).floor() as i64,
        );
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) else {
                        continue;
                    };
                    for &other in bucket {
                        if other <= local {
                            continue;
                        }
                        if (centers[indices[other]] - c).norm_squared() <= eps2 {
                            let (ra, rb) = (find(&mut parent, local), find(&mut parent, other));
                            if ra != rb {
                                parent[ra.max(rb)] = ra.min(rb);
                            }
                        }
                    }
                }
            }
        }
    }

    // Component sizes, then stable ids by smallest member index.
    let mut size: HashMap<usize, usize> = HashMap::new();
    for local in 0..indices.len() {
        *size.entry(find(&mut parent, local)).or_default() += 1;
    }
    let mut roots: Vec<usize> = size
        .iter()
        .filter(|(_, &s)| s >= params.min_cluster_size)
        .map(|(&r, _)| r)
        .collect();
    roots.sort_unstable();
    let id_of: HashMap<usize, usize> = roots.iter().enumerate().map(|(i, &r)| (r, i)).collect();

    let mut labels = vec![FlowLabel::Noise; indices.len()];
    for local in 0..indices.len() {
        let root = find(&mut parent, local);
        if let Some(&id) = id_of.get(&root) {
            labels[local] = FlowLabel::Cluster(id);
        }
    }
    labels
}

/// Greedy mutual-nearest centroid matching under a distance gate; ties broken
/// by smaller previous-cluster id, then smaller current id.
pub fn associate_clusters(
    prev_centroids: &[Vector3<f64>],
    curr_centroids: &[Vector3<f64>],
    gate: f64,
) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in prev_centroids.iter().enumerate() {
        for (j, q) in curr_centroids.iter().enumerate() {
            let d = (p - q).norm();
            if d <= gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_prev = vec![false; prev_centroids.len()];
    let mut used_curr = vec![false; curr_centroids.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_prev[i] && !used_curr[j] {
            used_prev[i] = true;
            used_curr[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    matches
}

/// Result of a rigid registration.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    pub rms: f64,
}

impl IcpResult {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot * x + self.trans
    }
}

/// Point-to-point ICP with closed-form rigid fits (SVD of the cross
/// covariance). Initialization aligns centroids and scans yaw over a 10-degree
/// grid, keeping the cheapest start; iteration alternates nearest-neighbor
/// assignment against `dst` with a full refit, up to `icp_max_rounds` or until
/// the transform stops moving.
pub fn icp_register(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    params: &FlowParams,
) -> Result<IcpResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let tree = KdTree::build(dst);
    let src_centroid = centroid(src);
    let dst_centroid = centroid(dst);

    // Coarse yaw scan about the source centroid.
    let mut best_rot = Matrix3::identity();
    let mut best_trans = dst_centroid - src_centroid;
    let mut best_cost = f64::INFINITY;
    for step in 0..36 {
        let yaw = (step as f64) * 10f64.to_radians();
        let rot = yaw_matrix(yaw);
        // x -> R (x - c_src) + c_dst
        let trans = dst_centroid - rot * src_centroid;
        let cost = nn_rms(src, &tree, dst, &rot, &trans);
        if cost < best_cost {
            best_cost = cost;
            best_rot = rot;
            best_trans = trans;
        }
    }

    let mut rot = best_rot;
    let mut trans = best_trans;
    let mut rms = best_cost;
    if rms == 0.0 {
        return Ok(IcpResult { rot, trans, rms });
    }
    for _ in 0..params.icp_max_rounds {
        // Correspondences under the current transform.
        let matched: Vec<Vector3<f64>> = src
            .iter()
            .map(|x| dst[tree.nearest(&(rot * x + trans)).unwrap().0])
            .collect();
        let (new_rot, new_trans) = rigid_fit(src, &matched);
        let delta = (new_rot - rot).norm() + (new_trans - trans).norm();
        rot = new_rot;
        trans = new_trans;
        rms = nn_rms(src, &tree, dst, &rot, &trans);
        if rms == 0.0 || delta < params.icp_tol {
            break;
        }
    }
    Ok(IcpResult { rot, trans, rms })
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn nn_rms(
    src: &[Vector3<f64>],
    tree: &KdTree,
    _dst: &[Vector3<f64>],
    rot: &Matrix3<f64>,
    trans: &Vector3<f64>,
) -> f64 {
    let sum: f64 = src
        .iter()
        .map(|x| tree.nearest(&(rot * x + trans)).unwrap().1)
        .sum();
    (sum / src.len() as f64).sqrt()
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]` (Kabsch).
fn rigid_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let sc = centroid(src);
    let dc = centroid(dst);
    let mut h = Matrix3::zeros();
    for (x, y) in src.iter().zip(dst) {
        h += (x - sc) * (y - dc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = vt.transpose() * flip * u.transpose();
    }
    let t = dc - r * sc;
    (r, t)
}

/// Full scene-flow estimate between the previous and current Gaussian sets.
pub fn scene_flow(prev: &[Gaussian], curr: &[Gaussian], params: &FlowParams) -> FlowField {
    let prev_centers: Vec<Vector3<f64>> = prev.iter().map(|g| g.mu).collect();
    let curr_centers: Vec<Vector3<f64>> = curr.iter().map(|g| g.mu).collect();

    let mut field = FlowField::zero(prev.len());
    let (prev_ground, prev_object) = remove_ground(&prev_centers, params);
    for &i in &prev_ground {
        field.cluster_of[i] = FlowLabel::Ground;
    }
    let (_, curr_object) = remove_ground(&curr_centers, params);
    if prev_object.is_empty() || curr_object.is_empty() {
        return field;
    }

    let prev_labels = cluster(&prev_centers, &prev_object, params);
    let curr_labels = cluster(&curr_centers, &curr_object, params);
    for (local, &gi) in prev_object.iter().enumerate() {
        field.cluster_of[gi] = prev_labels[local];
    }

    let prev_members = members_by_cluster(&prev_labels, &prev_object);
    let curr_members = members_by_cluster(&curr_labels, &curr_object);
    if prev_members.is_empty() || curr_members.is_empty() {
        return field;
    }

    let prev_centroids: Vec<Vector3<f64>> = prev_members
        .iter()
        .map(|m| centroid(&m.iter().map(|&i| prev_centers[i]).collect::<Vec<_>>()))
        .collect();
    let curr_centroids: Vec<Vector3<f64>> = curr_members
        .iter()
        .map(|m| centroid(&m.iter().map(|&i| curr_centers[i]).collect::<Vec<_>>()))
        .collect();

    let matches = associate_clusters(&prev_centroids, &curr_centroids, params.associate_gate);
    let registrations: Vec<(usize, usize, IcpResult)> = matches
        .par_iter()
        .filter_map(|&(pi, ci)| {
            let src: Vec<Vector3<f64>> =
                prev_members[pi].iter().map(|&i| prev_centers[i]).collect();
            let dst: Vec<Vector3<f64>> =
                curr_members[ci].iter().map(|&i| curr_centers[i]).collect();
            icp_register(&src, &dst, params).ok().map(|r| (pi, ci, r))
        })
        .collect();

    for (pi, ci, reg) in registrations {
        for &gi in &prev_members[pi] {
            field.vectors[gi] = reg.apply(&prev_centers[gi]) - prev_centers[gi];
        }
        field.transforms.push(ClusterTransform {
            prev_cluster: pi,
            curr_cluster: ci,
            rot: reg.rot,
            trans: reg.trans,
            rms: reg.rms,
        });
    }
    field
}

fn members_by_cluster(labels: &[FlowLabel], indices: &[usize]) -> Vec<Vec<usize>> {
    let mut count = 0usize;
    for l in labels {
        if let FlowLabel::Cluster(id) = l {
            count = count.max(id + 1);
        }
    }
    let mut members = vec![Vec::new(); count];
    for (local, l) in labels.iter().enumerate() {
        if let FlowLabel::Cluster(id) = l {
            members[*id].push(indices[local]);
        }
    }
    members
}

/// Copies every previous Gaussian with flow magnitude >= tau into the current
/// set, advected by its flow vector and restamped to `t_curr`. Returns the
/// number propagated.
pub fn propagate_dynamic(
    prev: &[Gaussian],
    flow: &FlowField,
    curr: &mut Vec<Gaussian>,
    tau: f64,
    t_curr: usize,
) -> usize {
    let mut added = 0;
    for (g, f) in prev.iter().zip(&flow.vectors) {
        if f.norm() >= tau {
            let mut moved = g.clone();
            moved.mu += f;
            moved.t = t_curr;
            curr.push(moved);
            added += 1;
        }
    }
    added
}

/// Deduplicated world-frame history of static Gaussians, keyed by voxel cell;
/// newest entry wins per cell.
#[derive(Debug, Clone)]
pub struct StaticQueue {
    delta: f64,
    origin: Vector3<f64>,
    entries: HashMap<(i64, i64, i64), Gaussian>,
}

impl StaticQueue {
    pub fn new(spec: &GridSpec) -> Self {
        StaticQueue {
            delta: spec.delta,
            origin: Vector3::new(spec.x_range.0, spec.y_range.0, spec.z_range.0),
            entries: HashMap::new(),
        }
    }

    fn key(&self, mu: &Vector3<f64>) -> (i64, i64, i64) {
        let spec = GridSpec::new(
            (self.origin.x, self.origin.x + self.delta),
            (self.origin.y, self.origin.y + self.delta),
            (self.origin.z, self.origin.z + self.delta),
            self.delta,
            1,
        );
        lattice_key(&spec, mu)
    }

    pub fn insert(&mut self, g: Gaussian) {
        self.entries.insert(self.key(&g.mu), g);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Snapshot in deterministic (cell-key) order.
    pub fn gaussians(&self) -> Vec<Gaussian> {
        let mut keys: Vec<(i64, i64, i64)> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| self.entries[&k].clone()).collect()
    }

    /// Drops entries whose horizontal distance from `center` exceeds
    /// `radius` (memory bound over long sequences).
    pub fn evict_beyond(&mut self, center: &Vector3<f64>, radius: f64) {
        let r2 = radius * radius;
        self.entries.retain(|_, g| {
            let dx = g.mu.x - center.x;
            let dy = g.mu.y - center.y;
            dx * dx + dy * dy <= r2
        });
    }

    /// Pads stored semantic vectors with zero weight for newly added classes.
    pub fn pad_classes(&mut self, num_classes: usize) {
        for g in self.entries.values_mut() {
            if g.sem.len() < num_classes {
                g.sem.resize(num_classes, 0.0);
            }
        }
    }
}

/// Inserts every previous Gaussian with flow magnitude < tau into the queue.
pub fn enqueue_static(prev: &[Gaussian], flow: &FlowField, tau: f64, queue: &mut StaticQueue) {
    for (g, f) in prev.iter().zip(&flow.vectors) {
        if f.norm() < tau {
            queue.insert(g.clone());
        }
    }
}
