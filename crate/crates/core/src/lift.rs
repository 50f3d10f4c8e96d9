//! Instantiate time-aware Gaussians from the frame's point cloud and lift
//! multi-view 2D semantics onto them.
//!
//! Instantiation prunes to one Gaussian per occupied voxel cell (the working
//! grid's `delta`), merging per-point semantics, which keeps the set small
//! relative to the raw cloud for optimization and voxelization.

use crate::core::{lattice_key, CameraView, FrameBundle, Gaussian, PipelineConfig};
use crate::ingest::SENTINEL;
use nalgebra::Vector3;
use std::collections::HashMap;

/// Activated opacity of freshly instantiated Gaussians; low enough that
/// optimization, not initialization, decides occupancy salience.
pub const INIT_OPACITY: f64 = 0.1;

/// True iff the world point has positive camera depth, projects inside the
/// image, and is not sky-masked.
pub fn visibility(mu: &Vector3<f64>, view: &CameraView) -> bool {
    let xc = view.world_to_cam(mu);
    if xc.z <= 0.0 {
        return false;
    }
    let (u, v) = view.cam_to_pixel(&xc);
    if u < 0.0 || v < 0.0 || u >= view.width as f64 || v >= view.height as f64 {
        return false;
    }
    !view.is_sky(u, v)
}

/// Mask class id at the projection of `mu`, when visible and labeled.
fn mask_lookup(mu: &Vector3<f64>, view: &CameraView) -> Option<u16> {
    if !visibility(mu, view) {
        return None;
    }
    let xc = view.world_to_cam(mu);
    let (u, v) = view.cam_to_pixel(&xc);
    let id = view.sem_mask[v.floor() as usize * view.width + u.floor() as usize];
    (id != SENTINEL).then_some(id)
}

/// Image color at the projection of `mu`, when visible.
fn color_lookup(mu: &Vector3<f64>, view: &CameraView) -> Option<Vector3<f64>> {
    if !visibility(mu, view) {
        return None;
    }
    let xc = view.world_to_cam(mu);
    let (u, v) = view.cam_to_pixel(&xc);
    let base = 3 * (v.floor() as usize * view.width + u.floor() as usize);
    Some(Vector3::new(
        view.image[base],
        view.image[base + 1],
        view.image[base + 2],
    ))
}

/// Per-center class distributions averaged over the views where the center
/// is visible and the mask pixel is labeled, renormalized to sum 1. Centers
/// visible nowhere (or only on sentinel pixels) get the uniform distribution.
pub fn lift_semantics(
    centers: &[Vector3<f64>],
    views: &[CameraView],
    num_classes: usize,
) -> Vec<Vec<f64>> {
    centers
        .iter()
        .map(|mu| {
            let mut sem = vec![0.0; num_classes];
            let mut hits = 0usize;
            for view in views {
                if let Some(id) = mask_lookup(mu, view) {
                    if (id as usize) <= num_classes {
                        sem[id as usize - 1] += 1.0;
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                vec![1.0 / num_classes as f64; num_classes]
            } else {
                for w in &mut sem {
                    *w /= hits as f64;
                }
                sem
            }
        })
        .collect()
}

/// One Gaussian per occupied cell of the working grid: position at the cell's
/// point centroid, semantics and color merged over the cell's points, scale
/// activated to exactly `delta` and opacity to [`INIT_OPACITY`].
pub fn instantiate_gaussians(frame: &FrameBundle, cfg: &PipelineConfig) -> Vec<Gaussian> {
    let c = cfg.grid.num_classes;
    if frame.points.is_empty() || c == 0 {
        return Vec::new();
    }
    let sems = lift_semantics(&frame.points, &frame.views, c);

    struct CellAcc {
        pos: Vector3<f64>,
        sem: Vec<f64>,
        color: Vector3<f64>,
        color_hits: usize,
        count: usize,
    }
    let mut cells: HashMap<(i64, i64, i64), CellAcc> = HashMap::new();
    for (i, p) in frame.points.iter().enumerate() {
        let key = lattice_key(&cfg.grid, p);
        let acc = cells.entry(key).or_insert_with(|| CellAcc {
            pos: Vector3::zeros(),
            sem: vec![0.0; c],
            color: Vector3::zeros(),
            color_hits: 0,
            count: 0,
        });
        acc.pos += p;
        for (a, s) in acc.sem.iter_mut().zip(&sems[i]) {
            *a += s;
        }
        let mut col = Vector3::zeros();
        let mut views_seen = 0usize;
        for view in &frame.views {
            if let Some(cv) = color_lookup(p, view) {
                col += cv;
                views_seen += 1;
            }
        }
        if views_seen > 0 {
            acc.color += col / views_seen as f64;
            acc.color_hits += 1;
        }
        acc.count += 1;
    }

    let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter()
        .map(|key| {
            let acc = &cells[&key];
            let n = acc.count as f64;
            let total: f64 = acc.sem.iter().sum();
            let sem = acc.sem.iter().map(|s| s / total).collect();
            let color = if acc.color_hits > 0 {
                acc.color / acc.color_hits as f64
            } else {
                Vector3::new(0.5, 0.5, 0.5)
            };
            Gaussian::new(acc.pos / n, INIT_OPACITY, color, sem, frame.t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{GridSpec, PipelineConfig};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Matrix3x4, Matrix4};

    fn identity_view(w: usize, h: usize) -> CameraView {
        let f = w as f64;
        CameraView {
            intrinsics: Matrix3::new(f, 0.0, w as f64 / 2.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 1.0),
            extrinsics: Matrix3x4::from_fn(|r, c| if r == c { 1.0 } else { 0.0 }),
            width: w,
            height: h,
            image: vec![0.25; w * h * 3],
            sem_mask: vec![SENTINEL; w * h],
            sky_mask: None,
            depth_target: Vec::new(),
        }
    }

    fn fill_mask(view: &mut CameraView, id: u16) {
        view.sem_mask.iter_mut().for_each(|m| *m = id);
    }

    fn test_cfg(c: usize) -> PipelineConfig {
        PipelineConfig::new(GridSpec::new((-10.0, 10.0), (-10.0, 10.0), (-2.0, 2.0), 0.5, c))
    }

    #[test]
    fn visibility_front_back_and_sky() {
        let mut view = identity_view(64, 48);
        assert!(visibility(&Vector3::new(0.0, 0.0, 5.0), &view));
        assert!(!visibility(&Vector3::new(0.0, 0.0, -5.0), &view));
        // Sky mask over the principal point kills visibility there.
        let mut sky = vec![false; 64 * 48];
        sky[24 * 64 + 32] = true;
        view.sky_mask = Some(sky);
        assert!(!visibility(&Vector3::new(0.0, 0.0, 5.0), &view));
        assert!(visibility(&Vector3::new(0.5, 0.3, 5.0), &view));
    }

    #[test]
    fn unanimous_views_give_one_hot() {
        let mut v1 = identity_view(64, 48);
        let mut v2 = identity_view(64, 48);
        fill_mask(&mut v1, 3);
        fill_mask(&mut v2, 3);
        let sems = lift_semantics(&[Vector3::new(0.0, 0.0, 5.0)], &[v1, v2], 5);
        assert_relative_eq!(sems[0][2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sems[0].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disagreeing_views_average() {
        let mut v1 = identity_view(64, 48);
        let mut v2 = identity_view(64, 48);
        fill_mask(&mut v1, 3);
        fill_mask(&mut v2, 5);
        let sems = lift_semantics(&[Vector3::new(0.0, 0.0, 5.0)], &[v1, v2], 5);
        assert_relative_eq!(sems[0][2], 0.5, epsilon = 1e-12);
        assert_relative_eq!(sems[0][4], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn invisible_center_gets_uniform() {
        let view = identity_view(64, 48);
        let sems = lift_semantics(&[Vector3::new(0.0, 0.0, -5.0)], &[view], 4);
        assert_eq!(sems[0], vec![0.25; 4]);
    }

    #[test]
    fn sentinel_only_center_gets_uniform() {
        let view = identity_view(64, 48); // mask all sentinel
        let sems = lift_semantics(&[Vector3::new(0.0, 0.0, 5.0)], &[view], 4);
        assert_eq!(sems[0], vec![0.25; 4]);
    }

    fn frame_with_points(points: Vec<Vector3<f64>>, views: Vec<CameraView>) -> FrameBundle {
        FrameBundle {
            t: 2,
            points,
            ego_pose: Matrix4::identity(),
            views,
        }
    }

    #[test]
    fn points_in_one_cell_merge() {
        let cfg = test_cfg(3);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|i| Vector3::new(0.05 + 0.004 * (i % 10) as f64, 0.1, 5.1))
            .collect();
        let centroid =
            pts.iter().fold(Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
        let frame = frame_with_points(pts, vec![identity_view(64, 48)]);
        let gs = instantiate_gaussians(&frame, &cfg);
        assert_eq!(gs.len(), 1);
        assert_relative_eq!(gs[0].mu, centroid, epsilon = 1e-12);
        assert_eq!(gs[0].t, 2);
        assert_relative_eq!(gs[0].opacity(), INIT_OPACITY, epsilon = 1e-12);
        assert_relative_eq!(gs[0].scale(cfg.delta()).x, cfg.delta(), epsilon = 1e-9);
    }

    #[test]
    fn points_in_distinct_cells_stay_separate() {
        let cfg = test_cfg(3);
        let frame = frame_with_points(
            vec![Vector3::new(0.1, 0.1, 5.0), Vector3::new(3.0, 0.1, 5.0)],
            vec![identity_view(64, 48)],
        );
        assert_eq!(instantiate_gaussians(&frame, &cfg).len(), 2);
    }

    #[test]
    fn cell_semantics_are_merged_and_renormalized() {
        // Two points in one 0.5 m cell ([-0.5, 0) in x), one seen as class 1
        // and one as class 2 via a mask split at pixel column 30.
        let cfg = test_cfg(3);
        let mut view = identity_view(64, 48);
        for y in 0..48 {
            for x in 0..64 {
                view.sem_mask[y * 64 + x] = if x < 30 { 1 } else { 2 };
            }
        }
        let frame = frame_with_points(
            vec![Vector3::new(-0.45, 0.0, 5.0), Vector3::new(-0.05, 0.0, 5.0)],
            vec![view],
        );
        let gs = instantiate_gaussians(&frame, &cfg);
        assert_eq!(gs.len(), 1);
        assert_relative_eq!(gs[0].sem[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(gs[0].sem[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(gs[0].sem[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_cloud_yields_empty_list() {
        let cfg = test_cfg(3);
        let frame = frame_with_points(Vec::new(), vec![identity_view(64, 48)]);
        assert!(instantiate_gaussians(&frame, &cfg).is_empty());
    }

    #[test]
    fn instantiation_is_idempotent_on_centroids() {
        let cfg = test_cfg(2);
        let mut pts = Vec::new();
        for i in 0..40 {
            let base = Vector3::new((i % 7) as f64 * 0.61, (i % 5) as f64 * 0.83, 0.0);
            pts.push(base + Vector3::new(0.01 * (i as f64 % 3.0), 0.0, 5.0));
        }
        let frame = frame_with_points(pts, vec![identity_view(64, 48)]);
        let first = instantiate_gaussians(&frame, &cfg);
        let frame2 = frame_with_points(
            first.iter().map(|g| g.mu).collect(),
            frame.views.clone(),
        );
        let second = instantiate_gaussians(&frame2, &cfg);
        assert_eq!(first.len(), second.len());
        for (a, b) in first.iter().zip(&second) {
            assert_relative_eq!(a.mu, b.mu, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_count_bounded_by_points_and_sems_normalized() {
        let cfg = test_cfg(4);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|i| Vector3::new((i as f64 * 0.37) % 8.0 - 4.0, (i as f64 * 0.71) % 6.0, 4.0))
            .collect();
        let n_points = pts.len();
        let frame = frame_with_points(pts, vec![identity_view(64, 48)]);
        let gs = instantiate_gaussians(&frame, &cfg);
        assert!(!gs.is_empty() && gs.len() <= n_points);
        for g in &gs {
            assert_relative_eq!(g.sem.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }
}
