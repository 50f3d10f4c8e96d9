//! Scale-aware conversion of the combined Gaussian set (current frame plus
//! static queue) to a labeled voxel grid, plus the grid file format.
//!
//! Every Gaussian scatters `sem * exp(-mahalanobis^2 / (2 sigma_mu^2))` onto
//! the voxel centers inside its truncation ellipsoid. A voxel is empty when
//! its total scattered weight stays below `occ_weight_eps`, otherwise it takes
//! the argmax class (ties to the smaller id). The scatter is sequential by
//! construction so grid bytes are bit-reproducible.

use crate::core::{covariance, world_to_grid, Gaussian, GridSpec, PipelineConfig, VoxelGrid};
use crate::flow::StaticQueue;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Deterministic display color for a class id (golden-angle hue walk);
/// id 0 (empty) is black.
pub fn class_color(id: u16) -> nalgebra::Vector3<f64> {
    if id == 0 {
        return nalgebra::Vector3::zeros();
    }
    let hue = ((id as f64) * 0.618_033_988_749_895).fract() * 6.0;
    let sector = hue.floor() as i64 % 6;
    let f = hue.fract();
    let (v, p) = (0.95, 0.25);
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    nalgebra::Vector3::new(r, g, b)
}

/// Union of the current set and the queue. The opacity gate applies to the
/// accumulated static history only: a fresh surface observation is evidence
/// regardless of how optimization split opacity among overlapping Gaussians,
/// while low-opacity history entries are stale ghosts worth dropping.
fn gather(current: &[Gaussian], queue: &StaticQueue, cfg: &PipelineConfig) -> Vec<Gaussian> {
    current
        .iter()
        .cloned()
        .chain(
            queue
                .gaussians()
                .into_iter()
                .filter(|g| g.opacity() >= cfg.params.opacity_keep),
        )
        .collect()
}

/// Calls `emit(flat_voxel_index, weight)` for every voxel center within the
/// Gaussian's truncation ellipsoid.
fn scatter_gaussian<F: FnMut(usize, f64) + ?Sized>(
    g: &Gaussian,
    out_spec: &GridSpec,
    cfg: &PipelineConfig,
    emit: &mut F,
) {
    let sigma = covariance(g, cfg.delta());
    let Some(inv) = sigma.try_inverse() else {
        return;
    };
    let trunc = cfg.params.trunc_mahal;
    let trunc2 = trunc * trunc;
    let two_sig2 = 2.0 * cfg.params.sigma_mu * cfg.params.sigma_mu;
    let (dx, dy, dz) = out_spec.dims();
    let d = out_spec.delta;

    // Axis-aligned bound of the ellipsoid.
    let ext = nalgebra::Vector3::new(
        trunc * sigma[(0, 0)].sqrt(),
        trunc * sigma[(1, 1)].sqrt(),
        trunc * sigma[(2, 2)].sqrt(),
    );
    let lo = |v: f64, min: f64, dim: usize| -> Option<usize> {
        let i = ((v - min) / d - 0.5).ceil() as i64;
        if i >= dim as i64 {
            None
        } else {
            Some(i.max(0) as usize)
        }
    };
    let hi = |v: f64, min: f64, dim: usize| -> Option<usize> {
        let i = ((v - min) / d - 0.5).floor() as i64;
        if i < 0 {
            None
        } else {
            Some((i as usize).min(dim - 1))
        }
    };
    let (Some(x0), Some(x1)) = (
        lo(g.mu.x - ext.x, out_spec.x_range.0, dx),
        hi(g.mu.x + ext.x, out_spec.x_range.0, dx),
    ) else {
        return;
    };
    let (Some(y0), Some(y1)) = (
        lo(g.mu.y - ext.y, out_spec.y_range.0, dy),
        hi(g.mu.y + ext.y, out_spec.y_range.0, dy),
    ) else {
        return;
    };
    let (Some(z0), Some(z1)) = (
        lo(g.mu.z - ext.z, out_spec.z_range.0, dz),
        hi(g.mu.z + ext.z, out_spec.z_range.0, dz),
    ) else {
        return;
    };
    if x0 > x1 || y0 > y1 || z0 > z1 {
        return;
    }

    let (a00, a01, a02) = (inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]);
    let (a11, a12, a22) = (inv[(1, 1)], inv[(1, 2)], inv[(2, 2)]);
    for ix in x0..=x1 {
        let vx = out_spec.x_range.0 + (ix as f64 + 0.5) * d - g.mu.x;
        for iy in y0..=y1 {
            let vy = out_spec.y_range.0 + (iy as f64 + 0.5) * d - g.mu.y;
            let base = (ix * dy + iy) * dz;
            for iz in z0..=z1 {
                let vz = out_spec.z_range.0 + (iz as f64 + 0.5) * d - g.mu.z;
                let m2 = a00 * vx * vx
                    + a11 * vy * vy
                    + a22 * vz * vz
                    + 2.0 * (a01 * vx * vy + a02 * vx * vz + a12 * vy * vz);
                if m2 <= trunc2 {
                    emit(base + iz, (-m2 / two_sig2).exp());
                }
            }
        }
    }
}

/// Scale-aware voxelization of `current` plus the static queue onto
/// `out_spec` (which may use any resolution; scale activation keeps using the
/// working grid's delta).
pub fn voxelize(
    current: &[Gaussian],
    queue: &StaticQueue,
    out_spec: &GridSpec,
    cfg: &PipelineConfig,
) -> VoxelGrid {
    voxelize_full(current, queue, out_spec, cfg, true, false)
}

/// Ablation fallback: each Gaussian contributes unit weight to the single
/// voxel containing its center.
pub fn voxelize_centers(
    current: &[Gaussian],
    queue: &StaticQueue,
    out_spec: &GridSpec,
    cfg: &PipelineConfig,
) -> VoxelGrid {
    voxelize_full(current, queue, out_spec, cfg, false, false)
}

pub fn voxelize_full(
    current: &[Gaussian],
    queue: &StaticQueue,
    out_spec: &GridSpec,
    cfg: &PipelineConfig,
    scale_aware: bool,
    with_probs: bool,
) -> VoxelGrid {
    let set = gather(current, queue, cfg);
    let nvox = out_spec.voxel_count();
    let c = out_spec.num_classes;
    let eps = cfg.params.occ_weight_eps;

    let mut wsum = vec![0.0f64; nvox];
    // Dense class accumulation when it fits comfortably in memory, otherwise
    // a two-pass scheme over only the occupied voxels.
    let dense_ok = nvox
        .checked_mul(c)
        .map(|n| n <= 200_000_000)
        .unwrap_or(false);

    let mut labels = vec![0u8; nvox];
    let mut probs = if with_probs { Some(vec![0.0; nvox * c]) } else { None };

    let visit = |g: &Gaussian, emit: &mut dyn FnMut(usize, f64)| {
        if scale_aware {
            scatter_gaussian(g, out_spec, cfg, emit);
        } else if let Some((ix, iy, iz)) = world_to_grid(out_spec, &g.mu) {
            emit(out_spec.flat(ix, iy, iz), 1.0);
        }
    };

    if dense_ok {
        let mut acc = vec![0.0f64; nvox * c];
        for g in &set {
            let sem = &g.sem;
            visit(g, &mut |idx, w| {
                wsum[idx] += w;
                let row = &mut acc[idx * c..idx * c + sem.len().min(c)];
                for (a, m) in row.iter_mut().zip(sem) {
                    *a += w * m;
                }
            });
        }
        finalize_labels(&wsum, &acc, c, eps, &mut labels, probs.as_deref_mut());
    } else {
        for g in &set {
            visit(g, &mut |idx, w| {
                wsum[idx] += w;
            });
        }
        // Compact occupied voxels, then accumulate classes only for them.
        let mut compact = vec![u32::MAX; nvox];
        let mut occupied = 0usize;
        for (i, &w) in wsum.iter().enumerate() {
            if w >= eps {
                compact[i] = occupied as u32;
                occupied += 1;
            }
        }
        let mut acc = vec![0.0f64; occupied * c];
        for g in &set {
            let sem = &g.sem;
            visit(g, &mut |idx, w| {
                let slot = compact[idx];
                if slot != u32::MAX {
                    let row = &mut acc[slot as usize * c..slot as usize * c + sem.len().min(c)];
                    for (a, m) in row.iter_mut().zip(sem) {
                        *a += w * m;
                    }
                }
            });
        }
        for (i, &w) in wsum.iter().enumerate() {
            if w < eps {
                continue;
            }
            let row = &acc[compact[i] as usize * c..(compact[i] as usize + 1) * c];
            labels[i] = argmax_label(row);
            if let Some(p) = probs.as_deref_mut() {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    for (dst, v) in p[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *dst = v / total;
                    }
                }
            }
        }
    }

    VoxelGrid {
        spec: *out_spec,
        labels,
        probs,
    }
}

fn finalize_labels(
    wsum: &[f64],
    acc: &[f64],
    c: usize,
    eps: f64,
    labels: &mut [u8],
    mut probs: Option<&mut [f64]>,
) {
    for (i, &w) in wsum.iter().enumerate() {
        if w < eps {
            continue;
        }
        let row = &acc[i * c..(i + 1) * c];
        labels[i] = argmax_label(row);
        if let Some(p) = probs.as_deref_mut() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for (dst, v) in p[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *dst = v / total;
                }
            }
        }
    }
}

/// 1-based argmax with ties to the smaller class id.
fn argmax_label(row: &[f64]) -> u8 {
    let mut best = 0usize;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    (best + 1) as u8
}

/// Voxels whose labels differ, counted per class of `a` (index 0 = voxels
/// empty in `a` that changed).
pub fn grid_diff(a: &VoxelGrid, b: &VoxelGrid) -> Result<Vec<u64>> {
    if a.spec != b.spec {
        return Err(Error::SpecMismatch(format!(
            "{:?} vs {:?}",
            a.spec, b.spec
        )));
    }
    let mut counts = vec![0u64; a.spec.num_classes + 1];
    for (la, lb) in a.labels.iter().zip(&b.labels) {
        if la != lb {
            counts[*la as usize] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    delta: f64,
    dims: (usize, usize, usize),
    classes: Vec<String>,
    frame: usize,
}

/// Writes a grid as one JSON header line followed by the raw labels
/// (x-major, then y, then z).
pub fn write_grid(path: &Path, grid: &VoxelGrid, classes: &[String], frame: usize) -> Result<()> {
    let header = GridHeader {
        x_range: grid.spec.x_range,
        y_range: grid.spec.y_range,
        z_range: grid.spec.z_range,
        delta: grid.spec.delta,
        dims: grid.spec.dims(),
        classes: classes.to_vec(),
        frame,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    out.push(b'\n');
    out.extend_from_slice(&grid.labels);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a grid file back; returns the grid, its class names, and frame index.
pub fn read_grid(path: &Path) -> Result<(VoxelGrid, Vec<String>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header: GridHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::json(path, e))?;
    let spec = GridSpec::new(
        header.x_range,
        header.y_range,
        header.z_range,
        header.delta,
        header.classes.len(),
    );
    let expected = spec.voxel_count();
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload {} bytes, dims want {}",
            path.display(),
            payload.len(),
            expected
        )));
    }
    if spec.dims() != header.dims {
        return Err(Error::Format(format!(
            "{}: header dims {:?} inconsistent with ranges",
            path.display(),
            header.dims
        )));
    }
    Ok((
        VoxelGrid {
            spec,
            labels: payload.to_vec(),
            probs: None,
        },
        header.classes,
        header.frame,
    ))
}

/// Boolean mask file sharing the grid header; nonzero payload bytes are true.
pub fn write_mask(path: &Path, spec: &GridSpec, mask: &[bool], frame: usize) -> Result<()> {
    let grid = VoxelGrid {
        spec: *spec,
        labels: mask.iter().map(|&b| b as u8).collect(),
        probs: None,
    };
    let classes: Vec<String> = vec!["visible".into()];
    write_grid(path, &grid, &classes, frame)
}

pub fn read_mask(path: &Path) -> Result<(GridSpec, Vec<bool>)> {
    let (grid, _, _) = read_grid(path)?;
    Ok((grid.spec, grid.labels.iter().map(|&b| b != 0).collect()))
}

/// ASCII point cloud of Gaussian centers colored by argmax class.
pub fn write_ply(path: &Path, gaussians: &[Gaussian]) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", gaussians.len()));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for g in gaussians {
        let class = g
            .sem
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| (i + 1) as u16)
            .unwrap_or(0);
        let c = class_color(class);
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            g.mu.x,
            g.mu.y,
            g.mu.z,
            (c.x * 255.0) as u8,
            (c.y * 255.0) as u8,
            (c.z * 255.0) as u8
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn cfg(delta: f64, c: usize) -> PipelineConfig {
        PipelineConfig::new(GridSpec::new(
            (-2.0, 2.0),
            (-2.0, 2.0),
            (-2.0, 2.0),
            delta,
            c,
        ))
    }

    fn one_hot(c: usize, id: usize) -> Vec<f64> {
        let mut v = vec![0.0; c];
        v[id - 1] = 1.0;
        v
    }

    fn g_at(mu: Vector3<f64>, sem: Vec<f64>, alpha: f64) -> Gaussian {
        Gaussian::new(mu, alpha, Vector3::new(0.5, 0.5, 0.5), sem, 0)
    }

    #[test]
    fn empty_set_all_empty() {
        let cfg = cfg(0.5, 3);
        let q = StaticQueue::new(&cfg.grid);
        let grid = voxelize(&[], &q, &cfg.grid, &cfg);
        assert_eq!(grid.occupied_count(), 0);
    }

    #[test]
    fn centered_gaussian_labels_its_voxel() {
        let cfg = cfg(0.5, 3);
        let q = StaticQueue::new(&cfg.grid);
        // Voxel centers sit at -1.75 + 0.5k; (0,0,0) is not a center, but
        // (0.25, 0.25, 0.25) is.
        let mu = Vector3::new(0.25, 0.25, 0.25);
        let grid = voxelize(&[g_at(mu, one_hot(3, 3), 0.6)], &q, &cfg.grid, &cfg);
        let (ix, iy, iz) = world_to_grid(&cfg.grid, &mu).unwrap();
        assert_eq!(grid.label_at(ix, iy, iz), 3);
    }

    #[test]
    fn opacity_gate_drops_stale_queue_entries_only() {
        let cfg = cfg(0.5, 3);
        let mut q = StaticQueue::new(&cfg.grid);
        let mu = Vector3::new(0.25, 0.25, 0.25);
        q.insert(g_at(mu, one_hot(3, 3), 0.1));
        let grid = voxelize(&[], &q, &cfg.grid, &cfg);
        assert_eq!(grid.occupied_count(), 0, "low-opacity history is dropped");
        // The same Gaussian as a current-frame observation still counts.
        let grid = voxelize(&[g_at(mu, one_hot(3, 3), 0.1)], &q, &cfg.grid, &cfg);
        let (ix, iy, iz) = world_to_grid(&cfg.grid, &mu).unwrap();
        assert_eq!(grid.label_at(ix, iy, iz), 3);
    }

    #[test]
    fn equidistant_tie_takes_smaller_class() {
        let cfg = cfg(0.5, 4);
        let q = StaticQueue::new(&cfg.grid);
        let target = Vector3::new(0.25, 0.25, 0.25);
        let a = g_at(target + Vector3::new(0.4, 0.0, 0.0), one_hot(4, 3), 0.6);
        let b = g_at(target - Vector3::new(0.4, 0.0, 0.0), one_hot(4, 2), 0.6);
        let grid = voxelize(&[a, b], &q, &cfg.grid, &cfg);
        let (ix, iy, iz) = world_to_grid(&cfg.grid, &target).unwrap();
        assert_eq!(grid.label_at(ix, iy, iz), 2);
    }

    #[test]
    fn scatter_respects_truncation() {
        let mut cfg = cfg(0.25, 2);
        cfg.params.occ_weight_eps = 1e-12; // label everything the kernel touches
        let q = StaticQueue::new(&cfg.grid);
        let mu = Vector3::new(0.125, 0.125, 0.125);
        let grid = voxelize(&[g_at(mu, one_hot(2, 1), 0.6)], &q, &cfg.grid, &cfg);
        // Activated scale is delta = 0.25, truncation 3 Mahalanobis = 0.75 m.
        let reach = 3.0 * 0.25;
        let (dx, dy, dz) = cfg.grid.dims();
        for ix in 0..dx {
            for iy in 0..dy {
                for iz in 0..dz {
                    let c = cfg.grid.voxel_center(ix, iy, iz);
                    let occupied = grid.label_at(ix, iy, iz) != 0;
                    let dist = (c - mu).norm();
                    if occupied {
                        assert!(dist <= reach + 1e-9, "occupied at {dist}");
                    } else {
                        assert!(dist >= reach - cfg.grid.delta, "empty inside at {dist}");
                    }
                }
            }
        }
    }

    #[test]
    fn adding_a_gaussian_never_empties_voxels() {
        let cfg = cfg(0.5, 2);
        let q = StaticQueue::new(&cfg.grid);
        let a = g_at(Vector3::new(0.25, 0.25, 0.25), one_hot(2, 1), 0.6);
        let b = g_at(Vector3::new(-0.75, 0.25, 0.25), one_hot(2, 2), 0.6);
        let g1 = voxelize(&[a.clone()], &q, &cfg.grid, &cfg);
        let g2 = voxelize(&[a, b], &q, &cfg.grid, &cfg);
        for (l1, l2) in g1.labels.iter().zip(&g2.labels) {
            if *l1 != 0 {
                assert_ne!(*l2, 0);
            }
        }
    }

    #[test]
    fn probs_normalized_where_occupied() {
        let cfg = cfg(0.5, 3);
        let q = StaticQueue::new(&cfg.grid);
        let a = g_at(Vector3::new(0.25, 0.25, 0.25), vec![0.7, 0.3, 0.0], 0.6);
        let b = g_at(Vector3::new(0.5, 0.25, 0.25), vec![0.1, 0.2, 0.7], 0.6);
        let grid = voxelize_full(&[a, b], &q, &cfg.grid, &cfg, true, true);
        let probs = grid.probs.as_ref().unwrap();
        let c = grid.spec.num_classes;
        for (i, &l) in grid.labels.iter().enumerate() {
            let s: f64 = probs[i * c..(i + 1) * c].iter().sum();
            if l != 0 {
                assert!((s - 1.0).abs() < 1e-9);
                assert!(probs[i * c..(i + 1) * c].iter().all(|&p| p >= 0.0));
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn finer_grid_contains_coarse_occupancy() {
        // One isolated Gaussian well inside truncation: every occupied
        // delta-voxel holds an occupied half-delta subvoxel of the same class.
        let cfg = cfg(0.4, 2);
        let q = StaticQueue::new(&cfg.grid);
        let mu = Vector3::new(0.2, 0.2, 0.2); // a coarse voxel center
        let set = vec![g_at(mu, one_hot(2, 2), 0.7)];
        let coarse = voxelize(&set, &q, &cfg.grid, &cfg);
        let fine_spec = cfg.grid.with_delta(0.2);
        let fine = voxelize(&set, &q, &fine_spec, &cfg);
        let (dx, dy, dz) = cfg.grid.dims();
        let mut checked = 0;
        for ix in 0..dx {
            for iy in 0..dy {
                for iz in 0..dz {
                    let label = coarse.label_at(ix, iy, iz);
                    if label == 0 {
                        continue;
                    }
                    // Comfortably occupied only (well inside truncation).
                    let c = cfg.grid.voxel_center(ix, iy, iz);
                    if (c - mu).norm() > 2.0 * 0.4 {
                        continue;
                    }
                    let found = (0..2).any(|ox| {
                        (0..2).any(|oy| {
                            (0..2).any(|oz| {
                                fine.label_at(2 * ix + ox, 2 * iy + oy, 2 * iz + oz) == label
                            })
                        })
                    });
                    assert!(found, "coarse voxel ({ix},{iy},{iz}) lost its class");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn center_scatter_marks_exactly_center_cells() {
        let cfg = cfg(0.5, 2);
        let q = StaticQueue::new(&cfg.grid);
        let a = g_at(Vector3::new(0.25, 0.25, 0.25), one_hot(2, 1), 0.6);
        let grid = voxelize_centers(&[a], &q, &cfg.grid, &cfg);
        assert_eq!(grid.occupied_count(), 1);
    }

    #[test]
    fn diff_counts_changed_voxels_per_class() {
        let cfg = cfg(0.5, 3);
        let mut a = VoxelGrid::empty(cfg.grid);
        let b = a.clone();
        assert_eq!(grid_diff(&a, &b).unwrap(), vec![0, 0, 0, 0]);
        a.labels[7] = 2;
        let mut b2 = a.clone();
        b2.labels[7] = 3;
        assert_eq!(grid_diff(&a, &b2).unwrap(), vec![0, 0, 1, 0]);
        let other = VoxelGrid::empty(cfg.grid.with_delta(0.25));
        assert!(grid_diff(&a, &other).is_err());
    }

    #[test]
    fn grid_file_round_trip() {
        let cfg = cfg(0.5, 2);
        let q = StaticQueue::new(&cfg.grid);
        let a = g_at(Vector3::new(0.25, 0.25, 0.25), one_hot(2, 1), 0.6);
        let grid = voxelize(&[a], &q, &cfg.grid, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("occ_0003.bin");
        let classes = vec!["ground".to_string(), "box".to_string()];
        write_grid(&path, &grid, &classes, 3).unwrap();
        let (back, names, frame) = read_grid(&path).unwrap();
        assert_eq!(back.labels, grid.labels);
        assert_eq!(back.spec, grid.spec);
        assert_eq!(names, classes);
        assert_eq!(frame, 3);
    }

    #[test]
    fn mask_round_trip() {
        let spec = GridSpec::new((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.5, 1);
        let mask: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask_0000.bin");
        write_mask(&path, &spec, &mask, 0).unwrap();
        let (spec2, back) = read_mask(&path).unwrap();
        assert_eq!(spec2.dims(), spec.dims());
        assert_eq!(back, mask);
    }
}
