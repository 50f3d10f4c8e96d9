//! Occupancy metrics against ground-truth grids and trailing-artifact
//! diagnostics for dynamic objects.

use crate::core::{VoxelGrid};
use crate::{Error, Result};
use nalgebra::Vector3;
use serde_json::json;

/// Per-class intersection-over-union; a class absent from both grids (zero
/// union) is undefined and excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub pred_count: Vec<u64>,
    pub gt_count: Vec<u64>,
}

/// IoU per class over (optionally masked) voxels. Both grids must share a
/// spec; the mask, when present, must cover every voxel.
pub fn iou_per_class(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    mask: Option<&[bool]>,
) -> Result<IouReport> {
    if pred.spec != gt.spec {
        return Err(Error::SpecMismatch(format!(
            "{:?} vs {:?}",
            pred.spec, gt.spec
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.labels.len() {
            return Err(Error::SpecMismatch(format!(
                "mask has {} entries, grid {}",
                m.len(),
                pred.labels.len()
            )));
        }
    }
    let c = pred.spec.num_classes;
    let mut intersection = vec![0u64; c + 1];
    let mut union = vec![0u64; c + 1];
    let mut pred_count = vec![0u64; c + 1];
    let mut gt_count = vec![0u64; c + 1];
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.map_or(false, |m| !m[i]) {
            continue;
        }
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            intersection[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (1..=c)
        .map(|k| {
            if union[k] == 0 {
                None
            } else {
                Some(intersection[k] as f64 / union[k] as f64)
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(IouReport {
        per_class,
        miou,
        intersection,
        union,
        pred_count,
        gt_count,
    })
}

/// Binary-occupancy IoU (any label vs empty), over the optional mask.
pub fn binary_iou(pred: &VoxelGrid, gt: &VoxelGrid, mask: Option<&[bool]>) -> Result<f64> {
    if pred.spec != gt.spec {
        return Err(Error::SpecMismatch(format!(
            "{:?} vs {:?}",
            pred.spec, gt.spec
        )));
    }
    let mut inter = 0u64;
    let mut uni = 0u64;
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.map_or(false, |m| !m[i]) {
            continue;
        }
        let (po, go) = (p != 0, g != 0);
        if po && go {
            inter += 1;
        }
        if po || go {
            uni += 1;
        }
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Metrics as a JSON object: per-class IoU keyed by class name, mIoU, and
/// voxel counts. Class order follows the vocabulary, so serialization is
/// deterministic.
pub fn metrics_json(report: &IouReport, class_names: &[String], frame: usize) -> serde_json::Value {
    let mut iou = serde_json::Map::new();
    let mut counts = serde_json::Map::new();
    for (k, name) in class_names.iter().enumerate() {
        iou.insert(name.clone(), json!(report.per_class[k]));
        counts.insert(
            name.clone(),
            json!({
                "pred": report.pred_count[k + 1],
                "gt": report.gt_count[k + 1],
                "intersection": report.intersection[k + 1],
            }),
        );
    }
    json!({
        "frame": frame,
        "miou": report.miou,
        "iou": iou,
        "counts": counts,
    })
}

/// Axis-aligned box rotated by yaw about its center.
#[derive(Debug, Clone, Copy)]
pub struct OrientedBox {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
    pub yaw: f64,
}

impl OrientedBox {
    fn to_box_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = self.to_box_frame(p);
        q.x.abs() <= self.half.x && q.y.abs() <= self.half.y && q.z.abs() <= self.half.z
    }

    /// Full support length along a (unit) direction.
    pub fn length_along(&self, dir: &Vector3<f64>) -> f64 {
        let (s, c) = self.yaw.sin_cos();
        let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
        2.0 * (self.half.x * d.x.abs() + self.half.y * d.y.abs() + self.half.z * d.z.abs())
    }

    /// True when `p + s * dir` enters the box for some `s` in (0, s_max].
    fn ray_enters_within(&self, p: &Vector3<f64>, dir: &Vector3<f64>, s_max: f64) -> bool {
        let q = self.to_box_frame(p);
        let (s, c) = self.yaw.sin_cos();
        let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
        let mut lo = 0.0f64;
        let mut hi = s_max;
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if q[k].abs() > self.half[k] {
                    return false;
                }
                continue;
            }
            let mut a = (-self.half[k] - q[k]) / d[k];
            let mut b = (self.half[k] - q[k]) / d[k];
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            lo = lo.max(a);
            hi = hi.min(b);
            if lo > hi {
                return false;
            }
        }
        hi > 0.0 && lo <= s_max
    }
}

/// Fraction of predicted voxels of `class_id` that lie outside the
/// ground-truth box but within two box-lengths behind it along the motion
/// direction. No such voxels at all scores 0.
pub fn trailing_score(
    pred: &VoxelGrid,
    gt_box: &OrientedBox,
    motion_dir: &Vector3<f64>,
    class_id: u8,
) -> f64 {
    let dir = motion_dir / motion_dir.norm();
    let tail_len = 2.0 * gt_box.length_along(&dir);
    let (dx, dy, dz) = pred.spec.dims();
    let mut total = 0u64;
    let mut trailing = 0u64;
    for ix in 0..dx {
        for iy in 0..dy {
            for iz in 0..dz {
                if pred.label_at(ix, iy, iz) != class_id {
                    continue;
                }
                total += 1;
                let center = pred.spec.voxel_center(ix, iy, iz);
                if gt_box.contains(&center) {
                    continue;
                }
                // Behind the box: moving the voxel forward along +dir by up
                // to two box lengths must enter the box.
                if gt_box.ray_enters_within(&center, &dir, tail_len) {
                    trailing += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        trailing as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::GridSpec;

    fn spec(c: usize) -> GridSpec {
        GridSpec::new((0.0, 4.0), (0.0, 4.0), (0.0, 2.0), 0.5, c)
    }

    fn grid_with(spec: GridSpec, cells: &[((usize, usize, usize), u8)]) -> VoxelGrid {
        let mut g = VoxelGrid::empty(spec);
        for ((x, y, z), l) in cells {
            let idx = spec.flat(*x, *y, *z);
            g.labels[idx] = *l;
        }
        g
    }

    #[test]
    fn identical_grids_score_one() {
        let s = spec(3);
        let g = grid_with(s, &[((0, 0, 0), 1), ((1, 1, 1), 2), ((3, 2, 0), 2)]);
        let r = iou_per_class(&g, &g, None).unwrap();
        assert_eq!(r.per_class[0], Some(1.0));
        assert_eq!(r.per_class[1], Some(1.0));
        assert_eq!(r.per_class[2], None); // class 3 absent from both
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let s = spec(2);
        let pred = grid_with(s, &[((0, 0, 0), 1)]);
        let gt = grid_with(s, &[((1, 0, 0), 1)]);
        let r = iou_per_class(&pred, &gt, None).unwrap();
        assert_eq!(r.per_class[0], Some(0.0));
    }

    #[test]
    fn partial_overlap_matches_set_arithmetic() {
        // pred 8 voxels, gt 8 voxels, 4 shared: IoU = 4/12.
        let s = spec(1);
        let pred_cells: Vec<((usize, usize, usize), u8)> =
            (0..8).map(|i| ((i % 4, i / 4, 0), 1)).collect();
        let gt_cells: Vec<((usize, usize, usize), u8)> =
            (4..12).map(|i| ((i % 4, i / 4, 0), 1)).collect();
        let pred = grid_with(s, &pred_cells);
        let gt = grid_with(s, &gt_cells);
        let r = iou_per_class(&pred, &gt, None).unwrap();
        let got = r.per_class[0].unwrap();
        assert!((got - 4.0 / 12.0).abs() < 1e-12);
        // IoU is symmetric in pred/gt.
        let r2 = iou_per_class(&gt, &pred, None).unwrap();
        assert_eq!(r.per_class[0], r2.per_class[0]);
    }

    #[test]
    fn mask_restricts_scoring() {
        let s = spec(1);
        let pred = grid_with(s, &[((0, 0, 0), 1), ((1, 0, 0), 1)]);
        let gt = grid_with(s, &[((0, 0, 0), 1)]);
        let mut mask = vec![true; s.voxel_count()];
        mask[s.flat(1, 0, 0)] = false; // hide the false positive
        let r = iou_per_class(&pred, &gt, Some(&mask)).unwrap();
        assert_eq!(r.per_class[0], Some(1.0));
    }

    #[test]
    fn spec_mismatch_is_an_error() {
        let a = VoxelGrid::empty(spec(1));
        let b = VoxelGrid::empty(spec(1).with_delta(0.25));
        assert!(iou_per_class(&a, &b, None).is_err());
        assert!(binary_iou(&a, &b, None).is_err());
    }

    #[test]
    fn miou_bounds() {
        let s = spec(2);
        let pred = grid_with(s, &[((0, 0, 0), 1), ((1, 0, 0), 2)]);
        let gt = grid_with(s, &[((0, 0, 0), 1), ((1, 0, 0), 1)]);
        let r = iou_per_class(&pred, &gt, None).unwrap();
        let m = r.miou.unwrap();
        assert!((0.0..=1.0).contains(&m));
        assert!(m < 1.0);
    }

    fn tail_spec() -> GridSpec {
        GridSpec::new((0.0, 8.0), (0.0, 2.0), (0.0, 1.0), 0.5, 1)
    }

    #[test]
    fn exact_box_fill_scores_zero() {
        // Box covering x in [4,6], y in [0,1], z in [0,0.5].
        let s = tail_spec();
        let gt_box = OrientedBox {
            center: Vector3::new(5.0, 0.5, 0.25),
            half: Vector3::new(1.0, 0.5, 0.25),
            yaw: 0.0,
        };
        let mut cells = Vec::new();
        for ix in 8..12 {
            for iy in 0..2 {
                cells.push(((ix, iy, 0), 1u8));
            }
        }
        let pred = grid_with(s, &cells);
        let score = trailing_score(&pred, &gt_box, &Vector3::new(1.0, 0.0, 0.0), 1);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn equal_volume_tail_scores_half() {
        let s = tail_spec();
        let gt_box = OrientedBox {
            center: Vector3::new(5.0, 0.5, 0.25),
            half: Vector3::new(1.0, 0.5, 0.25),
            yaw: 0.0,
        };
        let mut cells = Vec::new();
        for ix in 8..12 {
            for iy in 0..2 {
                cells.push(((ix, iy, 0), 1u8));
            }
        }
        // Equal-volume tail directly behind (motion is +x, tail at smaller x).
        for ix in 4..8 {
            for iy in 0..2 {
                cells.push(((ix, iy, 0), 1u8));
            }
        }
        let pred = grid_with(s, &cells);
        let score = trailing_score(&pred, &gt_box, &Vector3::new(1.0, 0.0, 0.0), 1);
        assert!((score - 0.5).abs() < 1e-12, "score {score}");
    }

    #[test]
    fn no_dynamic_voxels_scores_zero() {
        let s = tail_spec();
        let pred = VoxelGrid::empty(s);
        let gt_box = OrientedBox {
            center: Vector3::new(5.0, 0.5, 0.25),
            half: Vector3::new(1.0, 0.5, 0.25),
            yaw: 0.0,
        };
        assert_eq!(
            trailing_score(&pred, &gt_box, &Vector3::new(1.0, 0.0, 0.0), 1),
            0.0
        );
    }

    #[test]
    fn far_voxels_beyond_two_lengths_do_not_count() {
        let s = tail_spec();
        let gt_box = OrientedBox {
            center: Vector3::new(6.0, 0.5, 0.25),
            half: Vector3::new(0.5, 0.5, 0.25),
            yaw: 0.0,
        };
        // One voxel 3 box-lengths behind: outside the tail window.
        let pred = grid_with(s, &[((0, 0, 0), 1)]);
        let score = trailing_score(&pred, &gt_box, &Vector3::new(1.0, 0.0, 0.0), 1);
        assert_eq!(score, 0.0);
    }
}
