//! Domain types, coordinate conventions, and configuration shared by every
//! stage.
//!
//! Conventions:
//! - World frame: right-handed, z up, meters. All Gaussians live here.
//! - Camera frame: OpenCV-style, +z forward, +x right, +y down.
//! - Voxel binning: half-open cells `[min + i*delta, min + (i+1)*delta)`.
//! - Grid storage: x-major, then y, then z (`z` varies fastest).

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Logistic squashing, used for both opacity and scale activation.
#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`logistic`]; `p` must be in (0,1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One time-stamped anisotropic 3D blob carrying geometry, appearance, and a
/// semantic distribution over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    /// Center position, meters, world frame.
    pub mu: Vector3<f64>,
    /// Unconstrained scale pre-activation; activated per-axis scale is
    /// `2*delta*logistic(scale_raw)`, so `scale_raw = 0` yields `delta`.
    pub scale_raw: Vector3<f64>,
    /// Orientation quaternion `[w, x, y, z]`, unit norm after every update.
    pub quat: Vector4<f64>,
    /// Opacity pre-activation; activated opacity is `logistic(opacity_raw)`.
    pub opacity_raw: f64,
    /// RGB in [0,1].
    pub color: Vector3<f64>,
    /// Nonnegative class weights summing to 1 (length C).
    pub sem: Vec<f64>,
    /// Frame index of instantiation (or propagation target).
    pub t: usize,
}

impl Gaussian {
    /// Fresh Gaussian with identity orientation, activated scale `delta`
    /// (`scale_raw = 0`) and activated opacity `alpha`.
    pub fn new(mu: Vector3<f64>, alpha: f64, color: Vector3<f64>, sem: Vec<f64>, t: usize) -> Self {
        Gaussian {
            mu,
            scale_raw: Vector3::zeros(),
            quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_raw: logit(alpha),
            color,
            sem,
            t,
        }
    }

    /// Activated per-axis scale in (0, 2*delta).
    pub fn scale(&self, delta: f64) -> Vector3<f64> {
        self.scale_raw.map(|r| 2.0 * delta * logistic(r))
    }

    /// Activated opacity in (0,1).
    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_raw)
    }

    /// Rotation matrix of the (normalized) orientation quaternion.
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_quat(&self.quat)
    }

    /// Sets `scale_raw` so the activated scale equals `s` (componentwise,
    /// each in (0, 2*delta)).
    pub fn set_scale(&mut self, delta: f64, s: Vector3<f64>) {
        self.scale_raw = s.map(|v| logit(v / (2.0 * delta)));
    }
}

/// Rotation matrix of `q/|q|` for `q = [w, x, y, z]`.
pub fn rotation_from_quat(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Covariance `R(q) diag(s^2) R(q)^T` with the activated scale.
pub fn covariance(g: &Gaussian, delta: f64) -> Matrix3<f64> {
    let r = g.rotation();
    let s = g.scale(delta);
    let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    let sigma = r * d * r.transpose();
    // Symmetrize away last-bit asymmetry from the matrix products.
    0.5 * (sigma + sigma.transpose())
}

/// One camera of a frame: calibration, image, semantic mask, and the sparse
/// LiDAR depth targets projected into it.
#[derive(Debug, Clone)]
pub struct CameraView {
    /// 3x3 intrinsics, pixels.
    pub intrinsics: Matrix3<f64>,
    /// 3x4 world-to-camera extrinsics `[R | t]`.
    pub extrinsics: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
    /// RGB in [0,1], row-major, `3 * (y * width + x)` indexing.
    pub image: Vec<f64>,
    /// Class-id map, 0 = unlabeled sentinel, row-major.
    pub sem_mask: Vec<u16>,
    /// Optional sky mask, true = sky, row-major.
    pub sky_mask: Option<Vec<bool>>,
    /// Sparse depth supervision: sub-pixel position and camera-frame depth.
    pub depth_target: Vec<DepthTarget>,
}

/// A projected LiDAR point: continuous pixel coordinates plus camera-frame
/// depth in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthTarget {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraView {
    /// Rotation block of the extrinsics.
    pub fn rot(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Translation column of the extrinsics.
    pub fn trans(&self) -> Vector3<f64> {
        self.extrinsics.column(3).into_owned()
    }

    /// World point into the camera frame.
    pub fn world_to_cam(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot() * x + self.trans()
    }

    /// Perspective projection of a camera-frame point to continuous pixel
    /// coordinates. Caller guarantees positive depth.
    pub fn cam_to_pixel(&self, xc: &Vector3<f64>) -> (f64, f64) {
        let p = self.intrinsics * xc;
        (p.x / p.z, p.y / p.z)
    }

    /// Inverse of project: pixel plus camera depth back to a world point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let kinv = self
            .intrinsics
            .try_inverse()
            .expect("intrinsics invertible");
        let ray = kinv * Vector3::new(u, v, 1.0);
        let xc = ray * (depth / ray.z);
        self.rot().transpose() * (xc - self.trans())
    }

    /// True when the mask marks the pixel containing (u, v) as sky.
    pub fn is_sky(&self, u: f64, v: f64) -> bool {
        match &self.sky_mask {
            Some(sky) => {
                let (xi, yi) = (u.floor() as i64, v.floor() as i64);
                if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    return false;
                }
                sky[yi as usize * self.width + xi as usize]
            }
            None => false,
        }
    }
}

/// One time step of raw sensor input.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub t: usize,
    /// LiDAR positions, world frame (converted from sensor frame at ingestion).
    pub points: Vec<Vector3<f64>>,
    /// Sensor-to-world rigid transform of the ego rig.
    pub ego_pose: nalgebra::Matrix4<f64>,
    pub views: Vec<CameraView>,
}

impl FrameBundle {
    /// Ego translation (sensor origin in world coordinates).
    pub fn ego_position(&self) -> Vector3<f64> {
        self.ego_pose.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Output grid geometry: closed world-frame ranges, voxel edge, class count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Voxel edge length, meters.
    pub delta: f64,
    /// Number of semantic classes C; labels are 0 (empty) ..= C.
    pub num_classes: usize,
}

impl GridSpec {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        delta: f64,
        num_classes: usize,
    ) -> Self {
        GridSpec {
            x_range,
            y_range,
            z_range,
            delta,
            num_classes,
        }
    }

    /// Grid dimensions: extent/delta rounded to the nearest integer, at least 1.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = |r: (f64, f64)| (((r.1 - r.0) / self.delta).round() as i64).max(1) as usize;
        (d(self.x_range), d(self.y_range), d(self.z_range))
    }

    pub fn voxel_count(&self) -> usize {
        let (dx, dy, dz) = self.dims();
        dx * dy * dz
    }

    /// Flat index of an in-range cell (x-major, z fastest).
    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let (_, dy, dz) = self.dims();
        (ix * dy + iy) * dz + iz
    }

    /// World position of the center of cell (ix, iy, iz).
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::new(
            self.x_range.0 + (ix as f64 + 0.5) * self.delta,
            self.y_range.0 + (iy as f64 + 0.5) * self.delta,
            self.z_range.0 + (iz as f64 + 0.5) * self.delta,
        )
    }

    /// Same spec with a different voxel edge (test-time resolution override).
    pub fn with_delta(&self, delta: f64) -> Self {
        GridSpec { delta, ..*self }
    }
}

/// Integer cell containing `x` under half-open binning, or `None` when `x`
/// lies outside the ranges.
pub fn world_to_grid(spec: &GridSpec, x: &Vector3<f64>) -> Option<(usize, usize, usize)> {
    let (dx, dy, dz) = spec.dims();
    let bin = |v: f64, min: f64, dim: usize| -> Option<usize> {
        let i = ((v - min) / spec.delta).floor();
        if i < 0.0 || i as usize >= dim {
            None
        } else {
            Some(i as usize)
        }
    };
    Some((
        bin(x.x, spec.x_range.0, dx)?,
        bin(x.y, spec.y_range.0, dy)?,
        bin(x.z, spec.z_range.0, dz)?,
    ))
}

/// Cell key on the unbounded lattice anchored at the grid minimum. Used for
/// initialization pruning and the static queue, where points outside the
/// output ranges still matter.
pub fn lattice_key(spec: &GridSpec, x: &Vector3<f64>) -> (i64, i64, i64) {
    (
        ((x.x - spec.x_range.0) / spec.delta).floor() as i64,
        ((x.y - spec.y_range.0) / spec.delta).floor() as i64,
        ((x.z - spec.z_range.0) / spec.delta).floor() as i64,
    )
}

/// Dense labeled grid over a [`GridSpec`]; label 0 = empty.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    /// Class ids in 0..=C, x-major then y then z.
    pub labels: Vec<u8>,
    /// Optional per-voxel class distributions, `C` entries per voxel, same
    /// voxel order as `labels`; all-zero rows for empty voxels.
    pub probs: Option<Vec<f64>>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        VoxelGrid {
            labels: vec![0; spec.voxel_count()],
            probs: None,
            spec,
        }
    }

    pub fn label_at(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.spec.flat(ix, iy, iz)]
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Shared pipeline configuration. Defaults hold for every knob the source
/// method leaves open; all of them are plain config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Depth-consistency loss weight (lambda).
    pub lambda_depth: f64,
    /// Flow-magnitude threshold separating static from dynamic, m/frame.
    pub tau_static: f64,
    /// Neighbor count for semantic smoothing.
    pub knn: usize,
    /// Spatial kernel bandwidth, shared by smoothing and voxelization.
    pub sigma_mu: f64,
    /// Radiometric kernel bandwidth (colors in [0,1]).
    pub sigma_c: f64,
    /// Semantic kernel bandwidth (KL divergence in nats).
    pub sigma_s: f64,
    /// Optimization iterations per frame.
    pub iters: usize,
    /// Smoothing period in iterations (0 disables smoothing).
    pub smooth_every: usize,
    /// Minimum activated opacity for a Gaussian to be voxelized.
    pub opacity_keep: f64,
    /// Kernel truncation radius in Mahalanobis units.
    pub trunc_mahal: f64,
    /// Minimum total scattered weight for a voxel to be non-empty.
    pub occ_weight_eps: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            lambda_depth: 1.0,
            tau_static: 0.5,
            knn: 10,
            sigma_mu: 1.0,
            sigma_c: 0.2,
            sigma_s: 1.0,
            iters: 50,
            smooth_every: 10,
            opacity_keep: 0.3,
            trunc_mahal: 3.0,
            occ_weight_eps: 1e-3,
        }
    }
}

/// Grid plus parameters: everything a pipeline stage needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub params: PipelineParams,
}

impl PipelineConfig {
    pub fn new(grid: GridSpec) -> Self {
        PipelineConfig {
            grid,
            params: PipelineParams::default(),
        }
    }

    pub fn delta(&self) -> f64 {
        self.grid.delta
    }
}
