//! Deterministic synthetic scenes with exact ground truth: analytic ray-cast
//! LiDAR, flat-colored camera renders, per-point flow, occupancy grids, and
//! camera-visibility masks. Everything a desk-scale verification run needs,
//! without any dataset.
//!
//! Scenes are a finite ground rectangle plus rigid boxes on linear
//! trajectories, observed by a static ego rig. The exporter writes frames in
//! the exact ingest directory layout, which makes the CLI end-to-end testable
//! offline.

use crate::core::{
    CameraView, FrameBundle, GridSpec, VoxelGrid,
};
use crate::eval::OrientedBox;
use crate::ingest::{self, project_points_to_view, ClassVocabulary};
use crate::voxelize::{class_color, write_grid, write_mask};
use crate::{Error, Result};
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct GroundSpec {
    /// (x0, x1, y0, y1) extent of the plane rectangle.
    pub extent: (f64, f64, f64, f64),
    /// Surface height.
    pub z: f64,
    pub class: u16,
}

#[derive(Debug, Clone)]
pub struct BoxSpec {
    pub size: Vector3<f64>,
    /// Center at frame 0.
    pub center0: Vector3<f64>,
    /// Rigid displacement per frame.
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub class: u16,
}

impl BoxSpec {
    pub fn pose_at(&self, t: usize) -> OrientedBox {
        OrientedBox {
            center: self.center0 + self.velocity * t as f64,
            half: self.size / 2.0,
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CameraSpec {
    pub position: Vector3<f64>,
    /// Heading about +z; 0 looks along +x.
    pub yaw_deg: f64,
    /// Downward tilt, degrees.
    pub pitch_deg: f64,
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone)]
pub struct LidarSpec {
    pub channels: usize,
    pub elevation_deg: (f64, f64),
    pub azimuth_deg: (f64, f64),
    pub azimuth_steps: usize,
    pub max_range: f64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub grid: GridSpec,
    pub ground: GroundSpec,
    pub boxes: Vec<BoxSpec>,
    pub cameras: Vec<CameraSpec>,
    pub lidar: LidarSpec,
    /// Sensor origin (static rig, identity orientation).
    pub ego: Vector3<f64>,
    /// Probability of flipping a mask pixel to a random other class.
    pub label_noise: Option<f64>,
    /// Isotropic jitter applied to LiDAR points, meters.
    pub point_noise: Option<f64>,
    pub class_names: Vec<String>,
}

/// One generated frame with its exact ground truth.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub bundle: FrameBundle,
    pub gt_grid: VoxelGrid,
    /// Per-LiDAR-point rigid motion from frame t to t+1 (zero at the last
    /// frame and on static surfaces).
    pub gt_flow: Vec<Vector3<f64>>,
    /// True surface class of each LiDAR point.
    pub point_class: Vec<u16>,
    /// Per-voxel camera visibility (in some frustum and not occluded).
    pub visibility: Vec<bool>,
    /// Box poses at this frame, for trailing diagnostics.
    pub box_poses: Vec<OrientedBox>,
}

struct Hit {
    dist: f64,
    class: u16,
    box_index: Option<usize>,
}

fn ray_ground(origin: &Vector3<f64>, dir: &Vector3<f64>, g: &GroundSpec) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (g.z - origin.z) / dir.z;
    if t <= 1e-9 {
        return None;
    }
    let p = origin + dir * t;
    let (x0, x1, y0, y1) = g.extent;
    (p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1).then_some(t)
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &OrientedBox) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rot = |v: &Vector3<f64>| Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
    let o = rot(&(origin - b.center));
    let d = rot(dir);
    let mut lo = 1e-9f64;
    let mut hi = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > b.half[k] {
                return None;
            }
            continue;
        }
        let mut a = (-b.half[k] - o[k]) / d[k];
        let mut bt = (b.half[k] - o[k]) / d[k];
        if a > bt {
            std::mem::swap(&mut a, &mut bt);
        }
        lo = lo.max(a);
        hi = hi.min(bt);
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

fn ray_cast(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    spec: &SceneSpec,
    boxes: &[OrientedBox],
    max_range: f64,
) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if let Some(t) = ray_ground(origin, dir, &spec.ground) {
        if t <= max_range {
            best = Some(Hit {
                dist: t,
                class: spec.ground.class,
                box_index: None,
            });
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, b) {
            if t <= max_range && best.as_ref().map_or(true, |h| t < h.dist) {
                best = Some(Hit {
                    dist: t,
                    class: spec.boxes[i].class,
                    box_index: Some(i),
                });
            }
        }
    }
    best
}

fn camera_matrices(cam: &CameraSpec) -> (Matrix3<f64>, Matrix3x4<f64>) {
    let f = (cam.width as f64 / 2.0) / (cam.hfov_deg.to_radians() / 2.0).tan();
    let k = Matrix3::new(
        f,
        0.0,
        cam.width as f64 / 2.0,
        0.0,
        f,
        cam.height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    // Forward direction from yaw (about +z) and pitch (downward).
    let yaw = cam.yaw_deg.to_radians();
    let pitch = cam.pitch_deg.to_radians();
    let fwd = Vector3::new(
        yaw.cos() * pitch.cos(),
        yaw.sin() * pitch.cos(),
        -pitch.sin(),
    );
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right = fwd.cross(&up).normalize();
    let down = fwd.cross(&right).normalize() * -1.0;
    // Rows of the world-to-camera rotation: +x right, +y down, +z forward.
    let mut e = Matrix3x4::zeros();
    for c in 0..3 {
        e[(0, c)] = right[c];
        e[(1, c)] = down[c];
        e[(2, c)] = fwd[c];
    }
    let rot = e.fixed_view::<3, 3>(0, 0).into_owned();
    let t = -rot * cam.position;
    for r in 0..3 {
        e[(r, 3)] = t[r];
    }
    (k, e)
}

/// Renders one camera at frame t: flat class colors, class-id mask (with
/// optional seeded label noise), sky mask, and analytic depth per pixel.
fn render_camera(
    cam: &CameraSpec,
    spec: &SceneSpec,
    boxes: &[OrientedBox],
    t: usize,
    cam_index: usize,
) -> CameraView {
    let (k, e) = camera_matrices(cam);
    let rot = e.fixed_view::<3, 3>(0, 0).into_owned();
    let kinv = k.try_inverse().expect("pinhole K invertible");
    let (w, h) = (cam.width, cam.height);
    let mut image = vec![0.0f64; w * h * 3];
    let mut mask = vec![0u16; w * h];
    let mut sky = vec![false; w * h];
    let sky_color = Vector3::new(0.72, 0.84, 0.95);

    for yi in 0..h {
        for xi in 0..w {
            let pix = yi * w + xi;
            let ray_cam = kinv * Vector3::new(xi as f64 + 0.5, yi as f64 + 0.5, 1.0);
            let dir = (rot.transpose() * ray_cam).normalize();
            match ray_cast(&cam.position, &dir, spec, boxes, 1e6) {
                Some(hit) => {
                    let col = class_color(hit.class);
                    image[pix * 3] = col.x;
                    image[pix * 3 + 1] = col.y;
                    image[pix * 3 + 2] = col.z;
                    mask[pix] = hit.class;
                }
                None => {
                    image[pix * 3] = sky_color.x;
                    image[pix * 3 + 1] = sky_color.y;
                    image[pix * 3 + 2] = sky_color.z;
                    sky[pix] = true;
                }
            }
        }
    }

    if let Some(p) = spec.label_noise {
        let c = spec.class_names.len() as u16;
        let mut rng =
            StdRng::seed_from_u64(spec.seed ^ (t as u64).wrapping_mul(0x9e37) ^ cam_index as u64);
        for m in mask.iter_mut() {
            if *m != 0 && rng.random_range(0.0..1.0) < p {
                let mut flip = rng.random_range(1..=c.max(2));
                if flip == *m {
                    flip = if flip == c { 1 } else { flip + 1 };
                }
                *m = flip;
            }
        }
    }

    CameraView {
        intrinsics: k,
        extrinsics: e,
        width: w,
        height: h,
        image,
        sem_mask: mask,
        sky_mask: Some(sky),
        depth_target: Vec::new(),
    }
}

/// Exact occupancy grid at frame t: boxes fill voxels whose centers they
/// contain, the ground fills the voxel layer its surface passes through.
fn rasterize_gt(spec: &SceneSpec, boxes: &[OrientedBox]) -> VoxelGrid {
    let g = &spec.grid;
    let (dx, dy, dz) = g.dims();
    let mut grid = VoxelGrid::empty(*g);
    let (gx0, gx1, gy0, gy1) = spec.ground.extent;
    for ix in 0..dx {
        for iy in 0..dy {
            for iz in 0..dz {
                let c = g.voxel_center(ix, iy, iz);
                let mut label = 0u16;
                for (bi, b) in boxes.iter().enumerate() {
                    if b.contains(&c) {
                        label = spec.boxes[bi].class;
                        break;
                    }
                }
                if label == 0 {
                    let z_lo = g.z_range.0 + iz as f64 * g.delta;
                    let z_hi = z_lo + g.delta;
                    if spec.ground.z >= z_lo
                        && spec.ground.z < z_hi
                        && c.x >= gx0
                        && c.x <= gx1
                        && c.y >= gy0
                        && c.y <= gy1
                    {
                        label = spec.ground.class;
                    }
                }
                grid.labels[g.flat(ix, iy, iz)] = label as u8;
            }
        }
    }
    grid
}

/// Camera-visibility mask: a voxel is visible when some camera sees its
/// center in-frustum and no surface occludes it by more than half a voxel
/// diagonal (so cells containing a surface count as observed, cells behind
/// it do not).
fn visibility_mask(spec: &SceneSpec, boxes: &[OrientedBox], views: &[CameraView]) -> Vec<bool> {
    let g = &spec.grid;
    let (dx, dy, dz) = g.dims();
    let slack = g.delta * 3f64.sqrt() / 2.0;
    let mut vis = vec![false; g.voxel_count()];
    let cam_positions: Vec<Vector3<f64>> = spec.cameras.iter().map(|c| c.position).collect();
    for ix in 0..dx {
        for iy in 0..dy {
            for iz in 0..dz {
                let center = g.voxel_center(ix, iy, iz);
                let idx = g.flat(ix, iy, iz);
                for (vi, view) in views.iter().enumerate() {
                    let xc = view.world_to_cam(&center);
                    if xc.z <= 0.0 {
                        continue;
                    }
                    let (u, v) = view.cam_to_pixel(&xc);
                    if u < 0.0 || v < 0.0 || u >= view.width as f64 || v >= view.height as f64 {
                        continue;
                    }
                    let origin = cam_positions[vi];
                    let to_voxel = center - origin;
                    let dist = to_voxel.norm();
                    let dir = to_voxel / dist;
                    let first_hit = ray_cast(&origin, &dir, spec, boxes, 1e6)
                        .map(|h| h.dist)
                        .unwrap_or(f64::INFINITY);
                    if first_hit >= dist - slack {
                        vis[idx] = true;
                        break;
                    }
                }
            }
        }
    }
    vis
}

/// Generates frame `t` of the scene: sensor bundle plus exact ground truth.
pub fn generate_frame(spec: &SceneSpec, t: usize) -> Result<SynthFrame> {
    if t >= spec.frames {
        return Err(Error::Validation(format!(
            "frame {t} out of range (scene has {})",
            spec.frames
        )));
    }
    let boxes: Vec<OrientedBox> = spec.boxes.iter().map(|b| b.pose_at(t)).collect();

    // LiDAR sweep.
    let mut points = Vec::new();
    let mut gt_flow = Vec::new();
    let mut point_class = Vec::new();
    let l = &spec.lidar;
    let mut jitter = spec
        .point_noise
        .map(|s| (s, StdRng::seed_from_u64(spec.seed ^ 0xf00d ^ t as u64)));
    for ch in 0..l.channels {
        let el = lerp(l.elevation_deg.0, l.elevation_deg.1, ch, l.channels).to_radians();
        for step in 0..l.azimuth_steps {
            let az = lerp(l.azimuth_deg.0, l.azimuth_deg.1, step, l.azimuth_steps).to_radians();
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let Some(hit) = ray_cast(&spec.ego, &dir, spec, &boxes, l.max_range) else {
                continue;
            };
            let mut p = spec.ego + dir * hit.dist;
            if let Some((s, rng)) = jitter.as_mut() {
                p += Vector3::new(
                    rng.random_range(-*s..*s),
                    rng.random_range(-*s..*s),
                    rng.random_range(-*s..*s),
                );
            }
            points.push(p);
            point_class.push(hit.class);
            let flow = match hit.box_index {
                Some(bi) if t + 1 < spec.frames => spec.boxes[bi].velocity,
                _ => Vector3::zeros(),
            };
            gt_flow.push(flow);
        }
    }

    let views: Vec<CameraView> = spec
        .cameras
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut v = render_camera(cam, spec, &boxes, t, ci);
            v.depth_target = project_points_to_view(&points, &v);
            v
        })
        .collect();

    let mut ego_pose = Matrix4::identity();
    ego_pose[(0, 3)] = spec.ego.x;
    ego_pose[(1, 3)] = spec.ego.y;
    ego_pose[(2, 3)] = spec.ego.z;

    let gt_grid = rasterize_gt(spec, &boxes);
    let visibility = visibility_mask(spec, &boxes, &views);

    Ok(SynthFrame {
        bundle: FrameBundle {
            t,
            points,
            ego_pose,
            views,
        },
        gt_grid,
        gt_flow,
        point_class,
        visibility,
        box_poses: boxes,
    })
}

fn lerp(a: f64, b: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        return a;
    }
    a + (b - a) * (i as f64) / (n as f64 - 1.0)
}

/// Exporter options: per-frame active class schedule (open-vocabulary
/// sequences) and ground-truth emission.
#[derive(Debug, Clone)]
pub struct WriteOptions {
    /// (from_frame, active class ids); the last entry at or before t applies.
    /// Default: every class active from frame 0.
    pub vocab_schedule: Vec<(usize, Vec<u16>)>,
    pub write_gt: bool,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            vocab_schedule: Vec::new(),
            write_gt: true,
        }
    }
}

fn active_classes(spec: &SceneSpec, opts: &WriteOptions, t: usize) -> Vec<u16> {
    let mut active: Vec<u16> = (1..=spec.class_names.len() as u16).collect();
    for (from, ids) in &opts.vocab_schedule {
        if *from <= t {
            active = ids.clone();
        }
    }
    active
}

/// Writes the scene in the ingest directory layout (plus `gt/` when asked).
pub fn write_scene(spec: &SceneSpec, dir: &Path, opts: &WriteOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gt_dir = dir.join("gt");
    if opts.write_gt {
        std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    }
    for t in 0..spec.frames {
        let frame = generate_frame(spec, t)?;
        let fdir = dir.join(format!("frame_{t:04}"));
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;

        // Points in the sensor frame.
        let sensor_points: Vec<Vector3<f64>> = frame
            .bundle
            .points
            .iter()
            .map(|p| p - spec.ego)
            .collect();
        ingest::write_points_bin(&fdir.join("points.bin"), &sensor_points)?;
        ingest::write_pose_json(&fdir.join("ego_pose.json"), &frame.bundle.ego_pose)?;

        let active = active_classes(spec, opts, t);
        let names: Vec<String> = active
            .iter()
            .map(|&id| spec.class_names[id as usize - 1].clone())
            .collect();
        ingest::write_vocab_json(&fdir.join("vocab.json"), &names)?;

        for (vi, view) in frame.bundle.views.iter().enumerate() {
            let vdir = fdir.join(format!("view_{vi}"));
            std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            ingest::write_calib_json(&vdir.join("calib.json"), &view.intrinsics, &view.extrinsics)?;
            ingest::write_image_png(&vdir.join("image.png"), view.width, view.height, &view.image)?;
            // Remap global ids to the frame's local vocabulary; inactive
            // classes degrade to the sentinel, as an open-set VLM would.
            let local: Vec<u16> = view
                .sem_mask
                .iter()
                .map(|&id| {
                    active
                        .iter()
                        .position(|&a| a == id)
                        .map(|pos| (pos + 1) as u16)
                        .unwrap_or(0)
                })
                .collect();
            ingest::write_mask_png(&vdir.join("mask.png"), view.width, view.height, &local)?;
            if let Some(sky) = &view.sky_mask {
                ingest::write_sky_png(&vdir.join("sky.png"), view.width, view.height, sky)?;
            }
        }

        if opts.write_gt {
            write_grid(
                &gt_dir.join(format!("occ_{t:04}.bin")),
                &frame.gt_grid,
                &spec.class_names,
                t,
            )?;
            write_mask(
                &gt_dir.join(format!("mask_{t:04}.bin")),
                &spec.grid,
                &frame.visibility,
                t,
            )?;
        }
    }
    Ok(())
}

/// Frame-local vocabulary the exporter would write for frame t.
pub fn scene_vocab(spec: &SceneSpec, opts: &WriteOptions, t: usize) -> ClassVocabulary {
    let names = active_classes(spec, opts, t)
        .iter()
        .map(|&id| spec.class_names[id as usize - 1].clone())
        .collect();
    ClassVocabulary::new(names).expect("scene class names are valid")
}

/// Standard desk-scale scene: ground plane, one parked box, one box moving
/// +x at 1 m/frame, two forward cameras, dense forward LiDAR sector.
///
/// Geometry is aligned so surfaces pass through voxel centers (the ground at
/// z = 0 sits mid-cell of [-0.1, 0.1), box faces land on center planes),
/// which keeps the analytic grid and the scatter peaks in the same cells.
pub fn standard_scene(frames: usize) -> SceneSpec {
    SceneSpec {
        seed: 17,
        frames,
        grid: GridSpec::new((2.0, 11.6), (-3.2, 3.2), (-0.1, 1.3), 0.2, 3),
        ground: GroundSpec {
            extent: (0.0, 14.0, -5.0, 5.0),
            z: 0.0,
            class: 1,
        },
        boxes: vec![
            BoxSpec {
                size: Vector3::new(1.2, 1.2, 0.9),
                center0: Vector3::new(8.1, -1.5, 0.75),
                velocity: Vector3::zeros(),
                yaw: 0.0,
                class: 2,
            },
            BoxSpec {
                size: Vector3::new(1.0, 1.0, 0.8),
                center0: Vector3::new(4.0, 2.4, 0.8),
                velocity: Vector3::new(1.0, 0.0, 0.0),
                yaw: 0.0,
                class: 3,
            },
        ],
        cameras: vec![
            CameraSpec {
                position: Vector3::new(0.2, 0.4, 1.6),
                yaw_deg: 12.0,
                pitch_deg: 8.0,
                hfov_deg: 72.0,
                width: 168,
                height: 126,
            },
            CameraSpec {
                position: Vector3::new(0.2, -0.4, 1.6),
                yaw_deg: -12.0,
                pitch_deg: 8.0,
                hfov_deg: 72.0,
                width: 168,
                height: 126,
            },
        ],
        lidar: LidarSpec {
            channels: 280,
            elevation_deg: (-40.0, 4.0),
            azimuth_deg: (-52.0, 52.0),
            azimuth_steps: 240,
            max_range: 30.0,
        },
        ego: Vector3::new(0.0, 0.0, 1.6),
        label_noise: None,
        point_noise: None,
        class_names: vec!["ground".into(), "box".into(), "mover".into()],
    }
}

/// The standard scene with the mover parked (fully static sequence).
pub fn static_scene(frames: usize) -> SceneSpec {
    let mut spec = standard_scene(frames);
    spec.boxes[1].velocity = Vector3::zeros();
    spec
}
