//! Frame loading, open-vocabulary class list management, and LiDAR-to-view
//! depth target projection.
//!
//! Frame directory layout (all little-endian):
//!
//! ```text
//! frame_0000/
//!   points.bin       raw f32 (x,y,z) triplets, sensor frame
//!   ego_pose.json    4x4 row-major sensor-to-world rigid transform
//!   vocab.json       ordered array of class-name strings for this frame
//!   view_0/
//!     image.png      8-bit RGB
//!     mask.png       16-bit single channel of class ids, 0 = unlabeled
//!     sky.png        optional 8-bit, nonzero = sky
//!     calib.json     {"K": 3x3 row-major, "E": 3x4 row-major world-to-camera}
//!   view_1/ ...
//! ```

use crate::core::{CameraView, DepthTarget, FrameBundle};
use crate::{Error, Result};
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Mask value for pixels without a usable class label.
pub const SENTINEL: u16 = 0;

/// Images wider than this are downsampled at load; the optimization targets
/// geometry, not fidelity, and small renders keep the per-frame budget flat.
pub const MAX_LOAD_WIDTH: usize = 400;

/// Ordered list of class names; id `i` (1-based) refers to `names[i-1]`,
/// id 0 is reserved for "empty"/unlabeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub version: u64,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        validate_names(&names)?;
        Ok(ClassVocabulary { names, version: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// 1-based class id for a name.
    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (i + 1) as u16)
    }

    /// Appends any names not yet present, keeping existing ids stable.
    /// Bumps `version` when the list changed.
    pub fn merge(&mut self, other: &ClassVocabulary) {
        let mut changed = false;
        for name in &other.names {
            if self.id_of(name).is_none() {
                self.names.push(name.clone());
                changed = true;
            }
        }
        if changed {
            self.version += 1;
        }
    }
}

fn validate_names(names: &[String]) -> Result<()> {
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() {
            return Err(Error::Validation(format!("class name {i} is empty")));
        }
        if names[..i].contains(n) {
            return Err(Error::Validation(format!("duplicate class name '{n}'")));
        }
    }
    Ok(())
}

/// Translates per-pixel class ids between vocabularies by matching names.
/// Ids whose names are absent from `new_vocab` become the sentinel.
pub fn remap_vocabulary(
    old_masks: &[Vec<u16>],
    old_vocab: &ClassVocabulary,
    new_vocab: &ClassVocabulary,
) -> Vec<Vec<u16>> {
    let table = remap_table(old_vocab, new_vocab);
    old_masks
        .iter()
        .map(|m| m.iter().map(|&id| table[id as usize]).collect())
        .collect()
}

fn remap_table(old_vocab: &ClassVocabulary, new_vocab: &ClassVocabulary) -> Vec<u16> {
    let mut table = vec![SENTINEL; old_vocab.names.len() + 1];
    for (i, name) in old_vocab.names.iter().enumerate() {
        table[i + 1] = new_vocab.id_of(name).unwrap_or(SENTINEL);
    }
    table
}

/// Projects world-frame points into a view: one target per hit pixel with
/// positive camera depth, nearest depth winning on collisions. Output is in
/// row-major pixel order.
pub fn project_points_to_view(points: &[Vector3<f64>], view: &CameraView) -> Vec<DepthTarget> {
    let mut best: Vec<Option<DepthTarget>> = vec![None; view.width * view.height];
    let rot = view.rot();
    let trans = view.trans();
    for p in points {
        let xc = rot * p + trans;
        if xc.z <= 0.0 {
            continue;
        }
        let (u, v) = view.cam_to_pixel(&xc);
        if u < 0.0 || v < 0.0 || u >= view.width as f64 || v >= view.height as f64 {
            continue;
        }
        let slot = &mut best[v.floor() as usize * view.width + u.floor() as usize];
        match slot {
            Some(t) if t.depth <= xc.z => {}
            _ => *slot = Some(DepthTarget { u, v, depth: xc.z }),
        }
    }
    best.into_iter().flatten().collect()
}

/// Reads the per-frame vocabulary file.
pub fn read_frame_vocab(dir: &Path) -> Result<ClassVocabulary> {
    let path = dir.join("vocab.json");
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = serde_json::from_str(&raw).map_err(|e| Error::json(&path, e))?;
    ClassVocabulary::new(names)
}

/// Loads one frame directory into a validated, world-frame [`FrameBundle`].
/// Mask ids are remapped from the frame's local vocabulary to `vocab` by
/// name; names missing from `vocab` degrade to the sentinel.
pub fn load_frame(dir: &Path, vocab: &ClassVocabulary) -> Result<FrameBundle> {
    let t = frame_index(dir);
    let ego_pose = read_pose(&dir.join("ego_pose.json"))?;
    let points_sensor = read_points_bin(&dir.join("points.bin"))?;
    let rot = ego_pose.fixed_view::<3, 3>(0, 0).into_owned();
    let trans = ego_pose.fixed_view::<3, 1>(0, 3).into_owned();
    let points: Vec<Vector3<f64>> = points_sensor.iter().map(|p| rot * p + trans).collect();

    let local_vocab = read_frame_vocab(dir)?;
    let table = remap_table(&local_vocab, vocab);

    let mut views = Vec::new();
    for m in 0.. {
        let vdir = dir.join(format!("view_{m}"));
        if !vdir.is_dir() {
            break;
        }
        views.push(load_view(&vdir, &table, &points)?);
    }
    if views.is_empty() {
        return Err(Error::Format(format!(
            "no view_<m> directories in {}",
            dir.display()
        )));
    }
    Ok(FrameBundle {
        t,
        points,
        ego_pose,
        views,
    })
}

fn frame_index(dir: &Path) -> usize {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.rsplit('_').next())
        .and_then(|d| d.parse().ok())
        .unwrap_or(0)
}

fn load_view(vdir: &Path, remap: &[u16], points_world: &[Vector3<f64>]) -> Result<CameraView> {
    let (intrinsics, extrinsics) = read_calib(&vdir.join("calib.json"))?;
    let img_path = vdir.join("image.png");
    let img = image::open(&img_path)
        .map_err(|e| Error::Format(format!("{}: {e}", img_path.display())))?
        .to_rgb8();
    let mask_path = vdir.join("mask.png");
    let mask_img = image::open(&mask_path)
        .map_err(|e| Error::Format(format!("{}: {e}", mask_path.display())))?
        .to_luma16();
    if mask_img.dimensions() != img.dimensions() {
        return Err(Error::Format(format!(
            "{}: mask {}x{} does not match image {}x{}",
            vdir.display(),
            mask_img.width(),
            mask_img.height(),
            img.width(),
            img.height()
        )));
    }
    let sky_path = vdir.join("sky.png");
    let sky_img = if sky_path.is_file() {
        let s = image::open(&sky_path)
            .map_err(|e| Error::Format(format!("{}: {e}", sky_path.display())))?
            .to_luma8();
        if s.dimensions() != img.dimensions() {
            return Err(Error::Format(format!(
                "{}: sky mask dimensions differ from image",
                vdir.display()
            )));
        }
        Some(s)
    } else {
        None
    };

    // Downsample oversized inputs, rescaling the intrinsics to match.
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    let (img, mask_img, sky_img, intrinsics, width, height) = if w0 > MAX_LOAD_WIDTH {
        let w1 = MAX_LOAD_WIDTH;
        let h1 = ((h0 as f64) * (w1 as f64) / (w0 as f64)).round().max(1.0) as usize;
        let img = image::imageops::resize(
            &img,
            w1 as u32,
            h1 as u32,
            image::imageops::FilterType::Triangle,
        );
        let mask_img = image::imageops::resize(
            &mask_img,
            w1 as u32,
            h1 as u32,
            image::imageops::FilterType::Nearest,
        );
        let sky_img = sky_img.map(|s| {
            image::imageops::resize(
                &s,
                w1 as u32,
                h1 as u32,
                image::imageops::FilterType::Nearest,
            )
        });
        let sx = w1 as f64 / w0 as f64;
        let sy = h1 as f64 / h0 as f64;
        let mut k = intrinsics;
        k.row_mut(0).scale_mut(sx);
        k.row_mut(1).scale_mut(sy);
        (img, mask_img, sky_img, k, w1, h1)
    } else {
        (img, mask_img, sky_img, intrinsics, w0, h0)
    };

    let image: Vec<f64> = img.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect();
    let sem_mask: Vec<u16> = mask_img
        .pixels()
        .map(|p| {
            let id = p.0[0] as usize;
            if id < remap.len() {
                remap[id]
            } else {
                SENTINEL
            }
        })
        .collect();
    let sky_mask = sky_img.map(|s| s.pixels().map(|p| p.0[0] != 0).collect());

    let mut view = CameraView {
        intrinsics,
        extrinsics,
        width,
        height,
        image,
        sem_mask,
        sky_mask,
        depth_target: Vec::new(),
    };
    validate_intrinsics(&view.intrinsics)?;
    view.depth_target = project_points_to_view(points_world, &view);
    Ok(view)
}

fn validate_intrinsics(k: &Matrix3<f64>) -> Result<()> {
    if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
        return Err(Error::Validation("intrinsics focal entries must be positive".into()));
    }
    if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
        return Err(Error::Validation("intrinsics bottom-left block must be zero".into()));
    }
    Ok(())
}

fn read_pose(path: &Path) -> Result<Matrix4<f64>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: [[f64; 4]; 4] = serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    validate_rigid(&m).map_err(|msg| {
        Error::Validation(format!("{}: {msg}", path.display()))
    })?;
    Ok(m)
}

fn validate_rigid(m: &Matrix4<f64>) -> std::result::Result<(), String> {
    let r = m.fixed_view::<3, 3>(0, 0);
    let rrt = r * r.transpose();
    if (rrt - Matrix3::identity()).norm() > 1e-4 {
        return Err("rotation block is not orthonormal".into());
    }
    if (r.determinant() - 1.0).abs() > 1e-4 {
        return Err("rotation block determinant is not +1".into());
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).norm() > 1e-9 {
        return Err("bottom row is not (0,0,0,1)".into());
    }
    Ok(())
}

fn read_calib(path: &Path) -> Result<(Matrix3<f64>, Matrix3x4<f64>)> {
    #[derive(Deserialize)]
    struct Calib {
        #[serde(rename = "K")]
        k: [[f64; 3]; 3],
        #[serde(rename = "E")]
        e: [[f64; 4]; 3],
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let calib: Calib = serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
    Ok((
        Matrix3::from_fn(|r, c| calib.k[r][c]),
        Matrix3x4::from_fn(|r, c| calib.e[r][c]),
    ))
}

fn read_points_bin(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 12",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]) as f64;
            Vector3::new(f(0), f(4), f(8))
        })
        .collect())
}

// Writer-side helpers shared with the synthetic scene exporter.

pub(crate) fn write_points_bin(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_pose_json(path: &Path, m: &Matrix4<f64>) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect();
    let raw = serde_json::to_string(&rows).map_err(|e| Error::json(path, e))?;
    fs::write(path, raw).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_calib_json(path: &Path, k: &Matrix3<f64>, e: &Matrix3x4<f64>) -> Result<()> {
    let kk: Vec<Vec<f64>> = (0..3).map(|r| (0..3).map(|c| k[(r, c)]).collect()).collect();
    let ee: Vec<Vec<f64>> = (0..3).map(|r| (0..4).map(|c| e[(r, c)]).collect()).collect();
    let raw = serde_json::to_string(&serde_json::json!({"K": kk, "E": ee}))
        .map_err(|err| Error::json(path, err))?;
    fs::write(path, raw).map_err(|err| Error::io(path, err))
}

pub(crate) fn write_vocab_json(path: &Path, names: &[String]) -> Result<()> {
    let raw = serde_json::to_string(names).map_err(|e| Error::json(path, e))?;
    fs::write(path, raw).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_image_png(path: &Path, w: usize, h: usize, rgb: &[f64]) -> Result<()> {
    let buf: Vec<u8> = rgb
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_mask_png(path: &Path, w: usize, h: usize, ids: &[u16]) -> Result<()> {
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, ids.to_vec()).expect("buffer size");
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub(crate) fn write_sky_png(path: &Path, w: usize, h: usize, sky: &[bool]) -> Result<()> {
    let buf: Vec<u8> = sky.iter().map(|&s| if s { 255 } else { 0 }).collect();
    let img: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
