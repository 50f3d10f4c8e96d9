//! Differentiable splatting: project Gaussians, composite color/depth images
//! front-to-back, and compute the test-time loss with exact parameter
//! gradients.
//!
//! The loss per frame is
//! `sum_views mean_pixels |I_hat - I| + lambda * mean_targets |D_hat - D|`,
//! with sky pixels excluded from the photometric term. Gradients flow to
//! position, raw scale, quaternion, raw opacity, and color; the semantic
//! vectors receive no gradient (they are refined only by smoothing).
//!
//! Rendering is tiled; backward reuses the forward traversal per pixel and
//! reduces per-tile partials in tile order, so results are deterministic
//! regardless of thread count.

use crate::core::{covariance, rotation_from_quat, CameraView, FrameBundle, Gaussian, PipelineConfig};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

/// Diagonal floor added to the projected 2D covariance, px^2. Conditions the
/// inverse for sub-pixel kernels.
pub const COV2D_FLOOR: f64 = 0.3;

/// Compositing weight ceiling; keeps the transmittance strictly positive.
const G_MAX: f64 = 0.9999;

/// Transmittance below which a pixel's compositing stops.
const T_STOP: f64 = 1e-12;

const TILE: usize = 16;

/// Composited render of one view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// RGB per pixel, row-major, in [0,1].
    pub color: Vec<f64>,
    /// Alpha-weighted expected depth, meters; 0 where alpha is 0.
    pub depth: Vec<f64>,
    /// Total compositing weight per pixel, in [0,1].
    pub alpha: Vec<f64>,
}

/// Loss decomposition for one frame (depth term already includes lambda in
/// `total` but is reported raw).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub photo: f64,
    pub depth: f64,
    pub total: f64,
}

/// Exact partial derivatives of the frame loss for one Gaussian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParamGrad {
    pub mu: Vector3<f64>,
    pub scale_raw: Vector3<f64>,
    pub quat: Vector4<f64>,
    pub opacity_raw: f64,
    pub color: Vector3<f64>,
}

impl ParamGrad {
    fn add(&mut self, o: &ParamGrad) {
        self.mu += o.mu;
        self.scale_raw += o.scale_raw;
        self.quat += o.quat;
        self.opacity_raw += o.opacity_raw;
        self.color += o.color;
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.scale_raw.iter().all(|v| v.is_finite())
            && self.quat.iter().all(|v| v.is_finite())
            && self.opacity_raw.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Spatial density of a Gaussian at a world point, in (0,1].
pub fn density(g: &Gaussian, x: &Vector3<f64>, delta: f64) -> f64 {
    let sigma = covariance(g, delta);
    let inv = sigma.try_inverse().expect("covariance is SPD");
    let d = x - g.mu;
    (-0.5 * (d.transpose() * inv * d)[0]).exp()
}

/// Perspective projection of one Gaussian: pixel mean, floored 2D covariance
/// `(J Sigma J^T)_{2x2} + 0.3 I`, and camera depth. `None` when the center is
/// at or behind the camera plane.
pub fn project_gaussian(
    g: &Gaussian,
    view: &CameraView,
    delta: f64,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let xc = view.world_to_cam(&g.mu);
    if xc.z <= 0.0 {
        return None;
    }
    let (u, v) = view.cam_to_pixel(&xc);
    let jac = projection_jacobian(&view.intrinsics, &xc);
    let rot = view.rot();
    let sigma_cam = rot * covariance(g, delta) * rot.transpose();
    let cov2d = jac * sigma_cam * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some((Vector2::new(u, v), cov2d, xc.z))
}

/// d(u,v)/d(camera point) at `xc` for intrinsics with zero bottom-left block.
fn projection_jacobian(k: &Matrix3<f64>, xc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, sk, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let (x, y, z) = (xc.x, xc.y, xc.z);
    Matrix2x3::new(
        fx / z,
        sk / z,
        -(fx * x + sk * y) / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    )
}

/// Per-view projection record with the intermediates backward needs.
struct Splat {
    gauss: usize,
    mu2d: Vector2<f64>,
    cov2d_inv: Matrix2<f64>,
    depth: f64,
    alpha: f64,
    color: Vector3<f64>,
    xc: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn prepare_splats(gaussians: &[Gaussian], view: &CameraView, cfg: &PipelineConfig) -> Vec<Splat> {
    let rot = view.rot();
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(gi, g)| {
            let xc = view.world_to_cam(&g.mu);
            if xc.z <= 0.0 {
                return None;
            }
            let (u, v) = view.cam_to_pixel(&xc);
            let jac = projection_jacobian(&view.intrinsics, &xc);
            let sigma_cam = rot * covariance(g, cfg.delta()) * rot.transpose();
            let cov2d = jac * sigma_cam * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
            let cov2d_inv = cov2d.try_inverse()?;
            let rx = cfg.params.trunc_mahal * cov2d[(0, 0)].sqrt() + 1.0;
            let ry = cfg.params.trunc_mahal * cov2d[(1, 1)].sqrt() + 1.0;
            let x0 = (u - rx).floor().max(0.0);
            let x1 = (u + rx).ceil().min(view.width as f64 - 1.0);
            let y0 = (v - ry).floor().max(0.0);
            let y1 = (v + ry).ceil().min(view.height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            Some(Splat {
                gauss: gi,
                mu2d: Vector2::new(u, v),
                cov2d_inv,
                depth: xc.z,
                alpha: g.opacity(),
                color: g.color,
                xc,
                jac,
                sigma_cam,
                x0: x0 as usize,
                x1: x1 as usize,
                y0: y0 as usize,
                y1: y1 as usize,
            })
        })
        .collect();
    // Front-to-back; content-based tie-break keeps the composite independent
    // of input order.
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.mu2d.x.total_cmp(&b.mu2d.x))
            .then(a.mu2d.y.total_cmp(&b.mu2d.y))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    splats
}

fn tile_lists(splats: &[Splat], width: usize, height: usize) -> (usize, usize, Vec<Vec<u32>>) {
    let tx = width.div_ceil(TILE);
    let ty = height.div_ceil(TILE);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (si, s) in splats.iter().enumerate() {
        for tyi in s.y0 / TILE..=s.y1 / TILE {
            for txi in s.x0 / TILE..=s.x1 / TILE {
                lists[tyi * tx + txi].push(si as u32);
            }
        }
    }
    (tx, ty, lists)
}

/// Contributors to one pixel, in depth order.
struct PixelStack {
    /// (index into the tile's splat list, G value, weight w).
    entries: Vec<(u32, f64, f64)>,
}

fn gather_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    xi: usize,
    yi: usize,
    trunc2: f64,
    stack: &mut PixelStack,
) {
    stack.entries.clear();
    let mut transmittance = 1.0;
    for &si in list {
        let s = &splats[si as usize];
        if xi < s.x0 || xi > s.x1 || yi < s.y0 || yi > s.y1 {
            continue;
        }
        let d = Vector2::new(px - s.mu2d.x, py - s.mu2d.y);
        let q = (d.transpose() * s.cov2d_inv * d)[0];
        if q > trunc2 {
            continue;
        }
        let g = (s.alpha * (-0.5 * q).exp()).min(G_MAX);
        let w = g * transmittance;
        stack.entries.push((si, g, w));
        transmittance *= 1.0 - g;
        if transmittance < T_STOP {
            break;
        }
    }
}

/// Front-to-back alpha compositing of the Gaussian set into one view.
pub fn render_view(gaussians: &[Gaussian], view: &CameraView, cfg: &PipelineConfig) -> RenderOutput {
    let (w, h) = (view.width, view.height);
    let splats = prepare_splats(gaussians, view, cfg);
    let (tx, ty, lists) = tile_lists(&splats, w, h);
    let trunc2 = cfg.params.trunc_mahal * cfg.params.trunc_mahal;

    struct TileOut {
        color: Vec<f64>,
        depth: Vec<f64>,
        alpha: Vec<f64>,
    }
    let tiles: Vec<TileOut> = (0..tx * ty)
        .into_par_iter()
        .map(|ti| {
            let (tix, tiy) = (ti % tx, ti / tx);
            let x_lo = tix * TILE;
            let y_lo = tiy * TILE;
            let x_hi = (x_lo + TILE).min(w);
            let y_hi = (y_lo + TILE).min(h);
            let npx = (x_hi - x_lo) * (y_hi - y_lo);
            let mut out = TileOut {
                color: vec![0.0; npx * 3],
                depth: vec![0.0; npx],
                alpha: vec![0.0; npx],
            };
            let mut stack = PixelStack { entries: Vec::new() };
            for yi in y_lo..y_hi {
                for xi in x_lo..x_hi {
                    gather_pixel(
                        &splats,
                        &lists[ti],
                        xi as f64 + 0.5,
                        yi as f64 + 0.5,
                        xi,
                        yi,
                        trunc2,
                        &mut stack,
                    );
                    let local = (yi - y_lo) * (x_hi - x_lo) + (xi - x_lo);
                    let mut col = Vector3::zeros();
                    let mut wd = 0.0;
                    let mut a = 0.0;
                    for &(si, _g, wgt) in &stack.entries {
                        let s = &splats[si as usize];
                        col += s.color * wgt;
                        wd += s.depth * wgt;
                        a += wgt;
                    }
                    out.color[local * 3] = col.x;
                    out.color[local * 3 + 1] = col.y;
                    out.color[local * 3 + 2] = col.z;
                    out.alpha[local] = a;
                    out.depth[local] = if a > 0.0 { wd / a } else { 0.0 };
                }
            }
            out
        })
        .collect();

    let mut render = RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        alpha: vec![0.0; w * h],
    };
    for (ti, tile) in tiles.iter().enumerate() {
        let (tix, tiy) = (ti % tx, ti / tx);
        let x_lo = tix * TILE;
        let y_lo = tiy * TILE;
        let x_hi = (x_lo + TILE).min(w);
        let y_hi = (y_lo + TILE).min(h);
        for yi in y_lo..y_hi {
            for xi in x_lo..x_hi {
                let local = (yi - y_lo) * (x_hi - x_lo) + (xi - x_lo);
                let global = yi * w + xi;
                render.color[global * 3..global * 3 + 3]
                    .copy_from_slice(&tile.color[local * 3..local * 3 + 3]);
                render.depth[global] = tile.depth[local];
                render.alpha[global] = tile.alpha[local];
            }
        }
    }
    render
}

/// Per-splat gradients in projected coordinates.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mu2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
    depth: f64,
    alpha: f64,
    color: Vector3<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mu2d += o.mu2d;
        self.cov2d += o.cov2d;
        self.depth += o.depth;
        self.alpha += o.alpha;
        self.color += o.color;
    }
}

/// Frame loss and its exact parameter gradients over all views.
pub fn loss_and_gradients(
    gaussians: &[Gaussian],
    frame: &FrameBundle,
    cfg: &PipelineConfig,
) -> (LossParts, Vec<ParamGrad>) {
    let lambda = cfg.params.lambda_depth;
    let mut grads = vec![ParamGrad::default(); gaussians.len()];
    let mut loss = LossParts::default();

    for view in &frame.views {
        let (photo, depth, view_grads) = view_loss_and_gradients(gaussians, view, cfg);
        loss.photo += photo;
        loss.depth += depth;
        for (g, vg) in grads.iter_mut().zip(&view_grads) {
            g.add(vg);
        }
    }
    loss.total = loss.photo + lambda * loss.depth;
    (loss, grads)
}

fn view_loss_and_gradients(
    gaussians: &[Gaussian],
    view: &CameraView,
    cfg: &PipelineConfig,
) -> (f64, f64, Vec<ParamGrad>) {
    let (w, h) = (view.width, view.height);
    let lambda = cfg.params.lambda_depth;
    let trunc2 = cfg.params.trunc_mahal * cfg.params.trunc_mahal;
    let splats = prepare_splats(gaussians, view, cfg);
    let (tx, ty, lists) = tile_lists(&splats, w, h);

    // Per-pixel depth targets (NaN = none); collisions were resolved at
    // projection time.
    let mut target_depth = vec![f64::NAN; w * h];
    for t in &view.depth_target {
        target_depth[t.v.floor() as usize * w + t.u.floor() as usize] = t.depth;
    }
    let n_pix = (0..w * h)
        .filter(|&i| view.sky_mask.as_ref().map_or(true, |s| !s[i]))
        .count()
        .max(1) as f64;
    let n_tgt = view.depth_target.len().max(1) as f64;

    struct TileGrad {
        photo: f64,
        depth: f64,
        grads: Vec<(u32, SplatGrad)>,
    }

    let tiles: Vec<TileGrad> = (0..tx * ty)
        .into_par_iter()
        .map(|ti| {
            let (tix, tiy) = (ti % tx, ti / tx);
            let x_lo = tix * TILE;
            let y_lo = tiy * TILE;
            let x_hi = (x_lo + TILE).min(w);
            let y_hi = (y_lo + TILE).min(h);
            let list = &lists[ti];
            let mut local: Vec<SplatGrad> = vec![SplatGrad::default(); list.len()];
            let mut pos_of = std::collections::HashMap::with_capacity(list.len());
            for (pos, &si) in list.iter().enumerate() {
                pos_of.insert(si, pos);
            }
            let mut photo = 0.0;
            let mut depth_loss = 0.0;
            let mut stack = PixelStack { entries: Vec::new() };
            let mut dldw: Vec<f64> = Vec::new();

            for yi in y_lo..y_hi {
                for xi in x_lo..x_hi {
                    let pix = yi * w + xi;
                    let sky = view.sky_mask.as_ref().map_or(false, |s| s[pix]);
                    let has_depth = !target_depth[pix].is_nan();
                    if sky && !has_depth {
                        continue;
                    }
                    gather_pixel(
                        &splats,
                        list,
                        xi as f64 + 0.5,
                        yi as f64 + 0.5,
                        xi,
                        yi,
                        trunc2,
                        &mut stack,
                    );
                    // Forward: composite color/alpha/depth.
                    let mut col = Vector3::zeros();
                    let mut wd = 0.0;
                    let mut a = 0.0;
                    for &(si, _g, wgt) in &stack.entries {
                        let s = &splats[si as usize];
                        col += s.color * wgt;
                        wd += s.depth * wgt;
                        a += wgt;
                    }
                    let d_hat = if a > 0.0 { wd / a } else { 0.0 };

                    // Loss terms and per-pixel output gradients.
                    let mut g_col = Vector3::zeros();
                    if !sky {
                        let tgt = Vector3::new(
                            view.image[pix * 3],
                            view.image[pix * 3 + 1],
                            view.image[pix * 3 + 2],
                        );
                        let r = col - tgt;
                        photo += (r.x.abs() + r.y.abs() + r.z.abs()) / n_pix;
                        g_col = r.map(sign) / n_pix;
                    }
                    let mut g_depth_out = 0.0;
                    if has_depth {
                        let r = d_hat - target_depth[pix];
                        depth_loss += r.abs() / n_tgt;
                        g_depth_out = lambda * sign(r) / n_tgt;
                    }
                    if stack.entries.is_empty() {
                        continue;
                    }

                    // dL/dw per contributor.
                    dldw.clear();
                    for &(si, _g, _w) in &stack.entries {
                        let s = &splats[si as usize];
                        let mut v = g_col.dot(&s.color);
                        if a > 0.0 && g_depth_out != 0.0 {
                            v += g_depth_out * (s.depth - d_hat) / a;
                        }
                        dldw.push(v);
                    }
                    // Suffix pass: dL/dG and per-splat accumulation.
                    let px = xi as f64 + 0.5;
                    let py = yi as f64 + 0.5;
                    let mut suffix = 0.0;
                    for idx in (0..stack.entries.len()).rev() {
                        let (si, g, wgt) = stack.entries[idx];
                        let s = &splats[si as usize];
                        let t_i = wgt / g;
                        let dldg = dldw[idx] * t_i - suffix / (1.0 - g);
                        suffix += dldw[idx] * wgt;

                        let slot = &mut local[pos_of[&si]];
                        slot.color += g_col * wgt;
                        if a > 0.0 && g_depth_out != 0.0 {
                            slot.depth += g_depth_out * wgt / a;
                        }
                        if g < G_MAX {
                            // G = alpha * exp(-Q/2)
                            slot.alpha += dldg * g / s.alpha;
                            let dldq = -0.5 * dldg * g;
                            let d = Vector2::new(px - s.mu2d.x, py - s.mu2d.y);
                            let md = s.cov2d_inv * d;
                            slot.mu2d += md * (-2.0 * dldq);
                            slot.cov2d += (md * md.transpose()) * (-dldq);
                        }
                    }
                }
            }
            let grads: Vec<(u32, SplatGrad)> = list
                .iter()
                .enumerate()
                .filter(|(pos, _)| {
                    let g = &local[*pos];
                    g.mu2d != Vector2::zeros()
                        || g.cov2d != Matrix2::zeros()
                        || g.depth != 0.0
                        || g.alpha != 0.0
                        || g.color != Vector3::zeros()
                })
                .map(|(pos, &si)| (si, local[pos]))
                .collect();
            TileGrad {
                photo,
                depth: depth_loss,
                grads,
            }
        })
        .collect();

    // Deterministic reduction in tile order.
    let mut photo = 0.0;
    let mut depth_loss = 0.0;
    let mut splat_grads: Vec<SplatGrad> = vec![SplatGrad::default(); splats.len()];
    for tile in &tiles {
        photo += tile.photo;
        depth_loss += tile.depth;
        for (si, g) in &tile.grads {
            splat_grads[*si as usize].add(g);
        }
    }

    // Chain projected-space gradients back to Gaussian parameters.
    let view_rot = view.rot();
    let per_splat: Vec<(usize, ParamGrad)> = splats
        .par_iter()
        .zip(&splat_grads)
        .map(|(s, sg)| {
            let g = &gaussians[s.gauss];
            (s.gauss, chain_splat_gradient(g, s, sg, view, &view_rot, cfg))
        })
        .collect();
    let mut grads = vec![ParamGrad::default(); gaussians.len()];
    for (gi, pg) in &per_splat {
        grads[*gi].add(pg);
    }
    (photo, depth_loss, grads)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Backward through projection: 2D mean/covariance/depth gradients into
/// position, raw scale, quaternion, raw opacity, and color gradients.
fn chain_splat_gradient(
    g: &Gaussian,
    s: &Splat,
    sg: &SplatGrad,
    view: &CameraView,
    view_rot: &Matrix3<f64>,
    cfg: &PipelineConfig,
) -> ParamGrad {
    let k = &view.intrinsics;
    let (fx, sk, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let (x, y, z) = (s.xc.x, s.xc.y, s.xc.z);
    let z2 = z * z;
    let z3 = z2 * z;

    // Symmetric part of the 2D covariance gradient.
    let gm = 0.5 * (sg.cov2d + sg.cov2d.transpose());

    // Camera-point gradient: mean path + depth path + Jacobian dependence.
    let mut d_xc = s.jac.transpose() * sg.mu2d;
    d_xc.z += sg.depth;
    let dj_dx = Matrix2x3::new(0.0, 0.0, -fx / z2, 0.0, 0.0, 0.0);
    let dj_dy = Matrix2x3::new(0.0, 0.0, -sk / z2, 0.0, 0.0, -fy / z2);
    let dj_dz = Matrix2x3::new(
        -fx / z2,
        -sk / z2,
        2.0 * (fx * x + sk * y) / z3,
        0.0,
        -fy / z2,
        2.0 * fy * y / z3,
    );
    let sigma_jt = s.sigma_cam * s.jac.transpose();
    for (axis, dj) in [(0usize, dj_dx), (1, dj_dy), (2, dj_dz)] {
        let m = dj * sigma_jt;
        d_xc[axis] += 2.0 * frobenius2(&gm, &m);
    }

    // Covariance chain: 2D -> camera -> world -> (scale, quaternion).
    let d_sigma_cam = s.jac.transpose() * gm * s.jac;
    let d_sigma3 = view_rot.transpose() * d_sigma_cam * view_rot;

    let rot = rotation_from_quat(&g.quat);
    let scale = g.scale(cfg.delta());
    let mut d_scale_raw = Vector3::zeros();
    for axis in 0..3 {
        let r_col = rot.column(axis);
        let d_s = 2.0 * scale[axis] * (r_col.transpose() * d_sigma3 * r_col)[0];
        let sig = scale[axis] / (2.0 * cfg.delta());
        d_scale_raw[axis] = d_s * scale[axis] * (1.0 - sig);
    }

    let scale2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let d_rot = 2.0 * d_sigma3 * rot * scale2;
    let dr_dq = rotation_quat_jacobian(&g.quat);
    let mut d_quat_unit = Vector4::zeros();
    for qi in 0..4 {
        d_quat_unit[qi] = frobenius3(&d_rot, &dr_dq[qi]);
    }
    // Through the normalization q/|q| at |q| = 1.
    let qn = g.quat / g.quat.norm();
    let d_quat = (d_quat_unit - qn * qn.dot(&d_quat_unit)) / g.quat.norm();

    let alpha = s.alpha;
    ParamGrad {
        mu: view_rot.transpose() * d_xc,
        scale_raw: d_scale_raw,
        quat: d_quat,
        opacity_raw: sg.alpha * alpha * (1.0 - alpha),
        color: sg.color,
    }
}

#[inline]
fn frobenius2(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
fn frobenius3(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// dR/dq of the rotation matrix of a unit quaternion [w,x,y,z], evaluated at
/// `q/|q|`.
fn rotation_quat_jacobian(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}
