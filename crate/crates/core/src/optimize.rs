//! Per-frame test-time refinement: moment-based gradient descent on the
//! splatting loss with periodic semantic smoothing.
//!
//! First-order updates with decay rates 0.9/0.999 and per-parameter step
//! sizes (position scaled by the voxel edge). Quaternions are renormalized
//! after every step, so scale/opacity activations and the unit-norm invariant
//! hold for every iterate.

use crate::core::{FrameBundle, Gaussian, PipelineConfig};
use crate::smooth::{smooth_semantics, KernelParams};
use crate::splat::{loss_and_gradients, LossParts, ParamGrad};

/// Position step per voxel edge: lr_mu = 1.6e-3 * delta.
pub const LR_MU_PER_DELTA: f64 = 1.6e-3;
pub const LR_COLOR: f64 = 2.5e-3;
pub const LR_OPACITY: f64 = 5e-2;
pub const LR_SCALE: f64 = 5e-3;
pub const LR_QUAT: f64 = 1e-3;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Knobs the ablations need; the defaults are the production path.
#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Multiplier on every step size.
    pub rate_factor: f64,
    /// Run the periodic smoothing passes.
    pub smoothing: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            rate_factor: 1.0,
            smoothing: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizeReport {
    pub initial: LossParts,
    pub final_loss: LossParts,
    /// Loss parts per iteration, before that iteration's step.
    pub history: Vec<LossParts>,
    /// A non-finite loss or gradient forced a rollback with halved rates.
    pub recovered: bool,
    /// A second non-finite event ended the loop early; the returned set is
    /// the best seen so far.
    pub aborted: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One Adam delta for slot `i`; caller advances `t` once per step.
    fn delta(&mut self, i: usize, grad: f64, lr: f64) -> f64 {
        self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad;
        self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad * grad;
        let mh = self.m[i] / (1.0 - BETA1.powi(self.t));
        let vh = self.v[i] / (1.0 - BETA2.powi(self.t));
        lr * mh / (vh.sqrt() + ADAM_EPS)
    }
}

/// Refines the Gaussian set against one frame. Returns the refined set and a
/// report with initial/final losses and the per-iteration history.
pub fn optimize_frame(
    gaussians: Vec<Gaussian>,
    frame: &FrameBundle,
    cfg: &PipelineConfig,
) -> (Vec<Gaussian>, OptimizeReport) {
    optimize_frame_opts(gaussians, frame, cfg, &OptimizeOptions::default())
}

pub fn optimize_frame_opts(
    gaussians: Vec<Gaussian>,
    frame: &FrameBundle,
    cfg: &PipelineConfig,
    opts: &OptimizeOptions,
) -> (Vec<Gaussian>, OptimizeReport) {
    let mut report = OptimizeReport::default();
    if cfg.params.iters == 0 || gaussians.is_empty() {
        let (loss, _) = loss_and_gradients(&gaussians, frame, cfg);
        report.initial = loss;
        report.final_loss = loss;
        return (gaussians, report);
    }

    let n = gaussians.len();
    let mut current = gaussians;
    let mut opt_mu = Adam::new(3 * n);
    let mut opt_scale = Adam::new(3 * n);
    let mut opt_quat = Adam::new(4 * n);
    let mut opt_opacity = Adam::new(n);
    let mut opt_color = Adam::new(3 * n);
    let mut rate = opts.rate_factor;

    let mut last_good = current.clone();
    let mut best = current.clone();
    let mut best_loss = f64::INFINITY;
    let kernel = KernelParams::from(cfg);

    let mut iter = 0usize;
    while iter < cfg.params.iters {
        let (loss, grads) = loss_and_gradients(&current, frame, cfg);
        let finite = loss.total.is_finite() && grads.iter().all(ParamGrad::is_finite);
        if !finite {
            if report.recovered {
                report.aborted = true;
                current = best.clone();
                break;
            }
            // Roll back to the last finite state and halve every rate.
            report.recovered = true;
            current = last_good.clone();
            rate *= 0.5;
            opt_mu = Adam::new(3 * n);
            opt_scale = Adam::new(3 * n);
            opt_quat = Adam::new(4 * n);
            opt_opacity = Adam::new(n);
            opt_color = Adam::new(3 * n);
            continue;
        }
        if iter == 0 {
            report.initial = loss;
        }
        report.history.push(loss);
        if loss.total < best_loss {
            best_loss = loss.total;
            best = current.clone();
        }
        last_good = current.clone();

        let lr_mu = LR_MU_PER_DELTA * cfg.delta() * rate;
        opt_mu.t += 1;
        opt_scale.t += 1;
        opt_quat.t += 1;
        opt_opacity.t += 1;
        opt_color.t += 1;
        for (i, (g, grad)) in current.iter_mut().zip(&grads).enumerate() {
            for k in 0..3 {
                g.mu[k] -= opt_mu.delta(3 * i + k, grad.mu[k], lr_mu);
                g.scale_raw[k] -= opt_scale.delta(3 * i + k, grad.scale_raw[k], LR_SCALE * rate);
                g.color[k] -= opt_color.delta(3 * i + k, grad.color[k], LR_COLOR * rate);
                g.color[k] = g.color[k].clamp(0.0, 1.0);
            }
            for k in 0..4 {
                g.quat[k] -= opt_quat.delta(4 * i + k, grad.quat[k], LR_QUAT * rate);
            }
            g.quat /= g.quat.norm();
            g.opacity_raw -= opt_opacity.delta(i, grad.opacity_raw, LR_OPACITY * rate);
        }

        if opts.smoothing
            && cfg.params.smooth_every > 0
            && (iter + 1) % cfg.params.smooth_every == 0
        {
            smooth_semantics(&mut current, &kernel, cfg.params.knn);
        }
        iter += 1;
    }

    let (final_loss, _) = loss_and_gradients(&current, frame, cfg);
    if final_loss.total.is_finite() && final_loss.total < best_loss {
        report.final_loss = final_loss;
        (current, report)
    } else if report.aborted || !final_loss.total.is_finite() {
        let (best_eval, _) = loss_and_gradients(&best, frame, cfg);
        report.final_loss = best_eval;
        (best, report)
    } else {
        report.final_loss = final_loss;
        (current, report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{GridSpec, PipelineConfig};
    use crate::splat::render_view;
    use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

    fn cfg_with(iters: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(GridSpec::new(
            (-8.0, 8.0),
            (-8.0, 8.0),
            (-2.0, 2.0),
            1.0,
            2,
        ));
        cfg.params.iters = iters;
        cfg.params.smooth_every = 10;
        cfg
    }

    fn view(w: usize, h: usize) -> crate::core::CameraView {
        let f = w as f64 * 0.9;
        crate::core::CameraView {
            intrinsics: Matrix3::new(f, 0.0, w as f64 / 2.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 1.0),
            extrinsics: Matrix3x4::from_fn(|r, c| if r == c { 1.0 } else { 0.0 }),
            width: w,
            height: h,
            image: vec![0.0; w * h * 3],
            sem_mask: vec![0; w * h],
            sky_mask: None,
            depth_target: Vec::new(),
        }
    }

    /// Three-Gaussian scene whose targets come from a perturbed copy.
    fn toy_scene() -> (Vec<Gaussian>, FrameBundle, PipelineConfig) {
        let cfg = cfg_with(200);
        let mk = |mu: Vector3<f64>, color: Vector3<f64>| {
            let mut g = Gaussian::new(mu, 0.45, color, vec![0.5, 0.5], 0);
            g.set_scale(cfg.delta(), Vector3::new(0.6, 0.6, 0.6));
            g
        };
        let truth = vec![
            mk(Vector3::new(0.4, 0.0, 5.0), Vector3::new(0.9, 0.2, 0.1)),
            mk(Vector3::new(-0.6, 0.3, 6.0), Vector3::new(0.1, 0.8, 0.3)),
            mk(Vector3::new(0.1, -0.5, 5.5), Vector3::new(0.2, 0.3, 0.9)),
        ];
        let mut v = view(40, 32);
        let out = render_view(&truth, &v, &cfg);
        v.image = out.color.clone();
        // Sparse depth targets on the truth surface.
        for &(u, vv) in &[(20.5, 16.5), (14.5, 18.5), (24.5, 12.5)] {
            let pix = vv as usize * 40 + u as usize;
            if out.alpha[pix] > 0.2 {
                v.depth_target.push(crate::core::DepthTarget {
                    u,
                    v: vv,
                    depth: out.depth[pix],
                });
            }
        }
        let frame = FrameBundle {
            t: 0,
            points: Vec::new(),
            ego_pose: Matrix4::identity(),
            views: vec![v],
        };
        // Start from shifted colors and slightly wrong positions.
        let start: Vec<Gaussian> = truth
            .iter()
            .map(|g| {
                let mut s = g.clone();
                s.color = (s.color + Vector3::new(0.25, -0.2, 0.2)).map(|c| c.clamp(0.0, 1.0));
                s.mu += Vector3::new(0.05, -0.04, 0.1);
                s.opacity_raw -= 0.4;
                s
            })
            .collect();
        (start, frame, cfg)
    }

    #[test]
    fn zero_iters_returns_input_unchanged() {
        let (start, frame, mut cfg) = toy_scene();
        cfg.params.iters = 0;
        let (out, report) = optimize_frame(start.clone(), &frame, &cfg);
        assert_eq!(out, start);
        assert_eq!(report.initial.total, report.final_loss.total);
    }

    #[test]
    fn toy_scene_halves_loss_in_200_iters() {
        let (start, frame, cfg) = toy_scene();
        let (_, report) = optimize_frame(start, &frame, &cfg);
        assert!(
            report.final_loss.total < 0.5 * report.initial.total,
            "initial {} final {}",
            report.initial.total,
            report.final_loss.total
        );
        assert!(!report.aborted);
    }

    #[test]
    fn iterates_keep_invariants() {
        let (start, frame, mut cfg) = toy_scene();
        cfg.params.iters = 60;
        let (out, _) = optimize_frame(start, &frame, &cfg);
        for g in &out {
            assert!((g.quat.norm() - 1.0).abs() < 1e-12);
            let s = g.scale(cfg.delta());
            assert!(s.iter().all(|&v| v > 0.0 && v < 2.0 * cfg.delta()));
            let a = g.opacity();
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn quartered_rates_never_increase_loss() {
        let (start, frame, mut cfg) = toy_scene();
        cfg.params.iters = 120;
        let opts = OptimizeOptions {
            rate_factor: 0.25,
            smoothing: false,
        };
        let (_, report) = optimize_frame_opts(start, &frame, &cfg, &opts);
        assert!(report.final_loss.total <= report.initial.total);
    }

    #[test]
    fn gaussian_converges_to_depth_surface() {
        // One Gaussian 0.5 m behind its depth-supervised surface.
        let mut cfg = cfg_with(700);
        cfg.params.smooth_every = 0;
        let mut truth = Gaussian::new(
            Vector3::new(0.0, 0.0, 5.0),
            0.7,
            Vector3::new(0.8, 0.4, 0.2),
            vec![1.0, 0.0],
            0,
        );
        truth.set_scale(cfg.delta(), Vector3::new(0.7, 0.7, 0.7));
        let mut v = view(28, 28);
        let out = render_view(&[truth.clone()], &v, &cfg);
        v.image = out.color.clone();
        for yi in 0..28 {
            for xi in 0..28 {
                let pix = yi * 28 + xi;
                if out.alpha[pix] > 0.3 {
                    v.depth_target.push(crate::core::DepthTarget {
                        u: xi as f64 + 0.5,
                        v: yi as f64 + 0.5,
                        depth: out.depth[pix],
                    });
                }
            }
        }
        let frame = FrameBundle {
            t: 0,
            points: Vec::new(),
            ego_pose: Matrix4::identity(),
            views: vec![v],
        };
        let mut start = truth.clone();
        start.mu.z += 0.5;
        let (refined, _) = optimize_frame(vec![start], &frame, &cfg);
        let err = (refined[0].mu - truth.mu).norm();
        assert!(err < 0.1, "converged to {} ({err} m off)", refined[0].mu);
    }

    #[test]
    fn non_finite_gradients_roll_back() {
        // A Gaussian with an absurd quaternion stays recoverable: corrupt the
        // state mid-run by feeding a frame whose view has NaN image values,
        // which poisons the loss immediately.
        let (start, mut frame, mut cfg) = toy_scene();
        cfg.params.iters = 5;
        frame.views[0].image[0] = f64::NAN;
        let (out, report) = optimize_frame(start.clone(), &frame, &cfg);
        // Loss is NaN from iteration 0 on: one recovery attempt, then abort
        // with the input returned (best-so-far never improves).
        assert!(report.recovered);
        assert!(report.aborted);
        assert_eq!(out.len(), start.len());
    }

    #[test]
    fn smoothing_runs_on_schedule() {
        let (mut start, frame, mut cfg) = toy_scene();
        cfg.params.iters = 10;
        cfg.params.smooth_every = 5;
        cfg.params.knn = 2;
        // Give the gaussians disagreeing semantics; smoothing pulls them
        // toward consensus, without it they stay put.
        start[0].sem = vec![1.0, 0.0];
        start[1].sem = vec![0.0, 1.0];
        start[2].sem = vec![1.0, 0.0];
        let (with_smooth, _) = optimize_frame(start.clone(), &frame, &cfg);
        let (without, _) = optimize_frame_opts(
            start.clone(),
            &frame,
            &cfg,
            &OptimizeOptions {
                rate_factor: 1.0,
                smoothing: false,
            },
        );
        assert_eq!(without[0].sem, start[0].sem);
        assert!(with_smooth[0].sem != start[0].sem);
        let q: Vector4<f64> = with_smooth[0].quat;
        assert!((q.norm() - 1.0).abs() < 1e-12);
    }
}
