//! Sequence driver: per-frame lift, move, optimize, voxelize, with config
//! loading, artifact output, and optional metrics against ground truth.
//!
//! The config is a TOML file; command-line flags override individual knobs.
//! Frames are processed strictly in order (the static queue and scene flow
//! chain frame to frame); everything inside a frame is deterministic, so two
//! runs over the same inputs produce bit-identical grid and metrics files.

use crate::core::{FrameBundle, Gaussian, GridSpec, PipelineConfig, PipelineParams, VoxelGrid};
use crate::flow::{
    enqueue_static, propagate_dynamic, scene_flow, FlowField, FlowParams, StaticQueue,
};
use crate::ingest::{load_frame, read_frame_vocab, ClassVocabulary};
use crate::lift::instantiate_gaussians;
use crate::optimize::{optimize_frame_opts, OptimizeOptions};
use crate::splat::render_view;
use crate::voxelize::{read_grid, read_mask, voxelize_full, write_grid, write_ply};
use crate::{eval, Error, Result};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Deserialize)]
struct GridConfig {
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    delta: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct ConfigFile {
    input_dir: String,
    output_dir: String,
    grid: GridConfig,
    #[serde(default)]
    params: PipelineParams,
    #[serde(default)]
    flow: FlowParams,
}

/// Everything `run_sequence` needs: the config file plus flag overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: PathBuf,
    /// Output-resolution override (the working grid keeps the configured
    /// delta for initialization and scale activation).
    pub delta: Option<f64>,
    pub iters: Option<usize>,
    pub knn: Option<usize>,
    pub tau: Option<f64>,
    /// Treat every previous Gaussian as static (ablates motion handling).
    pub no_flow: bool,
    /// Skip the periodic semantic smoothing passes.
    pub no_smooth: bool,
    /// Center-scatter voxelization fallback.
    pub no_scale_voxel: bool,
    pub dump_renders: bool,
    pub dump_ply: bool,
    pub dump_loss_log: bool,
    pub gt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub frames: usize,
    pub skipped: usize,
    pub grid_files: Vec<PathBuf>,
    /// Per-frame masked mIoU when ground truth was available.
    pub miou: Vec<Option<f64>>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Runs the full pipeline over `frame_****` directories under the configured
/// input directory. Returns the summary; per-frame failures are logged and
/// skipped.
pub fn run_sequence(opts: &RunOptions) -> Result<RunSummary> {
    let raw = std::fs::read_to_string(&opts.config_path)
        .map_err(|e| Error::io(&opts.config_path, e))?;
    let file: ConfigFile = toml::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", opts.config_path.display())))?;

    let mut params = file.params;
    if let Some(v) = opts.iters {
        params.iters = v;
    }
    if let Some(v) = opts.knn {
        params.knn = v;
    }
    if let Some(v) = opts.tau {
        params.tau_static = v;
    }
    let working_grid = GridSpec::new(
        file.grid.x_range,
        file.grid.y_range,
        file.grid.z_range,
        file.grid.delta,
        0,
    );
    validate_grid(&working_grid)?;
    let mut cfg = PipelineConfig {
        grid: working_grid,
        params,
    };
    let out_delta = opts.delta.unwrap_or(working_grid.delta);
    if out_delta <= 0.0 {
        return Err(Error::Validation("delta override must be positive".into()));
    }

    let input_dir = PathBuf::from(&file.input_dir);
    let output_dir = PathBuf::from(&file.output_dir);
    std::fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
    let frame_dirs = discover_frames(&input_dir)?;
    if frame_dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no frame_* directories under {}",
            input_dir.display()
        )));
    }

    let mut vocab = ClassVocabulary::new(Vec::new())?;
    let mut queue = StaticQueue::new(&cfg.grid);
    let mut prev: Vec<Gaussian> = Vec::new();
    let mut summary = RunSummary::default();
    let mut timers: BTreeMap<&'static str, f64> = BTreeMap::new();
    let evict_radius = {
        let (x0, x1) = cfg.grid.x_range;
        let (y0, y1) = cfg.grid.y_range;
        ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
    };

    for dir in &frame_dirs {
        let mut tick = Instant::now();
        let mut stage = |timers: &mut BTreeMap<&'static str, f64>, name: &'static str| {
            let dt = tick.elapsed().as_secs_f64();
            *timers.entry(name).or_default() += dt;
            tick = Instant::now();
        };

        let frame_vocab = match read_frame_vocab(dir) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", dir.display());
                summary.skipped += 1;
                continue;
            }
        };
        vocab.merge(&frame_vocab);
        let c = vocab.num_classes();
        cfg.grid.num_classes = c;
        for g in prev.iter_mut() {
            if g.sem.len() < c {
                g.sem.resize(c, 0.0);
            }
        }
        queue.pad_classes(c);

        let bundle = match load_frame(dir, &vocab) {
            Ok(b) => b,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", dir.display());
                summary.skipped += 1;
                continue;
            }
        };
        stage(&mut timers, "load");

        let mut current = instantiate_gaussians(&bundle, &cfg);
        stage(&mut timers, "lift");

        if !prev.is_empty() {
            let field = if opts.no_flow {
                FlowField::zero(prev.len())
            } else {
                scene_flow(&prev, &current, &file.flow)
            };
            propagate_dynamic(&prev, &field, &mut current, cfg.params.tau_static, bundle.t);
            enqueue_static(&prev, &field, cfg.params.tau_static, &mut queue);
        }
        stage(&mut timers, "flow");

        let (refined, report) = optimize_frame_opts(
            current,
            &bundle,
            &cfg,
            &OptimizeOptions {
                rate_factor: 1.0,
                smoothing: !opts.no_smooth,
            },
        );
        let current = refined;
        stage(&mut timers, "optimize");

        queue.evict_beyond(&bundle.ego_position(), evict_radius);
        let out_spec = GridSpec::new(
            cfg.grid.x_range,
            cfg.grid.y_range,
            cfg.grid.z_range,
            out_delta,
            c,
        );
        let grid = voxelize_full(&current, &queue, &out_spec, &cfg, !opts.no_scale_voxel, false);
        stage(&mut timers, "voxelize");

        let grid_path = output_dir.join(format!("occ_{:04}.bin", bundle.t));
        write_grid(&grid_path, &grid, &vocab.names, bundle.t)?;
        summary.grid_files.push(grid_path);

        if opts.dump_renders {
            dump_renders(&output_dir, &bundle, &current, &cfg)?;
        }
        if opts.dump_ply {
            write_ply(
                &output_dir.join(format!("gaussians_{:04}.ply", bundle.t)),
                &current,
            )?;
        }
        if opts.dump_loss_log {
            let mut log = String::from("iter,loss_photo,loss_depth\n");
            for (i, l) in report.history.iter().enumerate() {
                log.push_str(&format!("{i},{},{}\n", l.photo, l.depth));
            }
            let p = output_dir.join(format!("loss_{:04}.csv", bundle.t));
            std::fs::write(&p, log).map_err(|e| Error::io(&p, e))?;
        }

        let miou = match &opts.gt_dir {
            Some(gt_dir) => match frame_metrics(&output_dir, gt_dir, &grid, &vocab, bundle.t) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("warning: metrics for frame {}: {e}", bundle.t);
                    None
                }
            },
            None => None,
        };
        summary.miou.push(miou);
        stage(&mut timers, "output");

        println!(
            "frame {:04}: {} gaussians, queue {}, loss {:.4} -> {:.4}{}",
            bundle.t,
            current.len(),
            queue.len(),
            report.initial.total,
            report.final_loss.total,
            miou.map(|m| format!(", miou {m:.3}")).unwrap_or_default()
        );
        summary.frames += 1;
        prev = current;
    }

    for (k, v) in &timers {
        summary.stage_seconds.insert((*k).into(), *v);
    }
    let stage_line: Vec<String> = summary
        .stage_seconds
        .iter()
        .map(|(k, v)| format!("{k} {v:.2}s"))
        .collect();
    println!(
        "done: {} frames ({} skipped); {}",
        summary.frames,
        summary.skipped,
        stage_line.join(", ")
    );
    let summary_json = serde_json::json!({
        "frames": summary.frames,
        "skipped": summary.skipped,
        "miou": summary.miou,
        "stage_seconds": summary.stage_seconds,
    });
    let sp = output_dir.join("summary.json");
    std::fs::write(&sp, serde_json::to_string_pretty(&summary_json).unwrap())
        .map_err(|e| Error::io(&sp, e))?;
    Ok(summary)
}

fn validate_grid(g: &GridSpec) -> Result<()> {
    if g.delta <= 0.0
        || g.x_range.1 <= g.x_range.0
        || g.y_range.1 <= g.y_range.0
        || g.z_range.1 <= g.z_range.0
    {
        return Err(Error::Validation(
            "grid ranges must be increasing and delta positive".into(),
        ));
    }
    Ok(())
}

fn discover_frames(input_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map_or(false, |n| n.starts_with("frame_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Scores one frame against `gt_dir/occ_<t>.bin` (and `mask_<t>.bin` when
/// present), writing `metrics_<t>.json`. Class matching is by name, so a
/// grid produced under a smaller open vocabulary still scores correctly.
fn frame_metrics(
    output_dir: &Path,
    gt_dir: &Path,
    pred: &VoxelGrid,
    vocab: &ClassVocabulary,
    t: usize,
) -> Result<Option<f64>> {
    let gt_path = gt_dir.join(format!("occ_{t:04}.bin"));
    if !gt_path.is_file() {
        return Ok(None);
    }
    let (gt, gt_classes, _) = read_grid(&gt_path)?;
    // Relabel the prediction into the ground truth's class space.
    let mut table = vec![0u8; vocab.num_classes() + 1];
    for (i, name) in vocab.names.iter().enumerate() {
        if let Some(pos) = gt_classes.iter().position(|n| n == name) {
            table[i + 1] = (pos + 1) as u8;
        }
    }
    let relabeled = VoxelGrid {
        spec: gt.spec,
        labels: pred
            .labels
            .iter()
            .map(|&l| table.get(l as usize).copied().unwrap_or(0))
            .collect(),
        probs: None,
    };
    if relabeled.labels.len() != gt.labels.len() {
        return Err(Error::SpecMismatch(
            "prediction and ground truth dims differ".into(),
        ));
    }
    let mask_path = gt_dir.join(format!("mask_{t:04}.bin"));
    let mask = if mask_path.is_file() {
        Some(read_mask(&mask_path)?.1)
    } else {
        None
    };
    let report = eval::iou_per_class(&relabeled, &gt, mask.as_deref())?;
    let json = eval::metrics_json(&report, &gt_classes, t);
    let mp = output_dir.join(format!("metrics_{t:04}.json"));
    std::fs::write(&mp, serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| Error::io(&mp, e))?;
    Ok(report.miou)
}

fn dump_renders(
    output_dir: &Path,
    bundle: &FrameBundle,
    gaussians: &[Gaussian],
    cfg: &PipelineConfig,
) -> Result<()> {
    let rdir = output_dir.join("renders");
    std::fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
    for (vi, view) in bundle.views.iter().enumerate() {
        let out = render_view(gaussians, view, cfg);
        let color: Vec<u8> = out
            .color
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(view.width as u32, view.height as u32, color)
                .expect("buffer size");
        let cp = rdir.join(format!("frame_{:04}_view_{}_color.png", bundle.t, vi));
        img.save(&cp)
            .map_err(|e| Error::Format(format!("{}: {e}", cp.display())))?;
        // Depth in millimeters, 16-bit.
        let depth: Vec<u16> = out
            .depth
            .iter()
            .map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let dimg: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(view.width as u32, view.height as u32, depth)
                .expect("buffer size");
        let dp = rdir.join(format!("frame_{:04}_view_{}_depth.png", bundle.t, vi));
        dimg.save(&dp)
            .map_err(|e| Error::Format(format!("{}: {e}", dp.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{standard_scene, write_scene, WriteOptions};

    fn write_config(dir: &Path, input: &Path, output: &Path, extra: &str) -> PathBuf {
        let cfg = format!(
            r#"
input_dir = "{}"
output_dir = "{}"

[grid]
x_range = [2.0, 11.6]
y_range = [-3.2, 3.2]
z_range = [-0.1, 1.3]
delta = 0.2

[params]
iters = 2
{extra}
"#,
            input.display(),
            output.display()
        );
        let p = dir.join("run.toml");
        std::fs::write(&p, cfg).unwrap();
        p
    }

    #[test]
    fn malformed_config_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "input_dir = [1,2]").unwrap();
        let opts = RunOptions {
            config_path: p,
            ..Default::default()
        };
        assert!(run_sequence(&opts).is_err());
    }

    #[test]
    fn short_run_produces_grids_and_skips_bad_frames() {
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        let out_dir = dir.path().join("out");
        let spec = standard_scene(2);
        write_scene(&spec, &scene_dir, &WriteOptions::default()).unwrap();
        // A corrupt extra frame directory must be skipped, not fatal.
        std::fs::create_dir_all(scene_dir.join("frame_0002")).unwrap();
        let cfg_path = write_config(dir.path(), &scene_dir, &out_dir, "");
        let opts = RunOptions {
            config_path: cfg_path,
            gt_dir: Some(scene_dir.join("gt")),
            ..Default::default()
        };
        let summary = run_sequence(&opts).unwrap();
        assert_eq!(summary.frames, 2);
        assert_eq!(summary.skipped, 1);
        assert!(out_dir.join("occ_0000.bin").is_file());
        assert!(out_dir.join("occ_0001.bin").is_file());
        assert!(out_dir.join("metrics_0001.json").is_file());
        assert!(out_dir.join("summary.json").is_file());
        assert!(summary.miou[0].is_some());
    }

    #[test]
    fn delta_override_scales_output_dims() {
        let dir = tempfile::tempdir().unwrap();
        let scene_dir = dir.path().join("scene");
        let out_dir = dir.path().join("out");
        let spec = standard_scene(1);
        write_scene(&spec, &scene_dir, &WriteOptions { write_gt: false, ..Default::default() })
            .unwrap();
        let cfg_path = write_config(dir.path(), &scene_dir, &out_dir, "");
        let opts = RunOptions {
            config_path: cfg_path,
            delta: Some(0.1),
            iters: Some(0),
            ..Default::default()
        };
        run_sequence(&opts).unwrap();
        let (grid, _, _) = read_grid(&out_dir.join("occ_0000.bin")).unwrap();
        assert_eq!(grid.spec.dims(), (96, 64, 14));
    }
}
