//! Command-line driver: run the occupancy pipeline over a frame sequence, or
//! generate a synthetic scene in the ingest layout.

use anyhow::Context;
use clap::{Parser, Subcommand};
use occsplat::cli::{run_sequence, RunOptions};
use occsplat::synth::{standard_scene, static_scene, write_scene, WriteOptions};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "occsplat", version, about = "Test-time semantic occupancy from LiDAR + cameras")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a frame sequence into per-frame occupancy grids.
    Run {
        /// TOML config with input/output dirs, grid, and parameters.
        #[arg(long)]
        config: PathBuf,
        /// Output voxel edge override, meters.
        #[arg(long)]
        delta: Option<f64>,
        /// Optimization iterations per frame.
        #[arg(long)]
        iters: Option<usize>,
        /// Smoothing neighbor count.
        #[arg(long)]
        knn: Option<usize>,
        /// Static/dynamic flow threshold, m/frame.
        #[arg(long)]
        tau: Option<f64>,
        /// Disable scene flow (all previous Gaussians treated as static).
        #[arg(long)]
        no_flow: bool,
        /// Disable periodic semantic smoothing.
        #[arg(long)]
        no_smooth: bool,
        /// Center-scatter voxelization instead of scale-aware kernels.
        #[arg(long)]
        no_scale_voxel: bool,
        /// Write rendered color/depth images per frame.
        #[arg(long)]
        dump_renders: bool,
        /// Write Gaussian centers as PLY per frame.
        #[arg(long)]
        dump_ply: bool,
        /// Write per-iteration loss CSVs.
        #[arg(long)]
        dump_loss_log: bool,
        /// Directory of ground-truth grids (occ_<t>.bin, optional
        /// mask_<t>.bin) for metrics output.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
    },
    /// Generate a synthetic scene in the ingest directory layout.
    Synth {
        /// Output directory for frame_**** subdirectories.
        #[arg(long)]
        out: PathBuf,
        /// Scene kind: "standard" (one parked, one moving box) or "static".
        #[arg(long, default_value = "standard")]
        scene: String,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// Mask label flip probability.
        #[arg(long)]
        label_noise: Option<f64>,
        /// Hide the moving-box class from the vocabulary before this frame.
        #[arg(long)]
        vocab_from: Option<usize>,
        /// Skip writing ground-truth grids and visibility masks.
        #[arg(long)]
        no_gt: bool,
    },
}

fn main() -> anyhow::Result<()> {
    match Args::parse().command {
        Command::Run {
            config,
            delta,
            iters,
            knn,
            tau,
            no_flow,
            no_smooth,
            no_scale_voxel,
            dump_renders,
            dump_ply,
            dump_loss_log,
            gt_dir,
        } => {
            let opts = RunOptions {
                config_path: config,
                delta,
                iters,
                knn,
                tau,
                no_flow,
                no_smooth,
                no_scale_voxel,
                dump_renders,
                dump_ply,
                dump_loss_log,
                gt_dir,
            };
            run_sequence(&opts).context("run failed")?;
            Ok(())
        }
        Command::Synth {
            out,
            scene,
            frames,
            label_noise,
            vocab_from,
            no_gt,
        } => {
            let mut spec = match scene.as_str() {
                "standard" => standard_scene(frames),
                "static" => static_scene(frames),
                other => anyhow::bail!("unknown scene '{other}' (use standard|static)"),
            };
            spec.label_noise = label_noise;
            let mut opts = WriteOptions {
                write_gt: !no_gt,
                ..Default::default()
            };
            if let Some(from) = vocab_from {
                opts.vocab_schedule = vec![(0, vec![1, 2]), (from, vec![1, 2, 3])];
            }
            write_scene(&spec, &out, &opts).context("scene generation failed")?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
    }
}
