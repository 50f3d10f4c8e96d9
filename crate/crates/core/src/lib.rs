//! Test-time semantic occupancy from raw sensor streams.
//!
//! The pipeline lifts multi-view 2D semantics onto 3D Gaussians instantiated
//! from a LiDAR point cloud, tracks dynamics with per-cluster rigid scene
//! flow, refines the Gaussians against the images with a differentiable
//! splatting loss (plus periodic trilateral-RBF smoothing of the semantic
//! vectors), and voxelizes the result onto a labeled grid at any resolution.
//!
//! Per-frame stages, in order:
//!
//! 1. [`ingest`]  — load a frame bundle from disk, project LiDAR depth targets
//! 2. [`lift`]    — one Gaussian per occupied voxel cell, semantics from masks
//! 3. [`flow`]    — cluster-rigid scene flow, dynamic propagation, static queue
//! 4. [`optimize`] — gradient refinement on the [`splat`] loss with [`smooth`] passes
//! 5. [`voxelize`] — scale-aware scatter onto a labeled grid
//!
//! [`synth`] generates analytic scenes with exact ground truth for offline
//! verification, [`eval`] scores grids against ground truth, and [`cli`] binds
//! the stages into a sequence driver.

pub mod cli;
pub mod core;
pub mod eval;
pub mod flow;
pub mod ingest;
pub mod lift;
pub mod optimize;
pub mod smooth;
pub mod spatial;
pub mod splat;
pub mod synth;
pub mod voxelize;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("grid specs do not match: {0}")]
    SpecMismatch(String),
    #[error("empty point set for registration")]
    EmptyPointSet,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.display().to_string(),
            source,
        }
    }
}
