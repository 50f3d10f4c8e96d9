//! Trilateral RBF smoothing of Gaussian semantics over k-nearest neighbors.
//!
//! The kernel is a product of spatial (fused-covariance Mahalanobis),
//! radiometric (color), and semantic (KL) affinities. One smoothing pass
//! replaces every semantic vector with the kernel-weighted average over its
//! neighbors plus itself, computed synchronously from the pre-pass values.

use crate::core::{covariance, Gaussian, PipelineConfig};
use crate::spatial::KdTree;
use nalgebra::Vector3;
use rayon::prelude::*;

/// Probability floor applied to both distributions before the KL term;
/// one-hot inputs are the common case and would otherwise diverge.
pub const KL_FLOOR: f64 = 1e-8;

/// Bandwidths plus the scale-activation delta.
#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    pub sigma_mu: f64,
    pub sigma_c: f64,
    pub sigma_s: f64,
    pub delta: f64,
}

impl From<&PipelineConfig> for KernelParams {
    fn from(cfg: &PipelineConfig) -> Self {
        KernelParams {
            sigma_mu: cfg.params.sigma_mu,
            sigma_c: cfg.params.sigma_c,
            sigma_s: cfg.params.sigma_s,
            delta: cfg.grid.delta,
        }
    }
}

/// The `k` nearest other centers by Euclidean distance, ties broken by
/// smaller index; shrinks `k` when fewer are available.
pub fn knn(centers: &[Vector3<f64>], query_index: usize, k: usize) -> Vec<usize> {
    let tree = KdTree::build(centers);
    tree.knn(&centers[query_index], k, Some(query_index))
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// KL divergence after flooring both distributions and renormalizing.
pub fn floored_kl(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let fp: Vec<f64> = p.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let fq: Vec<f64> = q.iter().map(|&v| v.max(KL_FLOOR)).collect();
    let zp: f64 = fp.iter().sum();
    let zq: f64 = fq.iter().sum();
    fp.iter()
        .zip(&fq)
        .map(|(&a, &b)| {
            let pa = a / zp;
            pa * (pa / (b / zq)).ln()
        })
        .sum()
}

/// Trilateral kernel value in (0,1]; exactly 1 for a Gaussian against itself.
pub fn trbf_kernel(gi: &Gaussian, gj: &Gaussian, params: &KernelParams) -> f64 {
    let si_inv = covariance(gi, params.delta)
        .try_inverse()
        .expect("covariance SPD");
    let sj_inv = covariance(gj, params.delta)
        .try_inverse()
        .expect("covariance SPD");
    trbf_kernel_pre(gi, &si_inv, gj, &sj_inv, params)
}

/// Kernel with precomputed covariance inverses (the fused covariance is
/// `(Si^-1 + Sj^-1)^-1`, so only the sum of inverses is needed).
fn trbf_kernel_pre(
    gi: &Gaussian,
    si_inv: &nalgebra::Matrix3<f64>,
    gj: &Gaussian,
    sj_inv: &nalgebra::Matrix3<f64>,
    params: &KernelParams,
) -> f64 {
    let d = gi.mu - gj.mu;
    let q_spatial = (d.transpose() * (si_inv + sj_inv) * d)[0];
    let k_spatial = (-q_spatial / (2.0 * params.sigma_mu * params.sigma_mu)).exp();
    let dc = gi.color - gj.color;
    let k_radio = (-dc.norm_squared() / (2.0 * params.sigma_c * params.sigma_c)).exp();
    let k_sem = (-floored_kl(&gi.sem, &gj.sem) / (2.0 * params.sigma_s * params.sigma_s)).exp();
    k_spatial * k_radio * k_sem
}

/// One synchronous smoothing pass over all semantic vectors. The self term
/// is always included, so the normalizer is at least 1 and an isolated
/// Gaussian is a fixed point.
pub fn smooth_semantics(gaussians: &mut [Gaussian], params: &KernelParams, k: usize) {
    if gaussians.is_empty() {
        return;
    }
    let centers: Vec<Vector3<f64>> = gaussians.iter().map(|g| g.mu).collect();
    let tree = KdTree::build(&centers);
    let inverses: Vec<nalgebra::Matrix3<f64>> = gaussians
        .par_iter()
        .map(|g| {
            covariance(g, params.delta)
                .try_inverse()
                .expect("covariance SPD")
        })
        .collect();

    let new_sems: Vec<Vec<f64>> = (0..gaussians.len())
        .into_par_iter()
        .map(|i| {
            let gi = &gaussians[i];
            let mut acc: Vec<f64> = gi.sem.clone(); // self term, kernel 1
            let mut z = 1.0;
            for (j, _) in tree.knn(&centers[i], k, Some(i)) {
                let gj = &gaussians[j];
                let kij = trbf_kernel_pre(gi, &inverses[i], gj, &inverses[j], params);
                for (a, m) in acc.iter_mut().zip(&gj.sem) {
                    *a += kij * m;
                }
                z += kij;
            }
            let total: f64 = acc.iter().sum();
            // Renormalize via the actual sum; z equals it up to rounding
            // because every m_j sums to 1.
            let norm = if total > 0.0 { total } else { z };
            acc.iter_mut().for_each(|a| *a /= norm);
            acc
        })
        .collect();

    for (g, sem) in gaussians.iter_mut().zip(new_sems) {
        g.sem = sem;
    }
}
