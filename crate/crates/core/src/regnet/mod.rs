//! Structure-aware registration.
//!
//! Point features from both clouds go through a light-weight attention
//! module ([`lam`]), are compared by ℓ2 distance ([`match_matrix`]), pruned
//! by confidence ([`epcor`]), turned into soft matches
//! ([`soft_correspondences`]) and solved by weighted Procrustes. The loss is
//! the confidence-weighted mean residual norm under the estimate.
//!
//! Matching scores are `-W / τ`; softmaxing raw distances would reward the
//! worst matches.

mod epcor;
mod lam;
mod procrustes;

pub use epcor::{
    epcor, epcor_backward, epcor_with, match_matrix, match_matrix_backward, EpcorResult, MatchMatrix, DEFAULT_TAU,
};
pub use lam::{lam, lam_backward, lam_forward, quadratic_attention_reference, LamCache, LamParams};
pub use procrustes::{
    registration_loss, registration_loss_grad, soft_correspondences, soft_correspondences_backward,
    weighted_procrustes, CorrespondenceSet, LossGradient,
};

use nalgebra::Vector3;
use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::features::{feature_map_forward, CloudInputs, FeatureParams};
use crate::geometry::{PointCloud, RigidTransform};
use crate::optim::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegNetConfig {
    /// `K = ⌈k_frac · min(N, N_q)⌉`.
    pub k_frac: f64,
    pub tau: f64,
    /// `false` disables outlier removal (all rows, uniform confidence).
    pub masking: bool,
    /// Neighbourhood size of the feature stage.
    pub knn: usize,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            k_frac: 0.5,
            tau: DEFAULT_TAU,
            masking: true,
            knn: 20,
        }
    }
}

impl RegNetConfig {
    pub fn big_k(&self, n: usize, n_q: usize) -> Result<usize> {
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) {
            return invalid("k fraction must lie in (0, 1]");
        }
        let m = n.min(n_q);
        Ok(((self.k_frac * m as f64).ceil() as usize).clamp(1, m.max(1)))
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationOutput {
    /// Maps `P` onto `Q`.
    pub transform: RigidTransform,
    pub epcor: EpcorResult,
    pub correspondences: CorrespondenceSet,
    pub loss: f64,
}

/// Everything needed to backpropagate the loss to point features.
#[derive(Debug, Clone)]
pub struct RegistrationTrace {
    pub output: RegistrationOutput,
    z_p: Array2<f64>,
    z_q: Array2<f64>,
    matches: MatchMatrix,
    lam_cache: Option<LamCache>,
    grad: LossGradient,
}

/// Point coordinates as a feature matrix.
pub fn coordinate_features(points: &[Vector3<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i][j])
}

/// Pipeline from point features on; `lam = None` skips attention.
///
/// `fixed` replaces the Procrustes estimate in the loss.
pub fn register_trace(
    p: &PointCloud,
    q: &PointCloud,
    psi_p: &Array2<f64>,
    psi_q: &Array2<f64>,
    lam_params: Option<&LamParams>,
    cfg: &RegNetConfig,
    fixed: Option<&RigidTransform>,
) -> Result<RegistrationTrace> {
    if psi_p.nrows() != p.len() || psi_q.nrows() != q.len() {
        return invalid("feature rows do not match the clouds");
    }
    let (z_p, z_q, lam_cache) = match lam_params {
        Some(lp) => {
            let (a, b, c) = lam_forward(psi_p, psi_q, lp)?;
            (a, b, Some(c))
        }
        None => (psi_p.clone(), psi_q.clone(), None),
    };
    let matches = match_matrix(&z_p, &z_q, cfg.tau)?;
    let big_k = cfg.big_k(p.len(), q.len())?;
    let ep = epcor_with(&matches, big_k, cfg.masking)?;
    let corr = soft_correspondences(&ep, q, p)?;
    let transform = match fixed {
        Some(t) => *t,
        None => weighted_procrustes(&corr)?,
    };
    let grad = registration_loss_grad(&corr, &transform)?;
    Ok(RegistrationTrace {
        output: RegistrationOutput {
            transform,
            loss: grad.loss,
            epcor: ep,
            correspondences: corr,
        },
        z_p,
        z_q,
        matches,
        lam_cache,
        grad,
    })
}

/// `(dψ_P, dψ_Q)` of the loss; attention gradients accumulate into `grad_lam`.
pub fn register_backward(
    trace: &RegistrationTrace,
    q: &PointCloud,
    lam_params: Option<&LamParams>,
    grad_lam: Option<&mut LamParams>,
) -> (Array2<f64>, Array2<f64>) {
    let ep = &trace.output.epcor;
    let dw_tilde = soft_correspondences_backward(ep, q, &trace.grad.dmatched);
    let mut dc = vec![0.0; ep.c.len()];
    for (pair, &i) in ep.k.iter().enumerate() {
        dc[i] = trace.grad.dweights[pair];
    }
    let dw = epcor_backward(ep, &dw_tilde, &dc);
    let (dzp, dzq) = match_matrix_backward(&trace.z_p, &trace.z_q, &trace.matches, &dw);
    match (lam_params, trace.lam_cache.as_ref(), grad_lam) {
        (Some(lp), Some(cache), Some(g)) => lam_backward(lp, cache, &dzp, &dzq, g),
        (Some(lp), Some(cache), None) => {
            let mut scratch = lp.zeros_like();
            lam_backward(lp, cache, &dzp, &dzq, &mut scratch)
        }
        _ => (dzp, dzq),
    }
}

/// Registration from given point features.
pub fn register_features(
    p: &PointCloud,
    q: &PointCloud,
    psi_p: &Array2<f64>,
    psi_q: &Array2<f64>,
    lam_params: Option<&LamParams>,
    cfg: &RegNetConfig,
) -> Result<RegistrationOutput> {
    register_trace(p, q, psi_p, psi_q, lam_params, cfg, None).map(|t| t.output)
}

/// Full pipeline: handcrafted features, point network, attention, matching.
pub fn register(
    p: &PointCloud,
    q: &PointCloud,
    features: &FeatureParams,
    lam_params: &LamParams,
    cfg: &RegNetConfig,
) -> Result<RegistrationOutput> {
    let ip = CloudInputs::prepare(p, cfg.knn)?;
    let iq = CloudInputs::prepare(q, cfg.knn)?;
    let (psi_p, _) = feature_map_forward(&ip.raw, &ip.neighbors, features)?;
    let (psi_q, _) = feature_map_forward(&iq.raw, &iq.neighbors, features)?;
    register_features(p, q, &psi_p, &psi_q, Some(lam_params), cfg)
}

/// Debug mode: features are coordinates in a common frame.
///
/// `q_common` holds the target points in the source frame.
pub fn register_coordinates(
    p: &PointCloud,
    q: &PointCloud,
    q_common: &[Vector3<f64>],
    cfg: &RegNetConfig,
) -> Result<RegistrationOutput> {
    if q_common.len() != q.len() {
        return invalid("common-frame coordinates do not match the target");
    }
    let psi_p = coordinate_features(&p.points);
    let psi_q = coordinate_features(q_common);
    register_features(p, q, &psi_p, &psi_q, None, cfg)
}

#[cfg(test)]
mod tests;
