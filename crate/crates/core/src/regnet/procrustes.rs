use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;

use super::epcor::EpcorResult;
use crate::error::{invalid, Error, Result};
use crate::geometry::{svd3, PointCloud, RigidTransform};

/// Source points paired with their soft matches in the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// Source row of each pair.
    pub indices: Vec<usize>,
    pub source: Vec<Vector3<f64>>,
    /// `p*_i = Σ_j W̃(i, j) q_j`.
    pub matched: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Uniform-weight pairs, indexed in order.
    pub fn uniform(source: Vec<Vector3<f64>>, matched: Vec<Vector3<f64>>) -> Result<Self> {
        if source.len() != matched.len() {
            return invalid("correspondence lists differ in length");
        }
        let n = source.len();
        Ok(Self {
            indices: (0..n).collect(),
            source,
            matched,
            weights: vec![1.0; n],
        })
    }
}

/// Soft matches for every selected source row, in the order of `result.k`.
pub fn soft_correspondences(result: &EpcorResult, q: &PointCloud, p: &PointCloud) -> Result<CorrespondenceSet> {
    let (n, m) = result.w_tilde.dim();
    if n != p.len() || m != q.len() {
        return invalid(format!("EPCOR result is {n}×{m} but clouds have {} and {} points", p.len(), q.len()));
    }
    let mut matched = Vec::with_capacity(result.k.len());
    for &i in &result.k {
        let row = result.w_tilde.row(i);
        let mut acc = Vector3::zeros();
        for &j in &result.k_q {
            let w = row[j];
            if w != 0.0 {
                acc += w * q.points[j];
            }
        }
        matched.push(acc);
    }
    Ok(CorrespondenceSet {
        indices: result.k.clone(),
        source: result.k.iter().map(|&i| p.points[i]).collect(),
        matched,
        weights: result.k.iter().map(|&i| result.c[i]).collect(),
    })
}

/// `dL/dW̃` given `dL/dp*` per correspondence.
pub fn soft_correspondences_backward(
    result: &EpcorResult,
    q: &PointCloud,
    dmatched: &[Vector3<f64>],
) -> Array2<f64> {
    let mut d = Array2::zeros(result.w_tilde.raw_dim());
    for (pair, &i) in result.k.iter().enumerate() {
        let g = dmatched[pair];
        for &j in &result.k_q {
            d[[i, j]] = g.dot(&q.points[j]);
        }
    }
    d
}

fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return invalid("correspondence weights must be finite and non-negative");
    }
    let total: f64 = crate::numeric::compensated_sum(weights.iter().copied());
    if !(total > 0.0) {
        return invalid("correspondence weights sum to zero");
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Rigid transform minimising `Σ ĉ_i ‖p*_i − (R p_i + t)‖²`.
pub fn weighted_procrustes(corr: &CorrespondenceSet) -> Result<RigidTransform> {
    if corr.source.len() != corr.matched.len() || corr.source.len() != corr.weights.len() {
        return invalid("correspondence arrays differ in length");
    }
    if corr.len() < 3 {
        return invalid("weighted Procrustes needs at least 3 pairs");
    }
    if corr.source.iter().chain(&corr.matched).any(|p| !p.iter().all(|v| v.is_finite())) {
        return invalid("correspondences must be finite");
    }
    let w = normalized_weights(&corr.weights)?;
    let mut mu_p = Vector3::zeros();
    let mut mu_q = Vector3::zeros();
    for ((p, q), &wi) in corr.source.iter().zip(&corr.matched).zip(&w) {
        mu_p += wi * p;
        mu_q += wi * q;
    }
    let mut h = Matrix3::zeros();
    for ((p, q), &wi) in corr.source.iter().zip(&corr.matched).zip(&w) {
        if wi != 0.0 {
            h += wi * (p - mu_p) * (q - mu_q).transpose();
        }
    }
    let svd = svd3(&h)?;
    if !(svd.s[1] > 1e-12 * svd.s[0]) {
        return Err(Error::DegenerateGeometry(
            "correspondence covariance has rank below 2".into(),
        ));
    }
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let r = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.u.transpose();
    Ok(RigidTransform::new(r, mu_q - r * mu_p))
}

/// `(Σc)⁻¹ Σ c_i ‖p*_i − (R p_i + t)‖` (not squared).
pub fn registration_loss(corr: &CorrespondenceSet, est: &RigidTransform) -> Result<f64> {
    registration_loss_grad(corr, est).map(|g| g.loss)
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    /// `dL/dc_i` for the raw (un-normalised) weights.
    pub dweights: Vec<f64>,
    /// `dL/dp*_i`.
    pub dmatched: Vec<Vector3<f64>>,
}

/// Loss and its gradient with the transform held fixed.
pub fn registration_loss_grad(corr: &CorrespondenceSet, est: &RigidTransform) -> Result<LossGradient> {
    if corr.source.len() != corr.matched.len() || corr.source.len() != corr.weights.len() {
        return invalid("correspondence arrays differ in length");
    }
    if corr.is_empty() {
        return invalid("registration loss of an empty correspondence set");
    }
    let total: f64 = crate::numeric::compensated_sum(corr.weights.iter().copied());
    if !(total > 0.0) {
        return invalid("correspondence weights sum to zero");
    }
    let residuals: Vec<Vector3<f64>> = corr
        .source
        .iter()
        .zip(&corr.matched)
        .map(|(p, q)| q - est.apply(p))
        .collect();
    let norms: Vec<f64> = residuals.iter().map(|e| e.norm()).collect();
    let loss = crate::numeric::compensated_sum(corr.weights.iter().zip(&norms).map(|(c, e)| c * e)) / total;
    let dweights = norms.iter().map(|e| (e - loss) / total).collect();
    let dmatched = residuals
        .iter()
        .zip(&norms)
        .zip(&corr.weights)
        .map(|((e, &n), &c)| if n > 0.0 { e * (c / (total * n)) } else { Vector3::zeros() })
        .collect();
    Ok(LossGradient {
        loss,
        dweights,
        dmatched,
    })
}
