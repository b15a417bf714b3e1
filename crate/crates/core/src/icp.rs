//! Point-to-point ICP baseline.

use crate::error::{invalid, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::regnet::{weighted_procrustes, CorrespondenceSet};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once both the rotation angle (radians) and translation of the
    /// per-iteration update fall below this.
    pub convergence_eps: f64,
    pub max_correspondence_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_eps: 1e-8,
            max_correspondence_distance: f64::INFINITY,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.convergence_eps > 0.0) || !(self.max_correspondence_distance > 0.0) {
            return invalid("ICP settings must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    /// Maps the source onto the target.
    pub transform: RigidTransform,
    pub iterations: usize,
    pub rmse: f64,
}

/// Nearest-neighbour matches under `tf`; returns the pairs and their RMSE.
fn correspond(
    source: &PointCloud,
    target: &PointCloud,
    tree: &KdTree,
    tf: &RigidTransform,
    max_dist: f64,
) -> (CorrespondenceSet, f64) {
    let mut src = Vec::with_capacity(source.len());
    let mut dst = Vec::with_capacity(source.len());
    let mut sq = 0.0;
    for p in &source.points {
        let moved = tf.apply(p);
        let (d2, j) = tree.nearest(&[moved.x, moved.y, moved.z], 1, None)[0];
        if d2.sqrt() <= max_dist {
            src.push(*p);
            dst.push(target.points[j]);
            sq += d2;
        }
    }
    let rmse = if src.is_empty() { f64::INFINITY } else { (sq / src.len() as f64).sqrt() };
    (CorrespondenceSet::uniform(src, dst).expect("equal lengths"), rmse)
}

/// Alternates nearest-neighbour matching and Procrustes from `init`.
///
/// Returns the best transform seen, by RMSE of its own correspondences, and
/// the number of iterations run.
pub fn icp_register(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    cfg.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return invalid("ICP needs at least 3 points per cloud");
    }
    let tree = KdTree::from_points(&target.points);
    let mut current = *init;
    let (mut corr, mut rmse) = correspond(source, target, &tree, &current, cfg.max_correspondence_distance);
    let mut best = IcpResult {
        transform: current,
        iterations: 0,
        rmse,
    };
    for it in 1..=cfg.max_iterations {
        if corr.len() < 3 {
            break;
        }
        let next = weighted_procrustes(&corr)?;
        let (angle, shift) = current.difference(&next);
        current = next;
        let (c, r) = correspond(source, target, &tree, &current, cfg.max_correspondence_distance);
        corr = c;
        rmse = r;
        if rmse < best.rmse {
            best.transform = current;
            best.rmse = rmse;
        }
        best.iterations = it;
        if angle < cfg.convergence_eps && shift < cfg.convergence_eps {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::EulerZyx;

    fn blob(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_clouds_converge_in_one_iteration() {
        let c = blob(1, 200);
        let r = icp_register(&c, &c, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.rmse, 0.0);
        assert!((r.transform.rotation - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn small_perturbation_is_recovered() {
        let c = blob(2, 400);
        let truth = RigidTransform::from_euler(EulerZyx::new(1.0, 0.0, 0.0), Vector3::new(0.01, 0.0, 0.0));
        let t = c.transformed(&truth);
        let r = icp_register(&c, &t, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let (angle, shift) = r.transform.difference(&truth);
        assert!(angle < 1e-6 && shift < 1e-6, "{angle} {shift}");
        assert!(r.transform.is_proper(1e-9));
    }

    #[test]
    fn rejects_tiny_clouds_and_bad_config() {
        let c = blob(3, 2);
        assert!(icp_register(&c, &c, &RigidTransform::identity(), &IcpConfig::default()).is_err());
        let big = blob(3, 10);
        let cfg = IcpConfig {
            max_iterations: 0,
            ..IcpConfig::default()
        };
        assert!(icp_register(&big, &big, &RigidTransform::identity(), &cfg).is_err());
    }
}
