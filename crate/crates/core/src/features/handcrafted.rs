use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use ndarray::Array2;

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::spatial::{knn, NeighborTable};

/// Number of local geometry features per point.
pub const HANDCRAFTED_DIM: usize = 10;

/// Column order of [`handcrafted_features`].
pub const HANDCRAFTED_NAMES: [&str; HANDCRAFTED_DIM] = [
    "change_of_curvature",
    "linearity",
    "planarity",
    "scattering",
    "omnivariance",
    "eigenentropy",
    "density",
    "verticality",
    "height",
    "mean_neighbor_distance",
];

/// Local eigen-structure features over each point's `k`-neighbourhood.
pub fn handcrafted_features(cloud: &PointCloud, k: usize) -> Result<Array2<f64>> {
    let neighbors = knn(cloud, k)?;
    Ok(handcrafted_from_neighbors(cloud, &neighbors))
}

/// Same as [`handcrafted_features`] with a precomputed neighbour table.
pub fn handcrafted_from_neighbors(cloud: &PointCloud, neighbors: &NeighborTable) -> Array2<f64> {
    let n = cloud.len();
    let k = neighbors.k;
    let min_z = cloud.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let mut out = Array2::zeros((n, HANDCRAFTED_DIM));
    for i in 0..n {
        let p = cloud.points[i];
        let nbrs = neighbors.neighbors(i);

        // the point plus its neighbours
        let mut mean = p;
        for &j in nbrs {
            mean += cloud.points[j];
        }
        mean /= (k + 1) as f64;
        let mut cov = (p - mean) * (p - mean).transpose();
        let mut radius: f64 = 0.0;
        let mut dist_sum = 0.0;
        for &j in nbrs {
            let q = cloud.points[j];
            cov += (q - mean) * (q - mean).transpose();
            let d = (q - p).norm();
            radius = radius.max(d);
            dist_sum += d;
        }
        cov /= (k + 1) as f64;

        let mut row = out.row_mut(i);
        let (l1, l2, l3, normal) = sorted_eigen(&cov);
        let sum = l1 + l2 + l3;
        if radius > 0.0 && l1 > 1e-12 * radius * radius {
            row[0] = l3 / sum;
            row[1] = (l1 - l2) / l1;
            row[2] = (l2 - l3) / l1;
            row[3] = l3 / l1;
            row[4] = (l1 * l2 * l3).cbrt();
            row[5] = -[l1, l2, l3]
                .iter()
                .map(|l| l / sum)
                .filter(|&e| e > 0.0)
                .map(|e| e * e.ln())
                .sum::<f64>();
            row[7] = normal.z.abs();
        }
        if radius > 0.0 {
            row[6] = k as f64 / (4.0 / 3.0 * std::f64::consts::PI * radius.powi(3));
        }
        row[8] = p.z - min_z;
        row[9] = dist_sum / k as f64;
    }
    out
}

/// Eigenvalues descending (clamped at zero) and the smallest eigenvector.
fn sorted_eigen(cov: &Matrix3<f64>) -> (f64, f64, f64, Vector3<f64>) {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = |i: usize| eig.eigenvalues[order[i]].max(0.0);
    (l(0), l(1), l(2), eig.eigenvectors.column(order[2]).into_owned())
}
