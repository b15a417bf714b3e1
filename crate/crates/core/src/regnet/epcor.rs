use ndarray::{Array2, Axis};

use crate::error::{invalid, Result};
use crate::numeric::{softmax_in_place, top_k_indices};

/// Default softmax temperature on feature distances.
pub const DEFAULT_TAU: f64 = 0.03;

/// Pairwise feature distances `W(i, j) = ‖z_P^i − z_Q^j‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    pub w: Array2<f64>,
    pub tau: f64,
}

impl MatchMatrix {
    pub fn new(w: Array2<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return invalid("temperature must be positive");
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("match matrix entries must be finite distances");
        }
        Ok(Self { w, tau })
    }

    pub fn rows(&self) -> usize {
        self.w.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w.ncols()
    }
}

pub fn match_matrix(z_p: &Array2<f64>, z_q: &Array2<f64>, tau: f64) -> Result<MatchMatrix> {
    if z_p.ncols() != z_q.ncols() {
        return invalid(format!("feature widths differ: {} vs {}", z_p.ncols(), z_q.ncols()));
    }
    if z_p.nrows() == 0 || z_q.nrows() == 0 {
        return invalid("match matrix needs non-empty feature matrices");
    }
    let (n, m) = (z_p.nrows(), z_q.nrows());
    let mut w = Array2::zeros((n, m));
    for (i, a) in z_p.rows().into_iter().enumerate() {
        let a = a.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| a.to_vec());
        for (j, b) in z_q.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
            w[[i, j]] = acc.sqrt();
        }
    }
    MatchMatrix::new(w, tau)
}

/// Output of the outlier-removal step.
#[derive(Debug, Clone)]
pub struct EpcorResult {
    /// Row-stochastic on rows `k`, zero elsewhere; zero outside columns `k_q`.
    pub w_tilde: Array2<f64>,
    /// Confidence per source row, zero outside `k`, `Σc = 1`.
    pub c: Vec<f64>,
    /// Column mass of the row softmax, per target column.
    pub r: Vec<f64>,
    /// Selected rows, ranked by confidence.
    pub k: Vec<usize>,
    /// Selected columns, ranked by `r`.
    pub k_q: Vec<usize>,
    pub big_k: usize,
    pub tau: f64,
    pub masking: bool,
    col_softmax: Array2<f64>,
    /// `Σ_{i∈k}` of the un-normalised confidences.
    raw_mass: f64,
}

/// Outlier removal with masking enabled.
pub fn epcor(w: &MatchMatrix, big_k: usize) -> Result<EpcorResult> {
    epcor_with(w, big_k, true)
}

/// With `masking == false` every row and column is kept, confidences are
/// uniform and `W̃` is the plain row softmax; `big_k` is then ignored.
pub fn epcor_with(w: &MatchMatrix, big_k: usize, masking: bool) -> Result<EpcorResult> {
    let (n, m) = w.w.dim();
    if masking && (big_k == 0 || big_k > n.min(m)) {
        return invalid(format!("K must lie in 1..={}, got {big_k}", n.min(m)));
    }
    let scores = w.w.mapv(|v| -v / w.tau);

    let mut row_sm = scores.clone();
    for mut row in row_sm.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    let r = row_sm.sum_axis(Axis(0)).to_vec();

    let mut col_sm = scores.clone().reversed_axes().as_standard_layout().into_owned();
    for mut col in col_sm.rows_mut() {
        softmax_in_place(col.as_slice_mut().expect("standard layout"));
    }
    let col_sm = col_sm.reversed_axes().as_standard_layout().into_owned();
    let c_raw = col_sm.sum_axis(Axis(1)).to_vec();

    if !masking {
        return Ok(EpcorResult {
            w_tilde: row_sm,
            c: vec![1.0 / n as f64; n],
            r,
            k: (0..n).collect(),
            k_q: (0..m).collect(),
            big_k: n,
            tau: w.tau,
            masking,
            col_softmax: col_sm,
            raw_mass: 1.0,
        });
    }

    let k = top_k_indices(&c_raw, big_k)?;
    let k_q = top_k_indices(&r, big_k)?;
    let mut col_keep = vec![false; m];
    for &j in &k_q {
        col_keep[j] = true;
    }
    let mut w_tilde = Array2::zeros((n, m));
    let mut buf = vec![0.0; m];
    for &i in &k {
        for j in 0..m {
            buf[j] = if col_keep[j] { scores[[i, j]] } else { f64::NEG_INFINITY };
        }
        softmax_in_place(&mut buf);
        for j in 0..m {
            w_tilde[[i, j]] = buf[j];
        }
    }
    let raw_mass: f64 = crate::numeric::compensated_sum(k.iter().map(|&i| c_raw[i]));
    let mut c = vec![0.0; n];
    for &i in &k {
        c[i] = c_raw[i] / raw_mass;
    }
    Ok(EpcorResult {
        w_tilde,
        c,
        r,
        k,
        k_q,
        big_k,
        tau: w.tau,
        masking,
        col_softmax: col_sm,
        raw_mass,
    })
}

impl EpcorResult {
    /// Largest violation of the structural invariants.
    pub fn invariant_error(&self) -> f64 {
        let (n, m) = self.w_tilde.dim();
        let mut err = (self.c.iter().sum::<f64>() - 1.0).abs();
        let nonzero = self.c.iter().filter(|&&v| v != 0.0).count();
        if self.masking && nonzero != self.big_k {
            return f64::INFINITY;
        }
        let mut in_k = vec![false; n];
        for &i in &self.k {
            in_k[i] = true;
        }
        let mut in_kq = vec![false; m];
        for &j in &self.k_q {
            in_kq[j] = true;
        }
        for i in 0..n {
            let row = self.w_tilde.row(i);
            if in_k[i] {
                err = err.max((row.sum() - 1.0).abs());
            } else if row.iter().any(|&v| v != 0.0) || self.c[i] != 0.0 {
                return f64::INFINITY;
            }
            for j in 0..m {
                if !in_kq[j] && row[j] != 0.0 {
                    return f64::INFINITY;
                }
            }
        }
        err
    }
}

/// Gradient w.r.t. the distance matrix given `dL/dW̃` and `dL/dc`.
///
/// Top-K selections are treated as constants.
pub fn epcor_backward(res: &EpcorResult, dw_tilde: &Array2<f64>, dc: &[f64]) -> Array2<f64> {
    let (n, m) = res.w_tilde.dim();
    let mut ds = Array2::<f64>::zeros((n, m));

    // masked row softmax on selected rows
    for &i in &res.k {
        let wt = res.w_tilde.row(i);
        let g = dw_tilde.row(i);
        let mean: f64 = wt.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for j in 0..m {
            if wt[j] != 0.0 {
                ds[[i, j]] += wt[j] * (g[j] - mean);
            }
        }
    }

    if res.masking {
        // c = normalise(rowsum(column softmax)) restricted to k
        let mut g_raw = vec![0.0; n];
        let mean: f64 = res.k.iter().map(|&i| res.c[i] * dc[i]).sum();
        for &i in &res.k {
            g_raw[i] = (dc[i] - mean) / res.raw_mass;
        }
        for j in 0..m {
            let col = res.col_softmax.column(j);
            let mean: f64 = col.iter().zip(&g_raw).map(|(a, b)| a * b).sum();
            for l in 0..n {
                ds[[l, j]] += col[l] * (g_raw[l] - mean);
            }
        }
    }
    ds.mapv_inplace(|v| -v / res.tau);
    ds
}

/// Backpropagates `dL/dW` to the feature rows.
pub fn match_matrix_backward(
    z_p: &Array2<f64>,
    z_q: &Array2<f64>,
    w: &MatchMatrix,
    dw: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut dzp = Array2::zeros(z_p.raw_dim());
    let mut dzq = Array2::zeros(z_q.raw_dim());
    let d = z_p.ncols();
    for ((i, j), &g) in dw.indexed_iter() {
        let dist = w.w[[i, j]];
        if g == 0.0 || dist == 0.0 {
            continue;
        }
        let a = g / dist;
        for c in 0..d {
            let diff = a * (z_p[[i, c]] - z_q[[j, c]]);
            dzp[[i, c]] += diff;
            dzq[[j, c]] -= diff;
        }
    }
    (dzp, dzq)
}
