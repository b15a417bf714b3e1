use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::features::DenseLayer;
use crate::io::NamedTensor;
use crate::numeric::softmax_in_place;
use crate::optim::{slice1, slice1_mut, slice2, slice2_mut, tensor1, ParamSet, TensorMap};

/// Light-weight attention: one learned query scores every point of the other
/// cloud; the resulting context vector is fused into each point feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LamParams {
    pub query: Array1<f64>,
    /// `2D → D`, rows `0..D` act on the point feature, `D..2D` on the context.
    pub fuse1: DenseLayer,
    /// `D → D`, linear.
    pub fuse2: DenseLayer,
}

impl LamParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / dim as f64).sqrt();
        let mut fuse2 = DenseLayer::new(dim, dim, false, rng);
        // start close to the residual path
        fuse2.weight *= 0.1;
        Self {
            query: Array1::from_shape_fn(dim, |_| rng.random_range(-bound..=bound)),
            fuse1: DenseLayer::new(2 * dim, dim, true, rng),
            fuse2,
        }
    }

    /// All-zero parameters: `z = ψ`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Array1::zeros(dim),
            fuse1: DenseLayer::zeros(2 * dim, dim, true),
            fuse2: DenseLayer::zeros(dim, dim, false),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.fuse1.fan_in() != 2 * d
            || self.fuse1.fan_out() != d
            || self.fuse2.fan_in() != d
            || self.fuse2.fan_out() != d
        {
            return invalid("attention parameters do not match the feature dimension");
        }
        Ok(())
    }

    pub fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = vec![tensor1(format!("{prefix}.q"), &self.query)];
        for (name, l) in [("f1", &self.fuse1), ("f2", &self.fuse2)] {
            out.push(crate::optim::tensor2(format!("{prefix}.{name}.w"), &l.weight));
            out.push(tensor1(format!("{prefix}.{name}.b"), &l.bias));
        }
        out
    }

    pub fn load(map: &TensorMap, prefix: &str) -> Result<Self> {
        let layer = |name: &str, activation: bool| -> Result<DenseLayer> {
            Ok(DenseLayer {
                weight: map.array2(&format!("{prefix}.{name}.w"))?,
                bias: map.array1(&format!("{prefix}.{name}.b"))?,
                activation,
            })
        };
        let p = Self {
            query: map.array1(&format!("{prefix}.q"))?,
            fuse1: layer("f1", true)?,
            fuse2: layer("f2", false)?,
        };
        p.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(p)
    }
}

impl ParamSet for LamParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("q", slice1(&self.query));
        f("f1.w", slice2(&self.fuse1.weight));
        f("f1.b", slice1(&self.fuse1.bias));
        f("f2.w", slice2(&self.fuse2.weight));
        f("f2.b", slice1(&self.fuse2.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("q", slice1_mut(&mut self.query));
        f("f1.w", slice2_mut(&mut self.fuse1.weight));
        f("f1.b", slice1_mut(&mut self.fuse1.bias));
        f("f2.w", slice2_mut(&mut self.fuse2.weight));
        f("f2.b", slice1_mut(&mut self.fuse2.bias));
    }
}

/// Intermediates of one side (`x` attended by the other cloud `y`).
#[derive(Debug, Clone)]
struct SideCache {
    attention: Array1<f64>,
    ctx: Array1<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LamCache {
    psi_p: Array2<f64>,
    psi_q: Array2<f64>,
    /// `P` attended with context from `Q`.
    p_side: SideCache,
    q_side: SideCache,
}

fn attend(y: &Array2<f64>, query: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let mut a = y.dot(query).to_vec();
    softmax_in_place(&mut a);
    let a = Array1::from_vec(a);
    let ctx = a.dot(y);
    (a, ctx)
}

fn fuse(x: &Array2<f64>, ctx: &Array1<f64>, params: &LamParams) -> (Array2<f64>, SideCache) {
    let d = params.dim();
    let w1 = &params.fuse1.weight;
    let offset = ctx.dot(&w1.slice(s![d.., ..])) + &params.fuse1.bias;
    let pre = x.dot(&w1.slice(s![..d, ..])) + &offset;
    let hidden = pre.mapv(|v| crate::numeric::leaky_relu(v, crate::features::LEAKY_SLOPE));
    let z = x + &(hidden.dot(&params.fuse2.weight) + &params.fuse2.bias);
    (
        z,
        SideCache {
            attention: Array1::zeros(0),
            ctx: ctx.clone(),
            pre,
            hidden,
        },
    )
}

fn check(psi_p: &Array2<f64>, psi_q: &Array2<f64>, params: &LamParams) -> Result<()> {
    params.validate()?;
    if psi_p.ncols() != params.dim() || psi_q.ncols() != params.dim() {
        return invalid(format!(
            "attention expects {}-d features, got {} and {}",
            params.dim(),
            psi_p.ncols(),
            psi_q.ncols()
        ));
    }
    if psi_p.nrows() == 0 || psi_q.nrows() == 0 {
        return invalid("attention needs non-empty feature matrices");
    }
    Ok(())
}

/// Returns `(z_P, z_Q)`; cost is linear in the number of points.
pub fn lam(psi_p: &Array2<f64>, psi_q: &Array2<f64>, params: &LamParams) -> Result<(Array2<f64>, Array2<f64>)> {
    check(psi_p, psi_q, params)?;
    let (_, ctx_q) = attend(psi_q, &params.query);
    let (_, ctx_p) = attend(psi_p, &params.query);
    Ok((fuse_output(psi_p, &ctx_q, params), fuse_output(psi_q, &ctx_p, params)))
}

/// Rows per tile of the forward-only fusion; keeps the scratch in cache.
const FUSE_TILE: usize = 256;

/// Same values as [`fuse`] without keeping intermediates, tile by tile.
fn fuse_output(x: &Array2<f64>, ctx: &Array1<f64>, params: &LamParams) -> Array2<f64> {
    let d = params.dim();
    let w1 = &params.fuse1.weight;
    let w1x = w1.slice(s![..d, ..]);
    let offset = ctx.dot(&w1.slice(s![d.., ..])) + &params.fuse1.bias;
    let mut z = x.clone();
    let mut h = Array2::<f64>::zeros((FUSE_TILE.min(x.nrows()), w1.ncols()));
    for (xt, mut zt) in x
        .axis_chunks_iter(Axis(0), FUSE_TILE)
        .zip(z.axis_chunks_iter_mut(Axis(0), FUSE_TILE))
    {
        let mut ht = h.slice_mut(s![..xt.nrows(), ..]);
        general_mat_mul(1.0, &xt, &w1x, 0.0, &mut ht);
        for mut row in ht.rows_mut() {
            row.zip_mut_with(&offset, |v, &o| *v = crate::numeric::leaky_relu(*v + o, crate::features::LEAKY_SLOPE));
        }
        zt += &params.fuse2.bias;
        general_mat_mul(1.0, &ht, &params.fuse2.weight, 1.0, &mut zt);
    }
    z
}

pub fn lam_forward(
    psi_p: &Array2<f64>,
    psi_q: &Array2<f64>,
    params: &LamParams,
) -> Result<(Array2<f64>, Array2<f64>, LamCache)> {
    check(psi_p, psi_q, params)?;
    let (a_q, ctx_q) = attend(psi_q, &params.query);
    let (a_p, ctx_p) = attend(psi_p, &params.query);
    let (zp, mut p_side) = fuse(psi_p, &ctx_q, params);
    let (zq, mut q_side) = fuse(psi_q, &ctx_p, params);
    p_side.attention = a_q;
    q_side.attention = a_p;
    Ok((
        zp,
        zq,
        LamCache {
            psi_p: psi_p.clone(),
            psi_q: psi_q.clone(),
            p_side,
            q_side,
        },
    ))
}

/// Backward through one side; returns `(dx, dy)` contributions.
fn side_backward(
    x: &Array2<f64>,
    y: &Array2<f64>,
    side: &SideCache,
    dz: &Array2<f64>,
    params: &LamParams,
    grad: &mut LamParams,
) -> (Array2<f64>, Array2<f64>) {
    let d = params.dim();
    let mut dx = dz.clone();
    grad.fuse2.weight += &side.hidden.t().dot(dz);
    grad.fuse2.bias += &dz.sum_axis(Axis(0));
    let mut dpre = dz.dot(&params.fuse2.weight.t());
    dpre.zip_mut_with(&side.pre, |g, &p| {
        *g *= crate::numeric::leaky_relu_grad(p, crate::features::LEAKY_SLOPE)
    });
    let w1 = &params.fuse1.weight;
    {
        let mut gw = grad.fuse1.weight.slice_mut(s![..d, ..]);
        gw += &x.t().dot(&dpre);
    }
    dx += &dpre.dot(&w1.slice(s![..d, ..]).t());
    let dsum = dpre.sum_axis(Axis(0));
    grad.fuse1.bias += &dsum;
    {
        let mut gw = grad.fuse1.weight.slice_mut(s![d.., ..]);
        for (i, &ci) in side.ctx.iter().enumerate() {
            let mut row = gw.row_mut(i);
            row.scaled_add(ci, &dsum);
        }
    }
    let dctx = w1.slice(s![d.., ..]).dot(&dsum);

    // ctx = Σ a_j y_j with a = softmax(y q)
    let a = &side.attention;
    let da = y.dot(&dctx);
    let mean = a.dot(&da);
    let dscore = a * &(&da - mean);
    grad.query += &dscore.dot(y);
    let mut dy = Array2::zeros(y.raw_dim());
    for (j, mut row) in dy.rows_mut().into_iter().enumerate() {
        row.scaled_add(a[j], &dctx);
        row.scaled_add(dscore[j], &params.query);
    }
    (dx, dy)
}

/// Accumulates parameter gradients and returns `(dψ_P, dψ_Q)`.
pub fn lam_backward(
    params: &LamParams,
    cache: &LamCache,
    dz_p: &Array2<f64>,
    dz_q: &Array2<f64>,
    grad: &mut LamParams,
) -> (Array2<f64>, Array2<f64>) {
    let (dp_a, dq_a) = side_backward(&cache.psi_p, &cache.psi_q, &cache.p_side, dz_p, params, grad);
    let (dq_b, dp_b) = side_backward(&cache.psi_q, &cache.psi_p, &cache.q_side, dz_q, params, grad);
    (dp_a + dp_b, dq_a + dq_b)
}

/// Full cross-attention (every point attends every point of the other
/// cloud). Quadratic cost; used as a timing reference only.
pub fn quadratic_attention_reference(psi_p: &Array2<f64>, psi_q: &Array2<f64>) -> Result<Array2<f64>> {
    if psi_p.ncols() != psi_q.ncols() || psi_q.nrows() == 0 {
        return invalid("reference attention needs matching, non-empty features");
    }
    let scale = 1.0 / (psi_p.ncols() as f64).sqrt();
    let mut out = psi_p.clone();
    let mut scores = vec![0.0; psi_q.nrows()];
    for (i, row) in psi_p.rows().into_iter().enumerate() {
        for (j, q) in psi_q.rows().into_iter().enumerate() {
            scores[j] = row.dot(&q) * scale;
        }
        softmax_in_place(&mut scores);
        let mut o = out.row_mut(i);
        for (j, q) in psi_q.rows().into_iter().enumerate() {
            o.scaled_add(scores[j], &q);
        }
    }
    Ok(out)
}
