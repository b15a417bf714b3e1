use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::io::NamedTensor;
use crate::numeric::compensated_sum;
use crate::optim::{glorot_uniform, slice2, slice2_mut, tensor2, ParamSet, TensorMap};

/// Linear map from pooled features to the descriptor space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `feature_dim × descriptor_dim`.
    pub weight: Array2<f64>,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, descriptor_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(feature_dim, descriptor_dim, rng),
        }
    }

    /// Identity on the first `min(in, out)` coordinates.
    pub fn identity(feature_dim: usize, descriptor_dim: usize) -> Self {
        let mut weight = Array2::zeros((feature_dim, descriptor_dim));
        for i in 0..feature_dim.min(descriptor_dim) {
            weight[[i, i]] = 1.0;
        }
        Self { weight }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![tensor2(format!("{prefix}.w"), &self.weight)]
    }

    pub fn load(map: &TensorMap, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: map.array2(&format!("{prefix}.w"))?,
        })
    }
}

impl ParamSet for Projection {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", slice2(&self.weight));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", slice2_mut(&mut self.weight));
    }
}

#[derive(Debug, Clone)]
pub struct AggregateCache {
    rectified: Array2<f64>,
    power_mean: Array1<f64>,
    pooled: Array1<f64>,
    norm: f64,
    descriptor: Array1<f64>,
    p: f64,
}

/// GeM pooling of rectified rows, linear projection, ℓ2 normalisation.
pub fn aggregate_forward(z: &Array2<f64>, proj: &Projection, p: f64) -> Result<(Vec<f64>, AggregateCache)> {
    let (n, d) = z.dim();
    if n == 0 || d == 0 {
        return invalid("cannot aggregate an empty feature matrix");
    }
    if d != proj.in_dim() {
        return invalid(format!("projection expects {} features, got {d}", proj.in_dim()));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return invalid("GeM exponent must be at least 1");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return invalid("feature matrix contains non-finite entries");
    }
    let rectified = z.mapv(|v| v.max(0.0));
    let mut power_mean = Array1::zeros(d);
    let mut pooled = Array1::zeros(d);
    for j in 0..d {
        let col = rectified.column(j);
        let m = compensated_sum(col.iter().map(|&x| x.powf(p))) / n as f64;
        power_mean[j] = m;
        pooled[j] = if m > 0.0 { m.powf(1.0 / p) } else { 0.0 };
    }
    let y = pooled.dot(&proj.weight);
    let norm = y.dot(&y).sqrt();
    if !(norm > 0.0) {
        return Err(Error::DegenerateGeometry("descriptor has zero norm".into()));
    }
    let descriptor = &y / norm;
    Ok((
        descriptor.to_vec(),
        AggregateCache {
            rectified,
            power_mean,
            pooled,
            norm,
            descriptor,
            p,
        },
    ))
}

pub fn aggregate(z: &Array2<f64>, proj: &Projection, p: f64) -> Result<Vec<f64>> {
    aggregate_forward(z, proj, p).map(|(d, _)| d)
}

/// Returns projection gradients and `dL/dz` given `dL/d(descriptor)`.
pub fn aggregate_backward(proj: &Projection, cache: &AggregateCache, dout: &[f64]) -> (Projection, Array2<f64>) {
    let f = &cache.descriptor;
    let g = Array1::from_vec(dout.to_vec());
    let dy = (&g - &(f * f.dot(&g))) / cache.norm;
    let mut grad = proj.zeros_like();
    for (i, &pi) in cache.pooled.iter().enumerate() {
        for (k, &dk) in dy.iter().enumerate() {
            grad.weight[[i, k]] = pi * dk;
        }
    }
    let dpooled = proj.weight.dot(&dy);
    let (n, d) = cache.rectified.dim();
    let p = cache.p;
    let mut dz = Array2::zeros((n, d));
    for j in 0..d {
        let m = cache.power_mean[j];
        if m <= 0.0 {
            continue;
        }
        let scale = dpooled[j] * m.powf(1.0 / p - 1.0) / n as f64;
        for i in 0..n {
            let x = cache.rectified[[i, j]];
            if x > 0.0 {
                dz[[i, j]] = scale * x.powf(p - 1.0);
            }
        }
    }
    (grad, dz)
}
