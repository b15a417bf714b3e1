use ndarray::{s, concatenate, Array1, Array2, Axis};
use rand::Rng;

use super::handcrafted::HANDCRAFTED_DIM;
use crate::error::{invalid, Result};
use crate::io::NamedTensor;
use crate::numeric::{leaky_relu, leaky_relu_grad};
use crate::optim::{glorot_uniform, slice1, slice1_mut, slice2, slice2_mut, tensor1, tensor2, ParamSet, TensorMap};
use crate::spatial::NeighborTable;

/// Negative-side slope of every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Affine map `x W + b`, optionally followed by a leaky rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: bool,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, activation: bool, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: bool) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    /// Returns `(pre-activation, output)`.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let pre = x.dot(&self.weight) + &self.bias;
        let out = if self.activation {
            pre.mapv(|v| leaky_relu(v, LEAKY_SLOPE))
        } else {
            pre.clone()
        };
        (pre, out)
    }

    /// Gradient w.r.t. the pre-activation given the output gradient.
    pub fn activation_backward(&self, pre: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
        if self.activation {
            let mut d = dout.clone();
            d.zip_mut_with(pre, |g, &p| *g *= leaky_relu_grad(p, LEAKY_SLOPE));
            d
        } else {
            dout.clone()
        }
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dpre: &Array2<f64>, grad: &mut DenseLayer) -> Array2<f64> {
        grad.weight += &x.t().dot(dpre);
        grad.bias += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.weight.t())
    }

    fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![
            tensor2(format!("{prefix}.w"), &self.weight),
            tensor1(format!("{prefix}.b"), &self.bias),
        ]
    }

    fn load(map: &TensorMap, prefix: &str, activation: bool) -> Result<Self> {
        let weight = map.array2(&format!("{prefix}.w"))?;
        let bias = map.array1(&format!("{prefix}.b"))?;
        if bias.len() != weight.ncols() {
            return Err(crate::Error::Format(format!("{prefix}: bias does not match weight")));
        }
        Ok(Self { weight, bias, activation })
    }
}

/// Per-point network: two rectified layers, KNN max aggregation after the
/// second, and a third layer fed by the aggregated rows concatenated with
/// the first layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    /// Fixed input standardisation, `(raw - shift) * scale`. Not trained.
    pub input_shift: Array1<f64>,
    pub input_scale: Array1<f64>,
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
    /// Input width is `layer2.fan_out() + layer1.fan_out()`.
    pub layer3: DenseLayer,
}

impl FeatureParams {
    pub fn new<R: Rng + ?Sized>(hidden1: usize, hidden2: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            input_shift: Array1::zeros(HANDCRAFTED_DIM),
            input_scale: Array1::ones(HANDCRAFTED_DIM),
            layer1: DenseLayer::new(HANDCRAFTED_DIM, hidden1, true, rng),
            layer2: DenseLayer::new(hidden1, hidden2, true, rng),
            layer3: DenseLayer::new(hidden2 + hidden1, out_dim, false, rng),
        }
    }

    /// Default widths 10 → 64 → 64 → 64.
    pub fn default_init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(64, 64, 64, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layer3.fan_out()
    }

    pub fn validate(&self) -> Result<()> {
        let d_in = self.layer1.fan_in();
        let ok = self.input_shift.len() == d_in
            && self.input_scale.len() == d_in
            && self.layer2.fan_in() == self.layer1.fan_out()
            && self.layer3.fan_in() == self.layer2.fan_out() + self.layer1.fan_out();
        if !ok {
            return invalid("feature network dimensions do not chain");
        }
        let mut finite = true;
        self.visit(&mut |_, v| finite &= v.iter().all(|x| x.is_finite()));
        if !finite {
            return invalid("feature network parameters must be finite");
        }
        Ok(())
    }

    /// Sets the input standardisation from sample feature rows.
    pub fn calibrate_inputs(&mut self, samples: &[Array2<f64>]) {
        let d = self.in_dim();
        let mut count = 0.0;
        let mut sum = Array1::<f64>::zeros(d);
        let mut sq = Array1::<f64>::zeros(d);
        for m in samples {
            for row in m.rows() {
                count += 1.0;
                sum += &row;
                sq += &row.mapv(|v| v * v);
            }
        }
        if count < 2.0 {
            return;
        }
        let mean = &sum / count;
        let var = (&sq / count) - mean.mapv(|v| v * v);
        self.input_shift = mean;
        self.input_scale = var.mapv(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 });
    }

    pub fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = vec![
            tensor1(format!("{prefix}.shift"), &self.input_shift),
            tensor1(format!("{prefix}.scale"), &self.input_scale),
            NamedTensor::new(
                format!("{prefix}.act"),
                vec![3],
                [&self.layer1, &self.layer2, &self.layer3]
                    .iter()
                    .map(|l| if l.activation { 1.0 } else { 0.0 })
                    .collect(),
            ),
        ];
        out.extend(self.layer1.tensors(&format!("{prefix}.l1")));
        out.extend(self.layer2.tensors(&format!("{prefix}.l2")));
        out.extend(self.layer3.tensors(&format!("{prefix}.l3")));
        out
    }

    pub fn load(map: &TensorMap, prefix: &str) -> Result<Self> {
        let act = map.get(&format!("{prefix}.act"))?.data.clone();
        if act.len() != 3 {
            return Err(crate::Error::Format("activation flags need three entries".into()));
        }
        let p = Self {
            input_shift: map.array1(&format!("{prefix}.shift"))?,
            input_scale: map.array1(&format!("{prefix}.scale"))?,
            layer1: DenseLayer::load(map, &format!("{prefix}.l1"), act[0] != 0.0)?,
            layer2: DenseLayer::load(map, &format!("{prefix}.l2"), act[1] != 0.0)?,
            layer3: DenseLayer::load(map, &format!("{prefix}.l3"), act[2] != 0.0)?,
        };
        p.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(p)
    }
}

impl ParamSet for FeatureParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("l1.w", slice2(&self.layer1.weight));
        f("l1.b", slice1(&self.layer1.bias));
        f("l2.w", slice2(&self.layer2.weight));
        f("l2.b", slice1(&self.layer2.bias));
        f("l3.w", slice2(&self.layer3.weight));
        f("l3.b", slice1(&self.layer3.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("l1.w", slice2_mut(&mut self.layer1.weight));
        f("l1.b", slice1_mut(&mut self.layer1.bias));
        f("l2.w", slice2_mut(&mut self.layer2.weight));
        f("l2.b", slice1_mut(&mut self.layer2.bias));
        f("l3.w", slice2_mut(&mut self.layer3.weight));
        f("l3.b", slice1_mut(&mut self.layer3.bias));
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureMapCache {
    x0: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    /// Row of `h2` that won the max for each `(point, channel)`.
    argmax: Vec<usize>,
    x3: Array2<f64>,
    pre3: Array2<f64>,
}

/// Forward pass with a precomputed neighbour table.
pub fn feature_map_forward(
    raw: &Array2<f64>,
    neighbors: &NeighborTable,
    params: &FeatureParams,
) -> Result<(Array2<f64>, FeatureMapCache)> {
    let n = raw.nrows();
    if raw.ncols() != params.in_dim() {
        return invalid(format!("feature map expects {} input columns, got {}", params.in_dim(), raw.ncols()));
    }
    if neighbors.len() != n {
        return invalid("neighbour table does not match the feature rows");
    }
    params.validate()?;
    let x0 = (raw - &params.input_shift) * &params.input_scale;
    let (pre1, h1) = params.layer1.forward(&x0);
    let (pre2, h2) = params.layer2.forward(&h1);

    let d2 = h2.ncols();
    let mut g = Array2::<f64>::zeros((n, d2));
    let mut argmax = vec![0usize; n * d2];
    for i in 0..n {
        let nbrs = neighbors.neighbors(i);
        for c in 0..d2 {
            let mut best = nbrs[0];
            let mut val = h2[[best, c]];
            for &j in &nbrs[1..] {
                let v = h2[[j, c]];
                if v > val {
                    val = v;
                    best = j;
                }
            }
            g[[i, c]] = val;
            argmax[i * d2 + c] = best;
        }
    }
    let x3 = concatenate(Axis(1), &[g.view(), h1.view()]).expect("row counts agree");
    let (pre3, out) = params.layer3.forward(&x3);
    Ok((
        out,
        FeatureMapCache {
            x0,
            pre1,
            h1,
            pre2,
            argmax,
            x3,
            pre3,
        },
    ))
}

/// Parameter gradients given `dL/d(output)`.
pub fn feature_map_backward(params: &FeatureParams, cache: &FeatureMapCache, dout: &Array2<f64>) -> FeatureParams {
    let mut grad = params.zeros_like();
    feature_map_backward_into(params, cache, dout, &mut grad);
    grad
}

/// Accumulating variant of [`feature_map_backward`].
pub fn feature_map_backward_into(
    params: &FeatureParams,
    cache: &FeatureMapCache,
    dout: &Array2<f64>,
    grad: &mut FeatureParams,
) {
    let d2 = params.layer2.fan_out();
    let n = dout.nrows();
    let dpre3 = params.layer3.activation_backward(&cache.pre3, dout);
    let dx3 = params.layer3.backward(&cache.x3, &dpre3, &mut grad.layer3);
    let dg = dx3.slice(s![.., ..d2]);
    let dh1_skip = dx3.slice(s![.., d2..]);

    let mut dh2 = Array2::<f64>::zeros((n, d2));
    for i in 0..n {
        for c in 0..d2 {
            dh2[[cache.argmax[i * d2 + c], c]] += dg[[i, c]];
        }
    }
    let dpre2 = params.layer2.activation_backward(&cache.pre2, &dh2);
    let dh1 = params.layer2.backward(&cache.h1, &dpre2, &mut grad.layer2) + dh1_skip;
    let dpre1 = params.layer1.activation_backward(&cache.pre1, &dh1);
    params.layer1.backward(&cache.x0, &dpre1, &mut grad.layer1);
}
