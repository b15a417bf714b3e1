//! Metric-learning and adversarial objectives.

use ndarray::Array2;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::features::DenseLayer;
use crate::io::NamedTensor;
use crate::numeric::{l2_distance, sigmoid};
use crate::optim::{slice1, slice1_mut, slice2, slice2_mut, ParamSet, TensorMap};

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Hidden widths of the discriminator.
pub const DISCRIMINATOR_WIDTHS: [usize; 3] = [128, 64, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    /// Negative attaining the max hinge (lowest index on ties).
    pub hardest: usize,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `max_j [α + ‖a − p‖ − ‖a − n_j‖]₊` and its (sub)gradient.
pub fn triplet_loss(batch: &TripletBatch) -> Result<TripletOutput> {
    let dim = batch.anchor.len();
    if batch.negatives.is_empty() {
        return invalid("triplet loss needs at least one negative");
    }
    if batch.positive.len() != dim || batch.negatives.iter().any(|n| n.len() != dim) {
        return invalid("triplet descriptors differ in length");
    }
    let d_pos = l2_distance(&batch.anchor, &batch.positive);
    let mut hardest = 0;
    let mut d_neg = f64::INFINITY;
    for (j, n) in batch.negatives.iter().enumerate() {
        let d = l2_distance(&batch.anchor, n);
        if d < d_neg {
            d_neg = d;
            hardest = j;
        }
    }
    let hinge = batch.margin + d_pos - d_neg;
    let mut out = TripletOutput {
        loss: hinge.max(0.0),
        hardest,
        d_anchor: vec![0.0; dim],
        d_positive: vec![0.0; dim],
        d_negatives: vec![vec![0.0; dim]; batch.negatives.len()],
    };
    if hinge > 0.0 {
        let neg = &batch.negatives[hardest];
        for i in 0..dim {
            let gp = if d_pos > 0.0 { (batch.anchor[i] - batch.positive[i]) / d_pos } else { 0.0 };
            let gn = if d_neg > 0.0 { (batch.anchor[i] - neg[i]) / d_neg } else { 0.0 };
            out.d_anchor[i] = gp - gn;
            out.d_positive[i] = -gp;
            out.d_negatives[hardest][i] = gn;
        }
    }
    Ok(out)
}

/// Four affine layers, leaky rectifiers between them, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub layers: [DenseLayer; 4],
}

impl DiscriminatorParams {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
        let [a, b, c] = DISCRIMINATOR_WIDTHS;
        Self {
            layers: [
                DenseLayer::new(input_dim, a, true, rng),
                DenseLayer::new(a, b, true, rng),
                DenseLayer::new(b, c, true, rng),
                DenseLayer::new(c, 1, false, rng),
            ],
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        let [a, b, c] = DISCRIMINATOR_WIDTHS;
        Self {
            layers: [
                DenseLayer::zeros(input_dim, a, true),
                DenseLayer::zeros(a, b, true),
                DenseLayer::zeros(b, c, true),
                DenseLayer::zeros(c, 1, false),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn validate(&self) -> Result<()> {
        let chained = self.layers.windows(2).all(|w| w[0].fan_out() == w[1].fan_in());
        if !chained || self.layers[3].fan_out() != 1 {
            return invalid("discriminator dimensions do not chain to a scalar");
        }
        Ok(())
    }

    /// `D(f)` for every row of `x`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward(&self, f: &[f64]) -> Result<f64> {
        let x = Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("one row");
        Ok(self.forward_batch(&x)?[0])
    }

    fn forward_cached(&self, x: &Array2<f64>) -> Result<(Vec<f64>, DiscCache)> {
        self.validate()?;
        if x.ncols() != self.input_dim() {
            return invalid(format!("discriminator expects {} inputs, got {}", self.input_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(4);
        let mut pres = Vec::with_capacity(4);
        let mut h = x.clone();
        for l in &self.layers {
            let (pre, out) = l.forward(&h);
            inputs.push(h);
            pres.push(pre);
            h = out;
        }
        let y: Vec<f64> = h.column(0).iter().map(|&v| sigmoid(v)).collect();
        Ok((y.clone(), DiscCache { inputs, pres, y }))
    }

    /// Accumulates parameter gradients for `dL/dD` per row; returns `dL/dx`.
    fn backward(&self, cache: &DiscCache, dy: &[f64], grad: &mut DiscriminatorParams) -> Array2<f64> {
        let mut d = Array2::from_shape_fn((dy.len(), 1), |(i, _)| dy[i] * cache.y[i] * (1.0 - cache.y[i]));
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let dpre = l.activation_backward(&cache.pres[idx], &d);
            d = l.backward(&cache.inputs[idx], &dpre, &mut grad.layers[idx]);
        }
        d
    }

    pub fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(crate::optim::tensor2(format!("{prefix}.l{i}.w"), &l.weight));
            out.push(crate::optim::tensor1(format!("{prefix}.l{i}.b"), &l.bias));
        }
        out
    }

    pub fn load(map: &TensorMap, prefix: &str) -> Result<Self> {
        let layer = |i: usize| -> Result<DenseLayer> {
            Ok(DenseLayer {
                weight: map.array2(&format!("{prefix}.l{i}.w"))?,
                bias: map.array1(&format!("{prefix}.l{i}.b"))?,
                activation: i < 3,
            })
        };
        let p = Self {
            layers: [layer(0)?, layer(1)?, layer(2)?, layer(3)?],
        };
        p.validate().map_err(|e| crate::Error::Format(e.to_string()))?;
        Ok(p)
    }
}

impl ParamSet for DiscriminatorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for l in &self.layers {
            f("w", slice2(&l.weight));
            f("b", slice1(&l.bias));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for l in &mut self.layers {
            f("w", slice2_mut(&mut l.weight));
            f("b", slice1_mut(&mut l.bias));
        }
    }
}

#[derive(Debug, Clone)]
struct DiscCache {
    inputs: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
    y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdversarialOutput {
    pub l_dis: f64,
    pub l_gen: f64,
    /// `∂L_Dis/∂D`.
    pub grad_discriminator: DiscriminatorParams,
    /// `∂L_Gen/∂f_V`, one row per virtual descriptor.
    pub d_virtual: Vec<Vec<f64>>,
    pub d_real_scores: Vec<f64>,
    pub d_virtual_scores: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return invalid("adversarial batch is empty");
    }
    if rows.iter().any(|r| r.len() != dim) {
        return invalid("adversarial descriptors differ in length");
    }
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]))
}

/// Least-squares adversarial objectives as batch means.
///
/// `L_Dis = mean 0.5(D(f_R) − 1)² + mean 0.5 D(f_V)²`,
/// `L_Gen = mean 0.5(D(f_V) − 1)²`.
pub fn adversarial_losses(d: &DiscriminatorParams, real: &[Vec<f64>], virt: &[Vec<f64>]) -> Result<AdversarialOutput> {
    let dim = d.input_dim();
    let xr = to_matrix(real, dim)?;
    let xv = to_matrix(virt, dim)?;
    let (yr, cr) = d.forward_cached(&xr)?;
    let (yv, cv) = d.forward_cached(&xv)?;
    let nr = yr.len() as f64;
    let nv = yv.len() as f64;
    let l_dis = yr.iter().map(|y| 0.5 * (y - 1.0).powi(2)).sum::<f64>() / nr
        + yv.iter().map(|y| 0.5 * y * y).sum::<f64>() / nv;
    let l_gen = yv.iter().map(|y| 0.5 * (y - 1.0).powi(2)).sum::<f64>() / nv;

    let mut grad = d.zeros_like();
    let dyr: Vec<f64> = yr.iter().map(|y| (y - 1.0) / nr).collect();
    let dyv: Vec<f64> = yv.iter().map(|y| y / nv).collect();
    d.backward(&cr, &dyr, &mut grad);
    d.backward(&cv, &dyv, &mut grad);

    let mut scratch = d.zeros_like();
    let dgen: Vec<f64> = yv.iter().map(|y| (y - 1.0) / nv).collect();
    let dx = d.backward(&cv, &dgen, &mut scratch);
    Ok(AdversarialOutput {
        l_dis,
        l_gen,
        grad_discriminator: grad,
        d_virtual: dx.rows().into_iter().map(|r| r.to_vec()).collect(),
        d_real_scores: yr,
        d_virtual_scores: yv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub triplet: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { triplet: 1.0, reg: 1.0 }
    }
}

pub fn generator_objective(l_triplet: f64, l_reg: f64, l_gen: f64, w: &LossWeights) -> f64 {
    w.triplet * l_triplet + w.reg * l_reg + l_gen
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn batch_with_distances(pos: f64, negs: &[f64]) -> TripletBatch {
        TripletBatch {
            anchor: vec![0.0, 0.0],
            positive: vec![pos, 0.0],
            negatives: negs.iter().map(|&d| vec![0.0, d]).collect(),
            margin: 0.2,
        }
    }

    #[test]
    fn triplet_arithmetic() {
        assert_eq!(triplet_loss(&batch_with_distances(0.5, &[1.0, 0.9])).unwrap().loss, 0.0);
        let out = triplet_loss(&batch_with_distances(0.5, &[0.4])).unwrap();
        assert!((out.loss - 0.3).abs() < 1e-15);
        let inactive = triplet_loss(&batch_with_distances(0.5, &[1.0])).unwrap();
        assert!(inactive.d_anchor.iter().all(|&g| g == 0.0));
        assert!(triplet_loss(&batch_with_distances(0.5, &[])).is_err());
    }

    #[test]
    fn triplet_ties_pick_the_lowest_index() {
        let out = triplet_loss(&batch_with_distances(0.5, &[0.6, 0.3, 0.3])).unwrap();
        assert_eq!(out.hardest, 1);
        assert!(out.d_negatives[2].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_value_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut b = TripletBatch {
            anchor: r(&mut rng),
            positive: r(&mut rng),
            negatives: (0..5).map(|_| r(&mut rng)).collect(),
            margin: 2.0,
        };
        let a = triplet_loss(&b).unwrap();
        b.negatives.reverse();
        let c = triplet_loss(&b).unwrap();
        assert_eq!(a.loss, c.loss);
        assert_eq!(c.hardest, 4 - a.hardest);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = |rng: &mut ChaCha8Rng| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let b = TripletBatch {
            anchor: r(&mut rng),
            positive: r(&mut rng),
            negatives: (0..4).map(|_| r(&mut rng)).collect(),
            margin: 5.0,
        };
        let out = triplet_loss(&b).unwrap();
        assert!(out.loss > 0.0);
        let h = 1e-6;
        for i in 0..16 {
            let mut plus = b.clone();
            plus.anchor[i] += h;
            let mut minus = b.clone();
            minus.anchor[i] -= h;
            let num = (triplet_loss(&plus).unwrap().loss - triplet_loss(&minus).unwrap().loss) / (2.0 * h);
            assert!((num - out.d_anchor[i]).abs() < 1e-4 * num.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_discriminator_outputs_one_half() {
        let d = DiscriminatorParams::zeros(16);
        assert_eq!(d.forward(&[0.3; 16]).unwrap(), 0.5);
        assert!(d.forward(&[0.3; 15]).is_err());
    }

    #[test]
    fn discriminator_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DiscriminatorParams::new(12, &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = x.clone();
        for (idx, l) in d.layers.iter().enumerate() {
            let mut next = vec![0.0; l.fan_out()];
            for (o, v) in next.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (i, hi) in h.iter().enumerate() {
                    s += hi * l.weight[[i, o]];
                }
                *v = if idx < 3 && s < 0.0 { 0.01 * s } else { s };
            }
            h = next;
        }
        let expected = 1.0 / (1.0 + (-h[0]).exp());
        let y = d.forward(&x).unwrap();
        assert!((y - expected).abs() < 1e-14);
        assert_eq!(y, d.forward(&x).unwrap());
        assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn adversarial_arithmetic() {
        let d = DiscriminatorParams::zeros(4);
        let out = adversarial_losses(&d, &[vec![1.0; 4]], &[vec![-1.0; 4]]).unwrap();
        assert_eq!(out.l_dis, 0.25);
        assert_eq!(out.l_gen, 0.125);
        assert!(adversarial_losses(&d, &[], &[vec![0.0; 4]]).is_err());
        assert!(adversarial_losses(&d, &[vec![0.0; 3]], &[vec![0.0; 4]]).is_err());
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DiscriminatorParams::new(6, &mut rng);
        let r = |rng: &mut ChaCha8Rng| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let real: Vec<Vec<f64>> = (0..3).map(|_| r(&mut rng)).collect();
        let virt: Vec<Vec<f64>> = (0..3).map(|_| r(&mut rng)).collect();
        let out = adversarial_losses(&d, &real, &virt).unwrap();
        let flat = out.grad_discriminator.flatten();
        let h = 1e-6;
        for idx in (0..d.num_params()).step_by(7) {
            let f = |delta: f64| {
                let mut p = d.clone();
                let mut off = 0;
                p.visit_mut(&mut |_, v| {
                    for x in v.iter_mut() {
                        if off == idx {
                            *x += delta;
                        }
                        off += 1;
                    }
                });
                adversarial_losses(&p, &real, &virt).unwrap().l_dis
            };
            let num = (f(h) - f(-h)) / (2.0 * h);
            assert!((num - flat[idx]).abs() <= 1e-4 * num.abs().max(flat[idx].abs()).max(1e-6), "{idx}");
        }
        for i in 0..3 {
            for j in 0..6 {
                let f = |delta: f64| {
                    let mut v = virt.clone();
                    v[i][j] += delta;
                    adversarial_losses(&d, &real, &v).unwrap().l_gen
                };
                let num = (f(h) - f(-h)) / (2.0 * h);
                let a = out.d_virtual[i][j];
                assert!((num - a).abs() <= 1e-4 * num.abs().max(a.abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn generator_objective_is_linear() {
        let w = LossWeights::default();
        assert_eq!(generator_objective(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(generator_objective(1.0, 2.0, 3.0, &w), 6.0);
        let w2 = LossWeights { reg: 2.0, ..w };
        assert_eq!(generator_objective(1.0, 2.0, 3.0, &w2) - generator_objective(1.0, 2.0, 3.0, &w), 2.0);
    }
}
