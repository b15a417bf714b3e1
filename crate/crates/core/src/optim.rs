//! Parameter traversal and first-order optimizers.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::NamedTensor;

/// A group of trainable arrays visited in a fixed order.
///
/// The same type doubles as its own gradient container.
pub trait ParamSet: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, v| v.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    /// Trainable values concatenated in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    /// `self += scale * other`, element-wise over trainable values.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            for x in v.iter_mut() {
                *x += scale * flat[off];
                off += 1;
            }
        });
    }

    /// Bit-level fingerprint of trainable values.
    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit(&mut |_, v| {
            for x in v {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound))
}

pub(crate) fn tensor2(name: String, a: &Array2<f64>) -> NamedTensor {
    NamedTensor::new(name, a.shape().to_vec(), a.iter().copied().collect())
}

pub(crate) fn tensor1(name: String, a: &Array1<f64>) -> NamedTensor {
    NamedTensor::new(name, vec![a.len()], a.to_vec())
}

/// Checkpoint tensors by name.
pub struct TensorMap(HashMap<String, NamedTensor>);

impl TensorMap {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self(tensors.into_iter().map(|t| (t.name.clone(), t)).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn array2(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return Err(Error::Format(format!("tensor '{name}' should be rank 2")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn array1(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.get(name)?;
        if t.shape.len() != 1 {
            return Err(Error::Format(format!("tensor '{name}' should be rank 1")));
        }
        Ok(Array1::from_vec(t.data.clone()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.data
            .first()
            .copied()
            .ok_or_else(|| Error::Format(format!("tensor '{name}' is empty")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with moment buffers shaped like the parameters it updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<P> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first: P,
    pub second: P,
}

impl<P: ParamSet> Optimizer<P> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &P) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let g = grads.flatten();
        let lr = self.lr;
        match self.kind {
            OptimizerKind::SgdMomentum { beta } => {
                let mut off = 0;
                self.first.visit_mut(&mut |_, v| {
                    for m in v.iter_mut() {
                        *m = beta * *m + g[off];
                        off += 1;
                    }
                });
                let m = self.first.flatten();
                let mut off = 0;
                params.visit_mut(&mut |_, v| {
                    for x in v.iter_mut() {
                        *x -= lr * m[off];
                        off += 1;
                    }
                });
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let mut off = 0;
                self.first.visit_mut(&mut |_, v| {
                    for m in v.iter_mut() {
                        *m = beta1 * *m + (1.0 - beta1) * g[off];
                        off += 1;
                    }
                });
                let mut off = 0;
                self.second.visit_mut(&mut |_, v| {
                    for s in v.iter_mut() {
                        *s = beta2 * *s + (1.0 - beta2) * g[off] * g[off];
                        off += 1;
                    }
                });
                let m = self.first.flatten();
                let s = self.second.flatten();
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let mut off = 0;
                params.visit_mut(&mut |_, v| {
                    for x in v.iter_mut() {
                        let mh = m[off] / bc1;
                        let sh = s[off] / bc2;
                        *x -= lr * mh / (sh.sqrt() + eps);
                        off += 1;
                    }
                });
            }
        }
    }
}
