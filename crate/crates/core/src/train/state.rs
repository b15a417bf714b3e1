use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureParams, Projection, DESCRIPTOR_DIM};
use crate::io::{read_checkpoint, write_checkpoint, NamedTensor};
use crate::losses::DiscriminatorParams;
use crate::optim::{Optimizer, OptimizerKind, ParamSet, TensorMap};
use crate::regnet::LamParams;

/// Everything trained by the generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub features: FeatureParams,
    pub lam: LamParams,
    pub proj: Projection,
}

impl Generator {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let features = FeatureParams::default_init(rng);
        let lam = LamParams::new(features.out_dim(), rng);
        let proj = Projection::new(features.out_dim(), DESCRIPTOR_DIM, rng);
        Self { features, lam, proj }
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut t = self.features.tensors("g.feat");
        t.extend(self.lam.tensors("g.lam"));
        t.extend(self.proj.tensors("g.proj"));
        t
    }

    pub fn load(map: &TensorMap) -> Result<Self> {
        Ok(Self {
            features: FeatureParams::load(map, "g.feat")?,
            lam: LamParams::load(map, "g.lam")?,
            proj: Projection::load(map, "g.proj")?,
        })
    }
}

impl ParamSet for Generator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.features.visit(f);
        self.lam.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.features.visit_mut(f);
        self.lam.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: DiscriminatorParams,
    pub opt_g: Optimizer<Generator>,
    pub opt_d: Optimizer<DiscriminatorParams>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed alternation steps.
    pub step: u64,
    /// Run seed; epoch `e` draws from stream `e + 1` of it.
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(&mut rng);
        let discriminator = DiscriminatorParams::new(generator.proj.out_dim(), &mut rng);
        Self {
            opt_g: Optimizer::new(cfg.optimizer, cfg.lr_g, &generator),
            opt_d: Optimizer::new(cfg.optimizer, cfg.lr_d, &discriminator),
            generator,
            discriminator,
            epoch: 0,
            step: 0,
            seed: cfg.seed,
        }
    }

    /// Generator stream for epoch `e`.
    pub fn epoch_rng(&self, e: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(e + 1);
        rng
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut t = self.generator.tensors();
        t.extend(self.discriminator.tensors("d"));
        t.extend(optimizer_tensors("opt_g", &self.opt_g));
        t.extend(optimizer_tensors("opt_d", &self.opt_d));
        t.push(NamedTensor::new(
            "state.counters",
            vec![4],
            vec![
                self.epoch as f64,
                self.step as f64,
                (self.seed >> 32) as f64,
                (self.seed & 0xffff_ffff) as f64,
            ],
        ));
        t
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let map = TensorMap::new(tensors);
        let generator = Generator::load(&map)?;
        let discriminator = DiscriminatorParams::load(&map, "d")?;
        let c = &map.get("state.counters")?.data;
        if c.len() != 4 {
            return Err(Error::Format("state counters need four entries".into()));
        }
        Ok(Self {
            opt_g: load_optimizer(&map, "opt_g", &generator)?,
            opt_d: load_optimizer(&map, "opt_d", &discriminator)?,
            generator,
            discriminator,
            epoch: c[0] as u64,
            step: c[1] as u64,
            seed: ((c[2] as u64) << 32) | c[3] as u64,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(read_checkpoint(path)?)
    }
}

fn optimizer_tensors<P: ParamSet>(prefix: &str, opt: &Optimizer<P>) -> Vec<NamedTensor> {
    let kind = match opt.kind {
        OptimizerKind::SgdMomentum { beta } => vec![0.0, beta, 0.0, 0.0],
        OptimizerKind::Adam { beta1, beta2, eps } => vec![1.0, beta1, beta2, eps],
    };
    let first = opt.first.flatten();
    let second = opt.second.flatten();
    vec![
        NamedTensor::new(format!("{prefix}.kind"), vec![4], kind),
        NamedTensor::new(format!("{prefix}.lr_step"), vec![2], vec![opt.lr, opt.step as f64]),
        NamedTensor::new(format!("{prefix}.first"), vec![first.len()], first),
        NamedTensor::new(format!("{prefix}.second"), vec![second.len()], second),
    ]
}

fn fill<P: ParamSet>(like: &P, flat: &[f64]) -> Result<P> {
    if flat.len() != like.num_params() {
        return Err(Error::Format("optimizer buffer does not match its parameters".into()));
    }
    let mut out = like.clone();
    let mut off = 0;
    out.visit_mut(&mut |_, v| {
        v.copy_from_slice(&flat[off..off + v.len()]);
        off += v.len();
    });
    Ok(out)
}

fn load_optimizer<P: ParamSet>(map: &TensorMap, prefix: &str, params: &P) -> Result<Optimizer<P>> {
    let k = &map.get(&format!("{prefix}.kind"))?.data;
    let ls = &map.get(&format!("{prefix}.lr_step"))?.data;
    if k.len() != 4 || ls.len() != 2 {
        return Err(Error::Format(format!("malformed optimizer header '{prefix}'")));
    }
    let kind = if k[0] == 0.0 {
        OptimizerKind::SgdMomentum { beta: k[1] }
    } else {
        OptimizerKind::Adam {
            beta1: k[1],
            beta2: k[2],
            eps: k[3],
        }
    };
    Ok(Optimizer {
        kind,
        lr: ls[0],
        step: ls[1] as u64,
        first: fill(params, &map.get(&format!("{prefix}.first"))?.data)?,
        second: fill(params, &map.get(&format!("{prefix}.second"))?.data)?,
    })
}
