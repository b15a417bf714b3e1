use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::losses::{LossWeights, DEFAULT_MARGIN};
use crate::optim::OptimizerKind;
use crate::regnet::DEFAULT_TAU;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplet tuples per step; also the number of real frames per step.
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub optimizer: OptimizerKind,
    /// Positive radius, meters. 0 means same route position.
    pub r_pos: f64,
    pub r_neg: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub k_frac: f64,
    pub tau: f64,
    /// Negatives per tuple.
    pub negatives: usize,
    pub margin: f64,
    /// Points per cloud of the registration pair.
    pub reg_points: usize,
    pub knn: usize,
    pub gem_p: f64,
    pub check_grads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 4,
            lr_g: 1e-3,
            lr_d: 1e-3,
            optimizer: OptimizerKind::default(),
            r_pos: 0.0,
            r_neg: 50.0,
            seed: 0,
            weights: LossWeights::default(),
            k_frac: 0.5,
            tau: DEFAULT_TAU,
            negatives: 8,
            margin: DEFAULT_MARGIN,
            reg_points: 256,
            knn: 20,
            gem_p: 3.0,
            check_grads: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidInput(format!("bad value '{v}' for '{key}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.negatives == 0 {
            return invalid("batch and negatives must be positive");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.r_pos >= 0.0 && self.r_neg > self.r_pos) {
            return invalid("need 0 <= r_pos < r_neg");
        }
        if !(self.k_frac > 0.0 && self.k_frac <= 1.0) || !(self.tau > 0.0) {
            return invalid("k_frac must lie in (0, 1] and tau must be positive");
        }
        if self.reg_points <= self.knn || self.knn == 0 {
            return invalid("reg_points must exceed knn > 0");
        }
        if !(self.margin >= 0.0 && self.gem_p >= 1.0) {
            return invalid("margin must be non-negative and gem_p at least 1");
        }
        if !(self.weights.triplet >= 0.0 && self.weights.reg >= 0.0) {
            return invalid("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "lr_g" => self.lr_g = parse_num(key, value)?,
            "lr_d" => self.lr_d = parse_num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::default(),
                    "sgd" => OptimizerKind::SgdMomentum { beta: 0.9 },
                    _ => return invalid(format!("unknown optimizer '{value}'")),
                }
            }
            "beta" => match &mut self.optimizer {
                OptimizerKind::SgdMomentum { beta } => *beta = parse_num(key, value)?,
                _ => return invalid("'beta' applies to optimizer = sgd"),
            },
            "beta1" | "beta2" | "eps" => match &mut self.optimizer {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let slot = match key {
                        "beta1" => beta1,
                        "beta2" => beta2,
                        _ => eps,
                    };
                    *slot = parse_num(key, value)?;
                }
                _ => return invalid(format!("'{key}' applies to optimizer = adam")),
            },
            "r_pos" => self.r_pos = parse_num(key, value)?,
            "r_neg" => self.r_neg = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lambda_triplet" => self.weights.triplet = parse_num(key, value)?,
            "lambda_reg" => self.weights.reg = parse_num(key, value)?,
            "k_frac" => self.k_frac = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "negatives" => self.negatives = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "reg_points" => self.reg_points = parse_num(key, value)?,
            "knn" => self.knn = parse_num(key, value)?,
            "gem_p" => self.gem_p = parse_num(key, value)?,
            "check_grads" => self.check_grads = parse_num(key, value)?,
            _ => return invalid(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr_g", self.lr_g.to_string());
        kv("lr_d", self.lr_d.to_string());
        match self.optimizer {
            OptimizerKind::SgdMomentum { beta } => {
                kv("optimizer", "sgd".into());
                kv("beta", beta.to_string());
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                kv("optimizer", "adam".into());
                kv("beta1", beta1.to_string());
                kv("beta2", beta2.to_string());
                kv("eps", eps.to_string());
            }
        }
        kv("r_pos", self.r_pos.to_string());
        kv("r_neg", self.r_neg.to_string());
        kv("seed", self.seed.to_string());
        kv("lambda_triplet", self.weights.triplet.to_string());
        kv("lambda_reg", self.weights.reg.to_string());
        kv("k_frac", self.k_frac.to_string());
        kv("tau", self.tau.to_string());
        kv("negatives", self.negatives.to_string());
        kv("margin", self.margin.to_string());
        kv("reg_points", self.reg_points.to_string());
        kv("knn", self.knn.to_string());
        kv("gem_p", self.gem_p.to_string());
        kv("check_grads", self.check_grads.to_string());
        s
    }
}
