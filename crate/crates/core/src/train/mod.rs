//! Alternating adversarial training.
//!
//! Each step first updates the discriminator on the current batch
//! descriptors, then the generator (feature network, attention and
//! projection) on `λ_t · L_triplet + λ_r · L_reg + L_Gen`.

mod config;
mod state;

pub use config::TrainConfig;
pub use state::{Generator, TrainState};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::features::{
    descriptor_backward, descriptor_forward, feature_map_backward_into, feature_map_forward, CloudInputs,
    DescriptorTrace,
};
use crate::geometry::{PointCloud, RigidTransform};
use crate::io::{DatasetManifest, ManifestRow};
use crate::losses::{adversarial_losses, generator_objective, triplet_loss, DiscriminatorParams, TripletBatch};
use crate::optim::{Optimizer, ParamSet};
use crate::regnet::{register_backward, register_trace, RegNetConfig};
use crate::synthgen::{make_registration_pair, EulerRanges, RegistrationPair, DEFAULT_TRANSLATION_RANGE};

/// One frame with its fixed network inputs.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub frame_id: u64,
    pub environment: String,
    pub route_s: f64,
    pub position: Vector3<f64>,
    pub cloud: PointCloud,
    pub inputs: CloudInputs,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub frames: Vec<TrainFrame>,
    by_id: BTreeMap<u64, usize>,
}

impl Dataset {
    fn from_parts(frames: Vec<TrainFrame>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, f) in frames.iter().enumerate() {
            if by_id.insert(f.frame_id, i).is_some() {
                return invalid(format!("duplicate frame id {}", f.frame_id));
            }
        }
        Ok(Self { frames, by_id })
    }

    /// Frames whose pose translation gives their position.
    pub fn from_clouds(clouds: Vec<PointCloud>, knn: usize) -> Result<Self> {
        let frames = clouds
            .into_par_iter()
            .map(|cloud| {
                let position = cloud.pose.map(|p| p.translation).unwrap_or_else(Vector3::zeros);
                Ok(TrainFrame {
                    frame_id: cloud.frame_id,
                    environment: cloud.environment.name().to_string(),
                    route_s: cloud.route_s,
                    position,
                    inputs: CloudInputs::prepare(&cloud, knn)?,
                    cloud,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(frames)
    }

    pub fn from_manifest(manifest: &DatasetManifest, knn: usize) -> Result<Self> {
        let frames = manifest
            .rows
            .par_iter()
            .map(|row| {
                let cloud = manifest.load_cloud(row)?;
                Ok(TrainFrame {
                    frame_id: row.frame_id,
                    environment: row.environment.clone(),
                    route_s: row.route_s,
                    position: row.position(),
                    inputs: CloudInputs::prepare(&cloud, knn)?,
                    cloud,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, frame_id: u64) -> Option<&TrainFrame> {
        self.by_id.get(&frame_id).map(|&i| &self.frames[i])
    }

    fn frame(&self, frame_id: u64) -> Result<&TrainFrame> {
        self.get(frame_id)
            .ok_or_else(|| Error::InvalidInput(format!("frame {frame_id} is not in the dataset")))
    }

    /// Manifest rows without file paths.
    pub fn rows(&self) -> Vec<ManifestRow> {
        self.frames
            .iter()
            .map(|f| ManifestRow {
                frame_id: f.frame_id,
                path: String::new(),
                environment: f.environment.clone(),
                route_s: f.route_s,
                x: f.position.x,
                y: f.position.y,
                z: f.position.z,
                pose_path: String::new(),
            })
            .collect()
    }
}

/// Frame ids of one training tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: u64,
    pub positive: u64,
    /// Ascending frame ids.
    pub negatives: Vec<u64>,
}

/// Cross-environment positives within `r_pos`, negatives beyond `r_neg`.
///
/// An anchor with several candidate positives gets one at random; negatives
/// are a random subset of at most `cfg.negatives`. Anchors lacking either are
/// skipped.
pub fn mine_triplets<R: Rng + ?Sized>(rows: &[ManifestRow], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Triplet>> {
    let mut envs: Vec<&str> = rows.iter().map(|r| r.environment.as_str()).collect();
    envs.sort_unstable();
    envs.dedup();
    if envs.len() < 2 {
        return invalid("triplet mining needs at least two environments");
    }
    if !(cfg.r_neg > cfg.r_pos) || cfg.negatives == 0 {
        return invalid("need r_neg > r_pos and at least one negative");
    }
    let mut sorted: Vec<&ManifestRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.frame_id);
    let mut out = Vec::new();
    for a in &sorted {
        let pa = a.position();
        let positives: Vec<u64> = sorted
            .iter()
            .filter(|r| r.environment != a.environment && (r.position() - pa).norm() <= cfg.r_pos)
            .map(|r| r.frame_id)
            .collect();
        let pool: Vec<u64> = sorted
            .iter()
            .filter(|r| (r.position() - pa).norm() > cfg.r_neg)
            .map(|r| r.frame_id)
            .collect();
        if positives.is_empty() || pool.is_empty() {
            continue;
        }
        let positive = positives[rng.random_range(0..positives.len())];
        let take = cfg.negatives.min(pool.len());
        let mut negatives: Vec<u64> = index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
        negatives.sort_unstable();
        out.push(Triplet {
            anchor: a.frame_id,
            positive,
            negatives,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no anchor has both a positive and a negative".into()));
    }
    Ok(out)
}

/// Unit descriptor of one frame under the current generator.
pub fn describe(generator: &Generator, inputs: &CloudInputs, cfg: &TrainConfig) -> Result<Vec<f64>> {
    descriptor_forward(inputs, &generator.features, &generator.proj, cfg.gem_p).map(|t| t.descriptor)
}

/// Descriptors of many frames, in input order.
pub fn describe_all(generator: &Generator, inputs: &[&CloudInputs], cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|i| describe(generator, i, cfg)).collect()
}

fn regnet_config(cfg: &TrainConfig) -> RegNetConfig {
    RegNetConfig {
        k_frac: cfg.k_frac,
        tau: cfg.tau,
        masking: true,
        knn: cfg.knn,
    }
}

/// Registration pair from a random `reg_points` subset of `frame`.
pub fn sample_registration_pair<R: Rng + ?Sized>(
    frame: &PointCloud,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RegistrationPair> {
    let n = cfg.reg_points.min(frame.len());
    let mut keep = index::sample(rng, frame.len(), n).into_vec();
    keep.sort_unstable();
    let sub = frame.select(&keep)?;
    make_registration_pair(&sub, &EulerRanges::evaluation(), DEFAULT_TRANSLATION_RANGE, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorLosses {
    pub l_triplet: f64,
    pub l_reg: f64,
    pub l_gen: f64,
    pub total: f64,
}

struct PairInputs<'a> {
    pair: &'a RegistrationPair,
    ip: CloudInputs,
    iq: CloudInputs,
}

impl<'a> PairInputs<'a> {
    fn new(pair: &'a RegistrationPair, knn: usize) -> Result<Self> {
        Ok(Self {
            ip: CloudInputs::prepare(&pair.source, knn)?,
            iq: CloudInputs::prepare(&pair.target, knn)?,
            pair,
        })
    }
}

fn unique_ids(tuples: &[Triplet]) -> Vec<u64> {
    let mut ids: Vec<u64> = tuples
        .iter()
        .flat_map(|t| [t.anchor, t.positive].into_iter().chain(t.negatives.iter().copied()))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn trace_frames(generator: &Generator, data: &Dataset, ids: &[u64], cfg: &TrainConfig) -> Result<Vec<DescriptorTrace>> {
    let inputs: Vec<&CloudInputs> = ids.iter().map(|&id| data.frame(id).map(|f| &f.inputs)).collect::<Result<_>>()?;
    inputs
        .par_iter()
        .map(|i| descriptor_forward(i, &generator.features, &generator.proj, cfg.gem_p))
        .collect()
}

/// Generator objective and its gradient. With `fixed`, the registration
/// loss uses that transform instead of re-solving Procrustes.
#[allow(clippy::too_many_arguments)]
fn generator_pass(
    generator: &Generator,
    disc: &DiscriminatorParams,
    tuples: &[Triplet],
    ids: &[u64],
    traces: &[DescriptorTrace],
    pair: &PairInputs,
    real: &[Vec<f64>],
    cfg: &TrainConfig,
    fixed: Option<&RigidTransform>,
) -> Result<(GeneratorLosses, Generator, RigidTransform)> {
    if tuples.is_empty() {
        return invalid("generator step needs at least one tuple");
    }
    let slot = |id: u64| ids.binary_search(&id).expect("tuple ids are traced");
    let mut ddesc: Vec<Vec<f64>> = traces.iter().map(|t| vec![0.0; t.descriptor.len()]).collect();
    let w = cfg.weights;

    let scale = w.triplet / tuples.len() as f64;
    let mut l_triplet = 0.0;
    for t in tuples {
        let (a, p) = (slot(t.anchor), slot(t.positive));
        let negs: Vec<usize> = t.negatives.iter().map(|&n| slot(n)).collect();
        let out = triplet_loss(&TripletBatch {
            anchor: traces[a].descriptor.clone(),
            positive: traces[p].descriptor.clone(),
            negatives: negs.iter().map(|&n| traces[n].descriptor.clone()).collect(),
            margin: cfg.margin,
        })?;
        l_triplet += out.loss;
        if out.loss > 0.0 && scale != 0.0 {
            axpy(&mut ddesc[a], scale, &out.d_anchor);
            axpy(&mut ddesc[p], scale, &out.d_positive);
            let h = out.hardest;
            axpy(&mut ddesc[negs[h]], scale, &out.d_negatives[h]);
        }
    }
    l_triplet /= tuples.len() as f64;

    let virt: Vec<Vec<f64>> = traces.iter().map(|t| t.descriptor.clone()).collect();
    let adv = adversarial_losses(disc, real, &virt)?;
    for (d, g) in ddesc.iter_mut().zip(&adv.d_virtual) {
        axpy(d, 1.0, g);
    }

    let mut grad = generator.zeros_like();
    let (psi_p, cache_p) = feature_map_forward(&pair.ip.raw, &pair.ip.neighbors, &generator.features)?;
    let (psi_q, cache_q) = feature_map_forward(&pair.iq.raw, &pair.iq.neighbors, &generator.features)?;
    let trace = register_trace(
        &pair.pair.source,
        &pair.pair.target,
        &psi_p,
        &psi_q,
        Some(&generator.lam),
        &regnet_config(cfg),
        fixed,
    )?;
    let l_reg = trace.output.loss;
    let transform = trace.output.transform;
    if w.reg != 0.0 {
        let mut lam_grad = generator.lam.zeros_like();
        let (dpp, dpq) = register_backward(&trace, &pair.pair.target, Some(&generator.lam), Some(&mut lam_grad));
        grad.lam.add_scaled(&lam_grad, w.reg);
        feature_map_backward_into(&generator.features, &cache_p, &(dpp * w.reg), &mut grad.features);
        feature_map_backward_into(&generator.features, &cache_q, &(dpq * w.reg), &mut grad.features);
    }

    for (t, d) in traces.iter().zip(&ddesc) {
        if d.iter().any(|&v| v != 0.0) {
            descriptor_backward(t, &generator.features, &generator.proj, d, &mut grad.features, &mut grad.proj);
        }
    }
    let losses = GeneratorLosses {
        l_triplet,
        l_reg,
        l_gen: adv.l_gen,
        total: generator_objective(l_triplet, l_reg, adv.l_gen, &w),
    };
    Ok((losses, grad, transform))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Relative agreement used by the spot gradient checks.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compares `analytic` against central differences of `objective` at a
/// random 1% of coordinates. Each coordinate is tried at two step sizes;
/// failing both is an error.
pub fn spot_check_gradient<P: ParamSet>(
    params: &P,
    analytic: &P,
    mut objective: impl FnMut(&P) -> Result<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let base = params.flatten();
    let grad = analytic.flatten();
    let count = base.len().div_ceil(100).max(1).min(base.len());
    let picks = index::sample(rng, base.len(), count).into_vec();
    let mut eval = |i: usize, h: f64| -> Result<f64> {
        let mut shifted = base.clone();
        shifted[i] = base[i] + h;
        let plus = objective(&with_values(params, &shifted))?;
        shifted[i] = base[i] - h;
        let minus = objective(&with_values(params, &shifted))?;
        Ok((plus - minus) / (2.0 * h))
    };
    for &i in &picks {
        let ok = |num: f64| (num - grad[i]).abs() <= GRAD_CHECK_TOL * num.abs().max(grad[i].abs()) + 1e-8;
        let first = eval(i, 1e-5)?;
        if ok(first) {
            continue;
        }
        let second = eval(i, 1e-7)?;
        if !ok(second) {
            return Err(Error::GradientCheck(format!(
                "coordinate {i}: analytic {} vs numeric {first} / {second}",
                grad[i]
            )));
        }
    }
    Ok(count)
}

fn with_values<P: ParamSet>(like: &P, flat: &[f64]) -> P {
    let mut out = like.clone();
    let mut off = 0;
    out.visit_mut(&mut |_, v| {
        v.copy_from_slice(&flat[off..off + v.len()]);
        off += v.len();
    });
    out
}

fn check_rng(state: &TrainState, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(state.step * 2 + salt);
    rng
}

/// One optimizer step on the discriminator; returns `L_Dis` before the step.
pub fn train_step_discriminator(
    state: &mut TrainState,
    real: &[Vec<f64>],
    virt: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let adv = adversarial_losses(&state.discriminator, real, virt)?;
    if cfg.check_grads {
        let mut rng = check_rng(state, 0);
        spot_check_gradient(
            &state.discriminator,
            &adv.grad_discriminator,
            |d| adversarial_losses(d, real, virt).map(|a| a.l_dis),
            &mut rng,
        )?;
    }
    state.opt_d.update(&mut state.discriminator, &adv.grad_discriminator);
    Ok(adv.l_dis)
}

fn generator_step_with(
    state: &mut TrainState,
    tuples: &[Triplet],
    ids: &[u64],
    traces: &[DescriptorTrace],
    data: &Dataset,
    pair: &RegistrationPair,
    real: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<GeneratorLosses> {
    let pin = PairInputs::new(pair, cfg.knn)?;
    let (losses, grad, transform) = generator_pass(
        &state.generator,
        &state.discriminator,
        tuples,
        ids,
        traces,
        &pin,
        real,
        cfg,
        None,
    )?;
    if cfg.check_grads {
        let mut rng = check_rng(state, 1);
        let disc = &state.discriminator;
        spot_check_gradient(
            &state.generator,
            &grad,
            |g| {
                let tr = trace_frames(g, data, ids, cfg)?;
                generator_pass(g, disc, tuples, ids, &tr, &pin, real, cfg, Some(&transform)).map(|r| r.0.total)
            },
            &mut rng,
        )?;
    }
    state.opt_g.update(&mut state.generator, &grad);
    Ok(losses)
}

/// One optimizer step on the generator. `real` holds real-domain
/// descriptors (they do not enter `L_Gen` but complete the adversarial batch).
pub fn train_step_generator(
    state: &mut TrainState,
    data: &Dataset,
    tuples: &[Triplet],
    pair: &RegistrationPair,
    real: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<GeneratorLosses> {
    let ids = unique_ids(tuples);
    let traces = trace_frames(&state.generator, data, &ids, cfg)?;
    generator_step_with(state, tuples, &ids, &traces, data, pair, real, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub l_triplet: f64,
    pub l_reg: f64,
    pub l_gen: f64,
    pub l_dis: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,L_triplet,L_reg,L_Gen,L_Dis,total";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.l_triplet, r.l_reg, r.l_gen, r.l_dis, r.total
        ));
    }
    s
}

/// Fresh state with input standardisation fitted to the virtual frames.
pub fn initial_state(virt: &Dataset, cfg: &TrainConfig) -> TrainState {
    let mut state = TrainState::new(cfg);
    let samples: Vec<Array2<f64>> = virt.frames.iter().map(|f| f.inputs.raw.clone()).collect();
    state.generator.features.calibrate_inputs(&samples);
    // moment buffers mirror the non-trainable fields too
    state.opt_g = Optimizer::new(cfg.optimizer, cfg.lr_g, &state.generator);
    state
}

/// Runs `cfg.epochs` epochs. With `out_dir`, writes `epoch_NNN.vprm` after
/// every epoch and keeps `metrics.csv` current.
pub fn train(
    virt: &Dataset,
    real: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<MetricsRow>)> {
    cfg.validate()?;
    if virt.is_empty() {
        return Err(Error::EmptyDataset("virtual dataset is empty".into()));
    }
    if real.is_empty() {
        return Err(Error::EmptyDataset("real dataset is empty".into()));
    }
    let mut state = initial_state(virt, cfg);
    let mut metrics = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    if cfg.epochs == 0 {
        return Ok((state, metrics));
    }
    let mut mine_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tuples = mine_triplets(&virt.rows(), cfg, &mut mine_rng)?;
    for e in 0..cfg.epochs as u64 {
        let mut rng = state.epoch_rng(e);
        let mut order = tuples.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let real_take = cfg.batch.min(real.len());
            let real_inputs: Vec<&CloudInputs> = index::sample(&mut rng, real.len(), real_take)
                .into_iter()
                .map(|i| &real.frames[i].inputs)
                .collect();
            let anchor = virt.frame(batch[0].anchor)?;
            let pair = sample_registration_pair(&anchor.cloud, cfg, &mut rng)?;

            let real_desc = describe_all(&state.generator, &real_inputs, cfg)?;
            let ids = unique_ids(batch);
            let traces = trace_frames(&state.generator, virt, &ids, cfg)?;
            let virt_desc: Vec<Vec<f64>> = traces.iter().map(|t| t.descriptor.clone()).collect();
            let l_dis = train_step_discriminator(&mut state, &real_desc, &virt_desc, cfg)?;
            let g = generator_step_with(&mut state, batch, &ids, &traces, virt, &pair, &real_desc, cfg)?;
            let row = MetricsRow {
                epoch: e,
                step: state.step,
                l_triplet: g.l_triplet,
                l_reg: g.l_reg,
                l_gen: g.l_gen,
                l_dis,
                total: g.total,
            };
            log::debug!("{row:?}");
            metrics.push(row);
            state.step += 1;
        }
        state.epoch = e + 1;
        if let Some(dir) = out_dir {
            state.save(&dir.join(format!("epoch_{:03}.vprm", e + 1)))?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        }
        log::info!("epoch {} done, {} steps", e + 1, state.step);
    }
    Ok((state, metrics))
}
