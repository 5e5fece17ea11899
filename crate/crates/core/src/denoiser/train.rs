use super::bev::{rasterize_bev, BevGrid};
use super::model::{DenoiserModel, ModelConfig};
use super::{canonical_box, renormalize_yaw, varifocal_with_logit, ResidualPredictor, STATE_DIM};
use crate::error::{Error, Result};
use crate::geom::{iou_3d, Box3D};
use crate::nn::{AdamW, AdamWState, Grads, ParamStore};
use crate::scene::io::{check_version, read_json, typed, write_json};
use crate::scene::Scene;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamW,
    /// Learning rate decays along a half cosine to this fraction of `lr`.
    pub final_lr_fraction: f64,
    pub epochs: usize,
    /// Scenes whose boxes form one optimizer step.
    pub scenes_per_step: usize,
    /// Independent noise draws per box per step.
    pub draws_per_box: usize,
    /// Noise timesteps are drawn uniformly from `[1, t_train_max]`.
    pub t_train_max: usize,
    pub lambda_conf: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
    /// Stop once this many optimizer steps have run in total.
    pub stop_after_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamW {
                lr: 2e-3,
                ..AdamW::default()
            },
            final_lr_fraction: 0.05,
            epochs: 4,
            scenes_per_step: 2,
            draws_per_box: 2,
            t_train_max: 400,
            lambda_conf: 1.0,
            focal_alpha: 0.75,
            focal_gamma: 2.0,
            seed: 0,
            stop_after_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.scenes_per_step == 0 || self.draws_per_box == 0 {
            return Err(Error::Config(
                "scenes_per_step and draws_per_box must be positive".into(),
            ));
        }
        if self.t_train_max == 0 || self.t_train_max > self.model.schedule.t_max {
            return Err(Error::Config(format!(
                "t_train_max must lie in [1, {}]",
                self.model.schedule.t_max
            )));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("learning rate schedule is invalid".into()));
        }
        if !(self.lambda_conf >= 0.0) {
            return Err(Error::Config("lambda_conf must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where a run stands; enough to resume it exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProgress {
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub l_res: f64,
    pub l_conf: f64,
}

/// One ground-truth box to denoise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    pub scene: usize,
    /// Canonical form of the box.
    pub bbox: Box3D,
    pub super_cat: usize,
}

/// Collects every ground-truth box of the corpus, refusing boxes of
/// categories that must stay unannotated.
pub fn training_samples(scenes: &[Scene]) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (gi, g) in s.gt.iter().enumerate() {
            if !g.category.is_base {
                return Err(Error::Config(format!(
                    "scene {si} box {gi} has category {} which has no training annotations",
                    g.category.name
                )));
            }
            out.push(TrainSample {
                scene: si,
                bbox: canonical_box(&g.bbox),
                super_cat: g.category.super_category,
            });
        }
    }
    Ok(out)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(mix(seed), |acc, p| mix(acc ^ p));
    ChaCha8Rng::seed_from_u64(s)
}

/// Loss terms of one sample and the gradients of their weighted sum.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub loss: f64,
    pub l_res: f64,
    pub l_conf: f64,
    /// The IoU target of the confidence head.
    pub quality: f64,
    pub grads: Grads,
}

struct LossTerms {
    l_res: f64,
    l_conf: f64,
    quality: f64,
    d_raw: [f64; STATE_DIM],
    d_logit: f64,
}

fn loss_terms(
    model: &DenoiserModel,
    raw: &[f64; STATE_DIM],
    logit: f64,
    x_t: &[f64; STATE_DIM],
    x_0: &[f64; STATE_DIM],
    target: &Box3D,
    super_cat: usize,
    cfg: &TrainConfig,
    quality: Option<f64>,
) -> LossTerms {
    let d = model.codec.noise_scale;
    let n = STATE_DIM as f64;
    let mut l_res = 0.0;
    let mut d_raw = [0.0; STATE_DIM];
    let mut x_hat = *x_t;
    for k in 0..STATE_DIM {
        let r = (x_t[k] - x_0[k]) / d[k] + raw[k];
        l_res += r.abs() / n;
        d_raw[k] = r.signum() / n;
        x_hat[k] += d[k] * raw[k];
    }
    let q = match quality {
        Some(q) => q,
        None => iou_3d(&model.codec.decode(&x_hat, super_cat), target),
    };
    let (l_conf, dz) = varifocal_with_logit(logit, q, cfg.focal_alpha, cfg.focal_gamma);
    LossTerms {
        l_res,
        l_conf,
        quality: q,
        d_raw,
        d_logit: cfg.lambda_conf * dz,
    }
}

/// Residual L1 (in noise-scale units) plus the weighted varifocal term for
/// one noisy state. The quality target is treated as a constant; pass
/// `quality` to pin it instead of recomputing it from the prediction.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &DenoiserModel,
    store: &ParamStore,
    bev: &BevGrid,
    x_t: &[f64; STATE_DIM],
    x_0: &[f64; STATE_DIM],
    target: &Box3D,
    t: usize,
    super_cat: usize,
    cfg: &TrainConfig,
    quality: Option<f64>,
) -> Result<SampleLoss> {
    let tr = model.forward_with(store, bev, x_t, t, super_cat)?;
    let lt = loss_terms(
        model,
        tr.raw(),
        tr.logit(),
        x_t,
        x_0,
        target,
        super_cat,
        cfg,
        quality,
    );
    let mut grads = store.zero_grads();
    model.backward_with(store, &tr, &lt.d_raw, lt.d_logit, &mut grads)?;
    Ok(SampleLoss {
        loss: lt.l_res + cfg.lambda_conf * lt.l_conf,
        l_res: lt.l_res,
        l_conf: lt.l_conf,
        quality: lt.quality,
        grads,
    })
}

/// The loss of [`sample_loss`] without the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_value(
    model: &DenoiserModel,
    store: &ParamStore,
    bev: &BevGrid,
    x_t: &[f64; STATE_DIM],
    x_0: &[f64; STATE_DIM],
    target: &Box3D,
    t: usize,
    super_cat: usize,
    cfg: &TrainConfig,
    quality: Option<f64>,
) -> Result<f64> {
    let tr = model.forward_with(store, bev, x_t, t, super_cat)?;
    let lt = loss_terms(
        model,
        tr.raw(),
        tr.logit(),
        x_t,
        x_0,
        target,
        super_cat,
        cfg,
        quality,
    );
    Ok(lt.l_res + cfg.lambda_conf * lt.l_conf)
}

/// Noisy state for a clean box at timestep `t`.
pub fn noised_state(
    model: &DenoiserModel,
    x_0: &[f64; STATE_DIM],
    t: usize,
    rng: &mut impl Rng,
) -> [f64; STATE_DIM] {
    let sigma = model.schedule().sigma(t);
    let mut x = *x_0;
    for k in 0..STATE_DIM {
        let e: f64 = rng.sample(StandardNormal);
        x[k] += sigma * model.codec.noise_scale[k] * e;
    }
    renormalize_yaw(&mut x);
    x
}

fn steps_per_epoch(num_scenes: usize, cfg: &TrainConfig) -> usize {
    num_scenes.div_ceil(cfg.scenes_per_step)
}

fn scene_order(num_scenes: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_scenes).collect();
    order.shuffle(&mut stream(cfg.seed, &[epoch as u64, u64::MAX]));
    order
}

/// Trains `model` from `progress` until the configured epoch count (or step
/// budget) is reached, calling `on_step` after every optimizer step.
/// Per-sample passes run in parallel; gradients are summed in sample order.
pub fn train(
    model: &mut DenoiserModel,
    opt: &mut AdamWState,
    progress: &mut TrainProgress,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord, &DenoiserModel, &AdamWState, &TrainProgress) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.model != model.config {
        return Err(Error::Config(
            "training config does not match the model".into(),
        ));
    }
    let samples = training_samples(scenes)?;
    if samples.is_empty() {
        return Err(Error::Config("training corpus has no boxes".into()));
    }
    let mut by_scene: Vec<Vec<TrainSample>> = vec![Vec::new(); scenes.len()];
    for s in &samples {
        by_scene[s.scene].push(*s);
    }
    let per_epoch = steps_per_epoch(scenes.len(), cfg);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut records = Vec::new();

    while progress.epoch < cfg.epochs {
        let order = scene_order(scenes.len(), cfg, progress.epoch);
        while progress.step_in_epoch < per_epoch {
            if cfg
                .stop_after_steps
                .is_some_and(|n| progress.global_step >= n)
            {
                return Ok(records);
            }
            let chunk = &order[progress.step_in_epoch * cfg.scenes_per_step
                ..((progress.step_in_epoch + 1) * cfg.scenes_per_step).min(order.len())];
            let mut jobs = Vec::new();
            for &si in chunk {
                for s in &by_scene[si] {
                    for _ in 0..cfg.draws_per_box {
                        jobs.push(*s);
                    }
                }
            }
            if !jobs.is_empty() {
                let bevs: Vec<(usize, BevGrid)> = chunk
                    .par_iter()
                    .map(|&si| rasterize_bev(&scenes[si], &cfg.model.bev).map(|g| (si, g)))
                    .collect::<Result<_>>()?;
                let model_ref = &*model;
                let (epoch, step) = (progress.epoch as u64, progress.step_in_epoch as u64);
                let results: Vec<Result<Option<SampleLoss>>> = jobs
                    .par_iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let bev = &bevs
                            .iter()
                            .find(|(si, _)| *si == s.scene)
                            .expect("rasterized")
                            .1;
                        let x_0 = model_ref.codec.encode(&s.bbox, s.super_cat);
                        let mut rng = stream(cfg.seed, &[epoch, step, j as u64]);
                        let t = rng.gen_range(1..=cfg.t_train_max);
                        let x_t = noised_state(model_ref, &x_0, t, &mut rng);
                        match sample_loss(
                            model_ref,
                            &model_ref.store,
                            bev,
                            &x_t,
                            &x_0,
                            &s.bbox,
                            t,
                            s.super_cat,
                            cfg,
                            None,
                        ) {
                            Ok(l) => Ok(Some(l)),
                            Err(Error::OutOfExtent { .. }) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect();
                let mut grads = model.store.zero_grads();
                let (mut loss, mut l_res, mut l_conf, mut n) = (0.0, 0.0, 0.0, 0usize);
                for r in results {
                    if let Some(l) = r? {
                        grads.add_assign(&l.grads);
                        loss += l.loss;
                        l_res += l.l_res;
                        l_conf += l.l_conf;
                        n += 1;
                    }
                }
                if n > 0 {
                    let inv = 1.0 / n as f64;
                    grads.scale(inv);
                    if !grads.is_finite() {
                        return Err(Error::NonFinite("training gradient"));
                    }
                    let frac = progress.global_step as f64 / total.max(1) as f64;
                    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
                    let lr = cfg.optimizer.lr
                        * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
                    cfg.optimizer
                        .step_with_lr(&mut model.store, opt, &grads, lr);
                    let rec = LossRecord {
                        step: progress.global_step,
                        epoch: progress.epoch,
                        loss: loss * inv,
                        l_res: l_res * inv,
                        l_conf: l_conf * inv,
                    };
                    records.push(rec);
                    progress.step_in_epoch += 1;
                    progress.global_step += 1;
                    on_step(&rec, model, opt, progress)?;
                    continue;
                }
            }
            progress.step_in_epoch += 1;
            progress.global_step += 1;
        }
        progress.epoch += 1;
        progress.step_in_epoch = 0;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    header: Option<Value>,
    model_config: ModelConfig,
    params: Vec<ParamRecord>,
    optimizer: AdamWState,
    progress: TrainProgress,
}

/// A trained model with the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub optimizer: AdamWState,
    pub progress: TrainProgress,
    pub header: Option<Value>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &DenoiserModel,
    optimizer: &AdamWState,
    progress: &TrainProgress,
    header: Option<&Value>,
) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        kind: "denoiser".into(),
        header: header.cloned(),
        model_config: model.config,
        params: model
            .store
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect(),
        optimizer: optimizer.clone(),
        progress: *progress,
    };
    write_json(path.as_ref(), &file)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let value = read_json(path)?;
    check_version(path, &value, "checkpoint", CHECKPOINT_VERSION)?;
    let file: CheckpointFile = typed(path, value)?;
    if file.kind != "denoiser" {
        return Err(Error::schema(
            format!("{}: kind", path.display()),
            format!("expected \"denoiser\", found {:?}", file.kind),
        ));
    }
    let mut model = DenoiserModel::new(file.model_config)?;
    let params: Vec<(String, Vec<usize>, Vec<f64>)> = file
        .params
        .into_iter()
        .map(|p| (p.name, p.shape, p.values))
        .collect();
    model.load_params(&params)?;
    let sizes: Vec<usize> = model.store.params().iter().map(|p| p.value.len()).collect();
    let opt = file.optimizer;
    let aligned = |m: &Vec<Vec<f64>>| {
        m.len() == sizes.len() && m.iter().zip(&sizes).all(|(a, n)| a.len() == *n)
    };
    if !aligned(&opt.m) || !aligned(&opt.v) {
        return Err(Error::schema(
            format!("{}: optimizer", path.display()),
            "moment buffers do not match the parameters",
        ));
    }
    Ok(Checkpoint {
        model,
        optimizer: opt,
        progress: file.progress,
        header: file.header,
    })
}
