//! Conditional diffusion refiner for 3D box proposals.
//!
//! A proposal is encoded as an 8-vector (centre, log size relative to its
//! super-category's mean prior, yaw as a unit pair) and treated as a noisy
//! sample part-way along a diffusion schedule. A network trained on
//! ground-truth boxes of annotated categories predicts the residual to the
//! clean box; a deterministic sampler walks the state back to `t = 0`. A
//! second head predicts the IoU of the result, which is blended with the
//! seeker's own score.

mod bev;
mod model;
mod train;

pub use bev::{
    rasterize_bev, rasterize_points, BevConfig, BevGrid, BEV_CHANNELS, BEV_CHANNEL_NAMES,
};
pub use model::{DenoiserModel, ModelConfig, Trace};
pub use train::{
    load_checkpoint, noised_state, sample_loss, sample_loss_value, save_checkpoint, train,
    training_samples, Checkpoint, LossRecord, SampleLoss, TrainConfig, TrainProgress, TrainSample,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D, Point3};
use crate::proposal::Proposal;
use crate::scene::{categories, NUM_SUPER_CATEGORIES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

pub const STATE_DIM: usize = 8;

/// Canonical `[long, short, height]` order of a size triple.
fn long_first(s: [f64; 3]) -> [f64; 3] {
    if s[0] >= s[1] {
        s
    } else {
        [s[1], s[0], s[2]]
    }
}

/// Mean of the canonical priors of the categories in each super category.
pub fn super_category_means() -> [[f64; 3]; NUM_SUPER_CATEGORIES] {
    let mut sum = [[0.0; 3]; NUM_SUPER_CATEGORIES];
    let mut n = [0usize; NUM_SUPER_CATEGORIES];
    for c in categories() {
        let p = long_first(c.prior_size);
        for k in 0..3 {
            sum[c.super_category][k] += p[k];
        }
        n[c.super_category] += 1;
    }
    let mut out = sum;
    for (g, row) in out.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= n[g] as f64;
        }
    }
    out
}

/// Super category of a named class. Classes outside the fixed table fall back
/// to the group whose mean prior is nearest in relative L2 distance.
pub fn super_category_of(name: &str, prior: Option<[f64; 3]>) -> Result<usize> {
    if let Some(c) = crate::scene::Category::by_name(name) {
        return Ok(c.super_category);
    }
    let p = long_first(prior.ok_or_else(|| Error::UnknownCategory(name.to_string()))?);
    let means = super_category_means();
    let dist = |m: &[f64; 3]| {
        let d: f64 = (0..3).map(|k| (p[k] - m[k]).powi(2)).sum::<f64>().sqrt();
        d / m.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    Ok((0..NUM_SUPER_CATEGORIES)
        .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
        .expect("groups exist"))
}

/// The same physical box with its longer horizontal side as `length`.
pub fn canonical_box(b: &Box3D) -> Box3D {
    if b.size[0] >= b.size[1] {
        *b
    } else {
        Box3D::new(
            b.center,
            [b.size[1], b.size[0], b.size[2]],
            b.yaw + FRAC_PI_2,
        )
    }
}

/// Maps boxes to and from the normalized state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateCodec {
    /// Centre coordinates are divided by this.
    pub half_extent: f64,
    /// Per-component scale of the diffusion noise in state units.
    pub noise_scale: [f64; STATE_DIM],
}

impl StateCodec {
    pub fn default_for_extent(half_extent: f64) -> Self {
        let c = 0.5 / half_extent;
        Self {
            half_extent,
            noise_scale: [c, c, 0.2 / half_extent, 0.15, 0.15, 0.15, 0.15, 0.15],
        }
    }

    pub fn encode(&self, b: &Box3D, super_cat: usize) -> [f64; STATE_DIM] {
        let m = super_category_means()[super_cat];
        let e = self.half_extent;
        let (s, c) = b.yaw.sin_cos();
        [
            b.center.x / e,
            b.center.y / e,
            b.center.z / e,
            (b.size[0] / m[0]).ln(),
            (b.size[1] / m[1]).ln(),
            (b.size[2] / m[2]).ln(),
            s,
            c,
        ]
    }

    pub fn decode(&self, x: &[f64; STATE_DIM], super_cat: usize) -> Box3D {
        let m = super_category_means()[super_cat];
        let e = self.half_extent;
        Box3D::new(
            Point3::new(x[0] * e, x[1] * e, x[2] * e),
            [m[0] * x[3].exp(), m[1] * x[4].exp(), m[2] * x[5].exp()],
            x[6].atan2(x[7]),
        )
    }

    /// Applies the state change `from → to` to `b`, leaving `b` bit-identical
    /// when the two states are equal.
    pub fn apply_delta(&self, b: &Box3D, from: &[f64; STATE_DIM], to: &[f64; STATE_DIM]) -> Box3D {
        let e = self.half_extent;
        let cross = from[7] * to[6] - from[6] * to[7];
        let dot = from[6] * to[6] + from[7] * to[7];
        Box3D::new(
            Point3::new(
                b.center.x + e * (to[0] - from[0]),
                b.center.y + e * (to[1] - from[1]),
                b.center.z + e * (to[2] - from[2]),
            ),
            [
                b.size[0] * (to[3] - from[3]).exp(),
                b.size[1] * (to[4] - from[4]).exp(),
                b.size[2] * (to[5] - from[5]).exp(),
            ],
            wrap_angle(b.yaw + cross.atan2(dot)),
        )
    }
}

/// Rescales the yaw pair to unit length unless it already is (to rounding).
pub fn renormalize_yaw(x: &mut [f64; STATE_DIM]) {
    let n = x[6].hypot(x[7]);
    if n > 0.0 && (n - 1.0).abs() > 1e-12 {
        x[6] /= n;
        x[7] /= n;
    } else if n == 0.0 {
        x[6] = 0.0;
        x[7] = 1.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear beta ramp with cumulative signal products. Noise enters as
/// `x_t = x_0 + σ_t ε` with `σ_t = sqrt(1/ᾱ_t - 1)`, the variance-exploding
/// form of the usual `sqrt(ᾱ) x_0 + sqrt(1 - ᾱ) ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.t_max;
        if t == 0
            || !(config.beta_start > 0.0)
            || !(config.beta_end >= config.beta_start)
            || config.beta_end >= 1.0
        {
            return Err(Error::Config(format!(
                "invalid diffusion schedule {config:?}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..t {
            let frac = if t > 1 {
                i as f64 / (t - 1) as f64
            } else {
                0.0
            };
            let beta = config.beta_start + (config.beta_end - config.beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 / self.alpha_bar[t] - 1.0).max(0.0).sqrt()
    }
}

/// `steps + 1` descending timesteps from `t_start` to 0, evenly spaced.
pub fn inference_timesteps(t_start: usize, steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=steps)
        .map(|i| ((t_start as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Residual to the clean state, in state units.
    pub delta: [f64; STATE_DIM],
    pub logit: f64,
}

/// Anything that predicts the clean-state residual for a noisy state.
pub trait ResidualPredictor: Sync {
    fn codec(&self) -> &StateCodec;
    fn schedule(&self) -> &DiffusionSchedule;
    fn predict(
        &self,
        bev: &BevGrid,
        x: &[f64; STATE_DIM],
        t: usize,
        super_cat: usize,
    ) -> Result<Prediction>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub t_start: usize,
    pub steps: usize,
    pub eta: f64,
    /// Seeds the injected noise when `eta > 0`.
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            t_start: 200,
            steps: 8,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.t_start == 0 || self.t_start > schedule.t_max() {
            return Err(Error::Config(format!(
                "t_start must lie in [1, {}], got {}",
                schedule.t_max(),
                self.t_start
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub bbox: Box3D,
    pub confidence: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Walks a proposal from `t_start` back to a clean estimate with the
/// deterministic sampler (plus `eta`-scaled fresh noise when nonzero).
pub fn ddim_refine<M: ResidualPredictor + ?Sized>(
    model: &M,
    bev: &BevGrid,
    bbox: &Box3D,
    super_cat: usize,
    cfg: &RefineConfig,
) -> Result<Refined> {
    let sched = model.schedule();
    cfg.validate(sched)?;
    if super_cat >= NUM_SUPER_CATEGORIES {
        return Err(Error::Domain {
            op: "super_category",
            value: super_cat as f64,
        });
    }
    let codec = model.codec();
    let start = canonical_box(bbox);
    let x_init = codec.encode(&start, super_cat);
    let mut x = x_init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logit = 0.0;
    for w in inference_timesteps(cfg.t_start, cfg.steps).windows(2) {
        let (t, s) = (w[0], w[1]);
        let pred = model.predict(bev, &x, t, super_cat)?;
        logit = pred.logit;
        let mut x0 = x;
        for k in 0..STATE_DIM {
            x0[k] += pred.delta[k];
        }
        let (st, ss) = (sched.sigma(t), sched.sigma(s));
        if ss == 0.0 || st == 0.0 {
            x = x0;
        } else {
            let c = cfg.eta * (ss * ss * (st * st - ss * ss) / (st * st)).max(0.0).sqrt();
            let keep = (ss * ss - c * c).max(0.0).sqrt();
            for k in 0..STATE_DIM {
                let d = codec.noise_scale[k];
                let eps = (x[k] - x0[k]) / (st * d);
                let z: f64 = if c > 0.0 {
                    StandardNormal.sample(&mut rng)
                } else {
                    0.0
                };
                x[k] = x0[k] + d * (keep * eps + c * z);
            }
        }
        renormalize_yaw(&mut x);
    }
    for v in &x {
        if !v.is_finite() {
            return Err(Error::NonFinite("ddim_refine"));
        }
    }
    // report the change in the caller's length/width order
    let (mut from, mut to) = (x_init, x);
    if bbox.size[0] < bbox.size[1] {
        from.swap(3, 4);
        to.swap(3, 4);
    }
    Ok(Refined {
        bbox: codec.apply_delta(bbox, &from, &to),
        confidence: sigmoid(logit),
    })
}

/// Varifocal loss for a predicted probability `p` against quality target `q`.
pub fn varifocal_loss(p: f64, q: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            op: "varifocal_loss",
            value: p,
        });
    }
    let z = (p / (1.0 - p)).ln();
    Ok(varifocal_with_logit(z, q, alpha, gamma).0)
}

/// Varifocal loss and its derivative with respect to the logit.
pub fn varifocal_with_logit(z: f64, q: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    use crate::nn::softplus;
    let p = sigmoid(z);
    if q > 0.0 {
        let loss = q * (q * softplus(-z) + (1.0 - q) * softplus(z));
        (loss, q * (p - q))
    } else {
        let pg = p.powf(gamma);
        let sp = softplus(z);
        let loss = alpha * pg * sp;
        (loss, alpha * (gamma * pg * (1.0 - p) * sp + pg * p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuseWeights {
    pub w_iou: f64,
    pub w_seeker: f64,
}

impl Default for FuseWeights {
    fn default() -> Self {
        Self {
            w_iou: 0.6,
            w_seeker: 0.4,
        }
    }
}

impl FuseWeights {
    pub fn new(w_iou: f64) -> Self {
        Self {
            w_iou,
            w_seeker: 1.0 - w_iou,
        }
    }
}

pub fn fuse_scores(iou_conf: f64, seeker_score: f64, w_iou: f64, w_seeker: f64) -> Result<f64> {
    if (w_iou + w_seeker - 1.0).abs() > 1e-9 || w_iou < 0.0 || w_seeker < 0.0 {
        return Err(Error::Weight { w_iou, w_seeker });
    }
    if w_iou == 0.0 {
        return Ok(seeker_score);
    }
    Ok(w_iou * iou_conf + w_seeker * seeker_score)
}

/// A deterministic corruption applied to proposals to emulate systematic
/// localisation error: centres pushed away from the sensor in proportion to
/// range, sizes scaled, yaw rotated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystematicBias {
    pub radial_shift_per_m: f64,
    pub size_scale: f64,
    pub yaw_offset: f64,
}

impl Default for SystematicBias {
    fn default() -> Self {
        Self {
            radial_shift_per_m: 0.03,
            size_scale: 0.85,
            yaw_offset: 0.0,
        }
    }
}

impl SystematicBias {
    pub fn none() -> Self {
        Self {
            radial_shift_per_m: 0.0,
            size_scale: 1.0,
            yaw_offset: 0.0,
        }
    }

    pub fn apply(&self, b: &Box3D) -> Box3D {
        let r = b.center.bev_norm();
        let (dx, dy) = if r > 1e-9 {
            (b.center.x / r, b.center.y / r)
        } else {
            (0.0, 0.0)
        };
        let shift = self.radial_shift_per_m * r;
        Box3D::new(
            Point3::new(b.center.x + shift * dx, b.center.y + shift * dy, b.center.z),
            b.size.map(|s| s * self.size_scale),
            b.yaw + self.yaw_offset,
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub refined: usize,
    /// Proposals left unrefined because their centre lies off the BEV grid.
    pub out_of_extent: usize,
}

/// Refines every proposal in place, filling `refined_box`, `iou_conf` and
/// `fused_score`. Each proposal's noise stream is seeded from `cfg.seed` and
/// its index.
pub fn refine_proposals<M: ResidualPredictor + ?Sized>(
    model: &M,
    bev: &BevGrid,
    proposals: &mut [Proposal],
    cfg: &RefineConfig,
    weights: &FuseWeights,
) -> Result<RefineStats> {
    cfg.validate(model.schedule())?;
    fuse_scores(0.0, 0.0, weights.w_iou, weights.w_seeker)?;
    let results: Vec<Result<Option<Refined>>> = proposals
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let sc = super_category_of(&p.category.name, Some(p.category.prior_size))?;
            let c = RefineConfig {
                seed: cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..*cfg
            };
            match ddim_refine(model, bev, &p.bbox, sc, &c) {
                Ok(r) => Ok(Some(r)),
                Err(Error::OutOfExtent { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut stats = RefineStats::default();
    for (p, r) in proposals.iter_mut().zip(results) {
        match r? {
            Some(r) => {
                p.refined_box = Some(r.bbox);
                p.iou_conf = Some(r.confidence);
                p.fused_score = Some(fuse_scores(
                    r.confidence,
                    p.seeker_score,
                    weights.w_iou,
                    weights.w_seeker,
                )?);
                stats.refined += 1;
            }
            None => {
                p.refined_box = Some(p.bbox);
                p.iou_conf = Some(0.0);
                p.fused_score = Some(fuse_scores(
                    0.0,
                    p.seeker_score,
                    weights.w_iou,
                    weights.w_seeker,
                )?);
                stats.out_of_extent += 1;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests;
