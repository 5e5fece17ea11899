use super::bev::{BevConfig, BevGrid, BEV_CHANNELS};
use super::{
    DiffusionSchedule, Prediction, ResidualPredictor, ScheduleConfig, StateCodec, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{
    attention, attention_backward, gelu, gelu_backward, sinusoidal_embedding, Embedding, Grads,
    LayerNorm, LayerNormCache, Linear, ParamStore, Tensor,
};
use crate::scene::NUM_SUPER_CATEGORIES;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Channel scaling applied to sampled and pooled BEV features.
const FEATURE_SCALE: [f64; BEV_CHANNELS] = [1.0, 0.5, 0.5, 0.5, 1.0, 1.0 / 30.0];
const TOKEN_DIM: usize = BEV_CHANNELS + 3;
/// Mass and mean lattice position appended per stencil.
const CENTROID_DIM: usize = 3;
/// Meters per unit of the relative token position and box centre inputs.
const POSITION_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub conf_hidden: usize,
    /// The local feature samples a `stencil × stencil` lattice over the box.
    pub stencil: usize,
    /// Lattice half-width as a multiple of the box half-size.
    pub stencil_span: f64,
    /// Half-width in meters of a second, size-independent, world-aligned
    /// lattice.
    pub metric_span: f64,
    pub bev: BevConfig,
    pub schedule: ScheduleConfig,
    /// Seeds parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            conf_hidden: 16,
            stencil: 9,
            stencil_span: 1.25,
            metric_span: 2.0,
            bev: BevConfig::default(),
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) || self.conf_hidden == 0 {
            return Err(Error::Config(
                "hidden widths must be positive and even".into(),
            ));
        }
        if self.stencil == 0 || !(self.stencil_span > 0.0) || !(self.metric_span > 0.0) {
            return Err(Error::Config("stencil must be nonempty".into()));
        }
        self.bev.cells_per_side()?;
        DiffusionSchedule::new(self.schedule)?;
        Ok(())
    }

    /// Evenly spaced lattice coordinates in `[-1, 1]`.
    fn stencil_offsets(&self) -> Vec<f64> {
        let k = self.stencil;
        if k == 1 {
            return vec![0.0];
        }
        (0..k)
            .map(|i| -1.0 + 2.0 * i as f64 / (k - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    local: Linear,
    box1: Linear,
    box2: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    norm: LayerNorm,
    super_emb: Embedding,
    cond1: Linear,
    cond2: Linear,
    film: Linear,
    res1: Linear,
    res2: Linear,
    conf1: Linear,
    conf2: Linear,
}

/// The residual network together with its normalization and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub codec: StateCodec,
    pub schedule: DiffusionSchedule,
    pub store: ParamStore,
    layers: Layers,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    super_cat: usize,
    stencil_feat: Tensor,
    local_pre: Tensor,
    box_in: Tensor,
    box1_pre: Tensor,
    box1: Tensor,
    query_in: Tensor,
    q: Tensor,
    tokens: Tensor,
    k: Tensor,
    v: Tensor,
    attn_w: Vec<f64>,
    norm_cache: LayerNormCache,
    hq: Tensor,
    cond_in: Tensor,
    cond1_pre: Tensor,
    cond1: Tensor,
    cond: Tensor,
    cond_act: Tensor,
    gamma_beta: Tensor,
    film_out: Tensor,
    res1_pre: Tensor,
    res1: Tensor,
    raw: [f64; STATE_DIM],
    conf1_pre: Tensor,
    conf1: Tensor,
    logit: f64,
}

impl Trace {
    /// Unscaled residual head output.
    pub fn raw(&self) -> &[f64; STATE_DIM] {
        &self.raw
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }

    /// The conditioned feature both heads read from.
    pub fn film_features(&self) -> &[f64] {
        self.film_out.data()
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut v = a.data().to_vec();
    v.extend_from_slice(b.data());
    Tensor::row(v)
}

fn split(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (a, b) = t.data().split_at(at);
    (
        Tensor::row(a.to_vec()).expect("finite"),
        Tensor::row(b.to_vec()).expect("finite"),
    )
}

impl DenoiserModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut s = ParamStore::new();
        let c = config.hidden;
        let ch = config.conf_hidden;
        let k2 = 2 * (config.stencil * config.stencil * BEV_CHANNELS + CENTROID_DIM);
        let local = Linear::new(&mut s, "local", k2, c, &mut rng);
        let box1 = Linear::new(&mut s, "box1", STATE_DIM, c, &mut rng);
        let box2 = Linear::new(&mut s, "box2", c, c, &mut rng);
        let query = Linear::new(&mut s, "query", 2 * c, c, &mut rng);
        let key = Linear::new(&mut s, "key", TOKEN_DIM, c, &mut rng);
        let value = Linear::new(&mut s, "value", TOKEN_DIM, c, &mut rng);
        let norm = LayerNorm::new(&mut s, "norm", c);
        let super_emb = Embedding::new(&mut s, "super_emb", NUM_SUPER_CATEGORIES, c, &mut rng);
        let cond1 = Linear::new(&mut s, "cond1", 2 * c, c, &mut rng);
        let cond2 = Linear::new(&mut s, "cond2", c, c, &mut rng);
        let film = Linear::new(&mut s, "film", c, 2 * c, &mut rng);
        // start FiLM at the identity scale
        s.get_mut(film.b).data_mut()[..c]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        let res1 = Linear::new(&mut s, "res1", c, c, &mut rng);
        let res2 = Linear::zeros(&mut s, "res2", c, STATE_DIM);
        let conf1 = Linear::new(&mut s, "conf1", c, ch, &mut rng);
        let conf2 = Linear::new(&mut s, "conf2", ch, 1, &mut rng);
        Ok(Self {
            codec: StateCodec::default_for_extent(config.bev.half_extent),
            schedule: DiffusionSchedule::new(config.schedule)?,
            config,
            store: s,
            layers: Layers {
                local,
                box1,
                box2,
                query,
                key,
                value,
                norm,
                super_emb,
                cond1,
                cond2,
                film,
                res1,
                res2,
                conf1,
                conf2,
            },
        })
    }

    fn stencil_features(&self, bev: &BevGrid, x: &[f64; STATE_DIM], sc: usize) -> Result<Tensor> {
        let e = self.codec.half_extent;
        let m = super::super_category_means()[sc];
        let (cx, cy) = (x[0] * e, x[1] * e);
        let span = self.config.stencil_span;
        let hl = 0.5 * m[0] * x[3].clamp(-3.0, 3.0).exp();
        let hw = 0.5 * m[1] * x[4].clamp(-3.0, 3.0).exp();
        let n = x[6].hypot(x[7]);
        let (sn, cs) = if n > 0.0 {
            (x[6] / n, x[7] / n)
        } else {
            (0.0, 1.0)
        };
        let offs = self.config.stencil_offsets();
        let mut f = Vec::with_capacity(2 * (offs.len() * offs.len() * BEV_CHANNELS + CENTROID_DIM));
        let ms = self.config.metric_span;
        // the size-relative lattice follows the box; the metric one stays
        // on world axes
        for (su, sv, sn, cs) in [(span * hl, span * hw, sn, cs), (ms, ms, 0.0, 1.0)] {
            // occupancy-weighted centroid of the lattice, in lattice units
            let (mut mass, mut mu, mut mv) = (0.0, 0.0, 0.0);
            for a in &offs {
                for b in &offs {
                    let (u, v) = (a * su, b * sv);
                    let s = bev.sample(cx + cs * u - sn * v, cy + sn * u + cs * v);
                    mass += s[0];
                    mu += s[0] * a;
                    mv += s[0] * b;
                    f.extend(s.iter().zip(FEATURE_SCALE).map(|(v, k)| v * k));
                }
            }
            let n = mass.max(1e-6);
            f.extend([(1.0 + mass).ln(), mu / n, mv / n]);
        }
        Tensor::row(f)
    }

    fn token_features(&self, bev: &BevGrid, cx: f64, cy: f64) -> Result<Tensor> {
        let t = bev.num_tokens();
        let mut data = Vec::with_capacity(t * TOKEN_DIM);
        for (i, xy) in bev.token_xy.iter().enumerate() {
            let pooled = &bev.tokens[i * BEV_CHANNELS..(i + 1) * BEV_CHANNELS];
            data.extend(pooled.iter().zip(FEATURE_SCALE).map(|(v, k)| v * k));
            let (dx, dy) = (xy[0] - cx, xy[1] - cy);
            data.extend([
                dx / POSITION_SCALE,
                dy / POSITION_SCALE,
                dx.hypot(dy) / POSITION_SCALE,
            ]);
        }
        Tensor::from_vec(&[t, TOKEN_DIM], data)
    }

    /// Forward pass using the parameter values in `store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        bev: &BevGrid,
        x: &[f64; STATE_DIM],
        t: usize,
        super_cat: usize,
    ) -> Result<Trace> {
        if super_cat >= NUM_SUPER_CATEGORIES {
            return Err(Error::Domain {
                op: "super_category",
                value: super_cat as f64,
            });
        }
        if t > self.schedule.t_max() {
            return Err(Error::Domain {
                op: "timestep",
                value: t as f64,
            });
        }
        if bev.config != self.config.bev {
            return Err(Error::Config(
                "BEV grid layout differs from the model's".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser state"));
        }
        let e = self.codec.half_extent;
        let (cx, cy) = (x[0] * e, x[1] * e);
        if !bev.contains(cx, cy) {
            return Err(Error::OutOfExtent { x: cx, y: cy });
        }
        let l = &self.layers;
        let c = self.config.hidden;

        let stencil_feat = self.stencil_features(bev, x, super_cat)?;
        let local_pre = l.local.forward(store, &stencil_feat)?;
        let local = gelu(&local_pre);

        let mut bi = x.to_vec();
        bi[0] = cx / POSITION_SCALE;
        bi[1] = cy / POSITION_SCALE;
        bi[2] = x[2] * e;
        let box_in = Tensor::row(bi)?;
        let box1_pre = l.box1.forward(store, &box_in)?;
        let box1 = gelu(&box1_pre);
        let phi = l.box2.forward(store, &box1)?;

        let query_in = concat(&local, &phi)?;
        let q = l.query.forward(store, &query_in)?;
        let tokens = self.token_features(bev, cx, cy)?;
        let k = l.key.forward(store, &tokens)?;
        let v = l.value.forward(store, &tokens)?;
        let (a, attn_w) = attention(&q, &k, &v)?;
        let resid = Tensor::row(q.data().iter().zip(a.data()).map(|(p, r)| p + r).collect())?;
        let (hq, norm_cache) = l.norm.forward(store, &resid)?;

        let e_t = Tensor::row(sinusoidal_embedding(t as f64, c))?;
        let e_s = l.super_emb.forward(store, super_cat)?;
        let cond_in = concat(&e_t, &e_s)?;
        let cond1_pre = l.cond1.forward(store, &cond_in)?;
        let cond1 = gelu(&cond1_pre);
        let cond = l.cond2.forward(store, &cond1)?;
        let cond_act = gelu(&cond);
        let gamma_beta = l.film.forward(store, &cond_act)?;
        let gb = gamma_beta.data();
        let film_out = Tensor::row((0..c).map(|i| gb[i] * hq.data()[i] + gb[c + i]).collect())?;

        let res1_pre = l.res1.forward(store, &film_out)?;
        let res1 = gelu(&res1_pre);
        let raw_t = l.res2.forward(store, &res1)?;
        let mut raw = [0.0; STATE_DIM];
        raw.copy_from_slice(raw_t.data());

        let conf1_pre = l.conf1.forward(store, &film_out)?;
        let conf1 = gelu(&conf1_pre);
        let logit = l.conf2.forward(store, &conf1)?.data()[0];

        Ok(Trace {
            super_cat,
            stencil_feat,
            local_pre,
            box_in,
            box1_pre,
            box1,
            query_in,
            q,
            tokens,
            k,
            v,
            attn_w,
            norm_cache,
            hq,
            cond_in,
            cond1_pre,
            cond1,
            cond,
            cond_act,
            gamma_beta,
            film_out,
            res1_pre,
            res1,
            raw,
            conf1_pre,
            conf1,
            logit,
        })
    }

    pub fn forward(
        &self,
        bev: &BevGrid,
        x: &[f64; STATE_DIM],
        t: usize,
        super_cat: usize,
    ) -> Result<Trace> {
        self.forward_with(&self.store, bev, x, t, super_cat)
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the raw residual output and the confidence logit.
    pub fn backward_with(
        &self,
        store: &ParamStore,
        tr: &Trace,
        d_raw: &[f64; STATE_DIM],
        d_logit: f64,
        grads: &mut Grads,
    ) -> Result<()> {
        let l = &self.layers;
        let c = self.config.hidden;

        let d = l
            .res2
            .backward(store, grads, &tr.res1, &Tensor::row(d_raw.to_vec())?);
        let d = gelu_backward(&tr.res1_pre, &d);
        let d_film_r = l.res1.backward(store, grads, &tr.film_out, &d);

        let d = l
            .conf2
            .backward(store, grads, &tr.conf1, &Tensor::row(vec![d_logit])?);
        let d = gelu_backward(&tr.conf1_pre, &d);
        let d_film_c = l.conf1.backward(store, grads, &tr.film_out, &d);

        let d_film: Vec<f64> = d_film_r
            .data()
            .iter()
            .zip(d_film_c.data())
            .map(|(a, b)| a + b)
            .collect();
        let gb = tr.gamma_beta.data();
        let hq = tr.hq.data();
        let mut d_gb = vec![0.0; 2 * c];
        let mut d_hq = vec![0.0; c];
        for i in 0..c {
            d_gb[i] = d_film[i] * hq[i];
            d_gb[c + i] = d_film[i];
            d_hq[i] = d_film[i] * gb[i];
        }

        let d = l
            .film
            .backward(store, grads, &tr.cond_act, &Tensor::row(d_gb)?);
        let d = gelu_backward(&tr.cond, &d);
        let d = l.cond2.backward(store, grads, &tr.cond1, &d);
        let d = gelu_backward(&tr.cond1_pre, &d);
        let d_cond_in = l.cond1.backward(store, grads, &tr.cond_in, &d);
        let (_, d_es) = split(&d_cond_in, c);
        l.super_emb.backward(grads, tr.super_cat, &d_es);

        let d_resid = l
            .norm
            .backward(store, grads, &tr.norm_cache, &Tensor::row(d_hq)?);
        let (dq_attn, dk, dv) = attention_backward(&tr.q, &tr.k, &tr.v, &tr.attn_w, &d_resid);
        l.key.backward_params(grads, &tr.tokens, &dk);
        l.value.backward_params(grads, &tr.tokens, &dv);
        let d_q = Tensor::row(
            d_resid
                .data()
                .iter()
                .zip(dq_attn.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;

        let d_query_in = l.query.backward(store, grads, &tr.query_in, &d_q);
        let (d_local, d_phi) = split(&d_query_in, c);
        let d = l.box2.backward(store, grads, &tr.box1, &d_phi);
        let d = gelu_backward(&tr.box1_pre, &d);
        l.box1.backward_params(grads, &tr.box_in, &d);
        let d = gelu_backward(&tr.local_pre, &d_local);
        l.local.backward_params(grads, &tr.stencil_feat, &d);
        Ok(())
    }

    /// Residual in state units from a trace.
    pub fn delta(&self, tr: &Trace) -> [f64; STATE_DIM] {
        let mut d = [0.0; STATE_DIM];
        for k in 0..STATE_DIM {
            d[k] = self.codec.noise_scale[k] * tr.raw[k];
        }
        d
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with its exact shape.
    pub fn load_params(&mut self, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Schema {
                path: "params".into(),
                message: format!(
                    "expected {} tensors, found {}",
                    self.store.len(),
                    params.len()
                ),
            });
        }
        for (i, (name, shape, values)) in params.iter().enumerate() {
            let p = &mut self.store.params_mut()[i];
            if &p.name != name {
                return Err(Error::Schema {
                    path: format!("params[{i}].name"),
                    message: format!("expected {:?}, found {name:?}", p.name),
                });
            }
            if p.value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    expected: p.value.shape().to_vec(),
                    got: shape.clone(),
                });
            }
            p.value = Tensor::from_vec(shape, values.clone())?;
        }
        Ok(())
    }
}

impl ResidualPredictor for DenoiserModel {
    fn codec(&self) -> &StateCodec {
        &self.codec
    }

    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn predict(
        &self,
        bev: &BevGrid,
        x: &[f64; STATE_DIM],
        t: usize,
        super_cat: usize,
    ) -> Result<Prediction> {
        let tr = self.forward(bev, x, t, super_cat)?;
        Ok(Prediction {
            delta: self.delta(&tr),
            logit: tr.logit,
        })
    }
}
