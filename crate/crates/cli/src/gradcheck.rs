//! Finite-difference checks of the layer library and the full denoiser loss.

use crate::config::GradcheckConfig;
use ovlabel_core::denoiser::{
    canonical_box, noised_state, rasterize_bev, sample_loss, sample_loss_value, BevConfig,
    DenoiserModel, ModelConfig, TrainConfig,
};
use ovlabel_core::nn::{
    attention, attention_backward, gelu, gelu_backward, gradient_check, gradient_check_split,
    Embedding, GradCheckOptions, GradCheckReport, LayerNorm, Linear, ParamStore, Tensor,
};
use ovlabel_core::scene::{generate_scene, Scene, SceneConfig};
use ovlabel_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub checks: Vec<NamedReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Model used for the loss check: full architecture on a small grid.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        bev: BevConfig {
            half_extent: 16.0,
            cell: 0.5,
            token_stride: 8,
        },
        ..ModelConfig::default()
    }
}

fn check_scene(seed: u64) -> Result<Scene> {
    let cfg = SceneConfig {
        half_extent: 16.0,
        min_range: 3.0,
        max_range: 14.0,
        clutter_points: 300,
        ..SceneConfig::default()
    }
    .with_counts([
        ("car", 2),
        ("bicycle", 1),
        ("barrier", 1),
        ("pedestrian", 2),
        ("trailer", 1),
    ]);
    generate_scene(&cfg, seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn layer_stack(opts: &GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x_id = store.add("x", rand_tensor(&[3, 5], &mut rng));
    let l1 = Linear::new(&mut store, "l1", 5, 6, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    for v in store.get_mut(ln.gamma).data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    let emb = Embedding::new(&mut store, "emb", 4, 6, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 6, 2, &mut rng);
    let proj = rand_tensor(&[3, 2], &mut rng);
    gradient_check(
        &mut store,
        |s| {
            let x = s.get(x_id).clone();
            let h = l1.forward(s, &x)?;
            let e = emb.forward(s, 2)?;
            let mut he = h.clone();
            for r in 0..he.rows() {
                for c in 0..6 {
                    he.data_mut()[r * 6 + c] += e.data()[c];
                }
            }
            let a = gelu(&he);
            let (n, cache) = ln.forward(s, &a)?;
            let y = l2.forward(s, &n)?;
            let mut g = s.zero_grads();
            let dn = l2.backward(s, &mut g, &n, &proj);
            let da = ln.backward(s, &mut g, &cache, &dn);
            let dh = gelu_backward(&he, &da);
            let mut de = vec![0.0; 6];
            for r in 0..dh.rows() {
                for (c, d) in de.iter_mut().enumerate() {
                    *d += dh.data()[r * 6 + c];
                }
            }
            emb.backward(&mut g, 2, &Tensor::row(de)?);
            let dx = l1.backward(s, &mut g, &x, &dh);
            g.get_mut(x_id).copy_from_slice(dx.data());
            Ok((dot(&y, &proj), g))
        },
        opts,
    )
}

fn attention_check(opts: &GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (6, 4);
    let mut store = ParamStore::new();
    let q_id = store.add("q", rand_tensor(&[1, d], &mut rng));
    let k_id = store.add("k", rand_tensor(&[l, d], &mut rng));
    let v_id = store.add("v", rand_tensor(&[l, d], &mut rng));
    let proj = rand_tensor(&[1, d], &mut rng);
    gradient_check(
        &mut store,
        |s| {
            let (q, k, v) = (s.get(q_id), s.get(k_id), s.get(v_id));
            let (out, w) = attention(q, k, v)?;
            let (dq, dk, dv) = attention_backward(q, k, v, &w, &proj);
            let mut g = s.zero_grads();
            g.get_mut(q_id).copy_from_slice(dq.data());
            g.get_mut(k_id).copy_from_slice(dk.data());
            g.get_mut(v_id).copy_from_slice(dv.data());
            Ok((dot(&out, &proj), g))
        },
        opts,
    )
}

/// Gradient of the full training loss for `cfg.states` random noisy states.
/// The zero-initialized residual output layer is randomized first so every
/// parameter receives gradient; the confidence target is pinned per state.
pub fn denoiser_checks(cfg: &GradcheckConfig) -> Result<Vec<NamedReport>> {
    let opts = GradCheckOptions {
        max_per_param: cfg.max_per_param,
        tolerance: cfg.tolerance,
        ..GradCheckOptions::default()
    };
    let mut model = DenoiserModel::new(ModelConfig {
        init_seed: cfg.seed,
        ..check_model_config()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6ead);
    for p in model.store.params_mut() {
        if p.name.starts_with("res2") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let scene = check_scene(cfg.seed)?;
    let bev = rasterize_bev(&scene, &model.config.bev)?;
    let train = TrainConfig {
        model: model.config,
        ..TrainConfig::default()
    };
    let mut out = Vec::with_capacity(cfg.states);
    for i in 0..cfg.states {
        let g = &scene.gt[i % scene.gt.len()];
        let b0 = canonical_box(&g.bbox);
        let sc = g.category.super_category;
        let x0 = model.codec.encode(&b0, sc);
        let t = rng.gen_range(1..=train.t_train_max);
        let xt = noised_state(&model, &x0, t, &mut rng);
        let q = sample_loss(
            &model,
            &model.store,
            &bev,
            &xt,
            &x0,
            &b0,
            t,
            sc,
            &train,
            None,
        )?
        .quality;
        let mut store = model.store.clone();
        let report = gradient_check_split(
            &mut store,
            |s| Ok(sample_loss(&model, s, &bev, &xt, &x0, &b0, t, sc, &train, Some(q))?.grads),
            |s| sample_loss_value(&model, s, &bev, &xt, &x0, &b0, t, sc, &train, Some(q)),
            &opts,
        )?;
        out.push(NamedReport {
            name: format!("denoiser state {i} ({}, t={t})", g.category.name),
            report,
        });
    }
    Ok(out)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    let opts = GradCheckOptions {
        tolerance: cfg.tolerance,
        ..GradCheckOptions::default()
    };
    let mut checks = vec![
        NamedReport {
            name: "layer stack".into(),
            report: layer_stack(&opts, cfg.seed)?,
        },
        NamedReport {
            name: "attention".into(),
            report: attention_check(&opts, cfg.seed)?,
        },
    ];
    checks.extend(denoiser_checks(cfg)?);
    let max_rel_err = checks
        .iter()
        .map(|c| c.report.max_rel_err)
        .fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.report.passed);
    Ok(GradcheckSummary {
        checks,
        max_rel_err,
        passed,
    })
}
