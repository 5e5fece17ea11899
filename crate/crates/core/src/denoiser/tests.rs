use super::*;
use crate::geom::iou_3d;
use crate::nn::{gradient_check, GradCheckOptions};
use crate::scene::{scene_with_objects, Category, GtObject, Scene, SceneConfig};
use proptest::prelude::*;
use rand::Rng;

fn small_model_config() -> ModelConfig {
    ModelConfig {
        bev: BevConfig {
            half_extent: 16.0,
            cell: 0.5,
            token_stride: 8,
        },
        ..ModelConfig::default()
    }
}

fn scene_of(objects: &[(&str, f64, f64, f64)], seed: u64) -> Scene {
    let cfg = SceneConfig {
        half_extent: 16.0,
        min_range: 3.0,
        max_range: 15.0,
        clutter_points: 200,
        ..SceneConfig::default()
    };
    let gt = objects
        .iter()
        .map(|&(name, x, y, yaw)| {
            let c = Category::by_name(name).unwrap();
            let s = c.prior_size;
            GtObject {
                bbox: Box3D::new(Point3::new(x, y, s[2] / 2.0), s, yaw),
                category: c,
            }
        })
        .collect();
    scene_with_objects(&cfg, gt, seed).unwrap()
}

struct Zero(StateCodec, DiffusionSchedule);

impl ResidualPredictor for Zero {
    fn codec(&self) -> &StateCodec {
        &self.0
    }
    fn schedule(&self) -> &DiffusionSchedule {
        &self.1
    }
    fn predict(&self, _: &BevGrid, _: &[f64; STATE_DIM], _: usize, _: usize) -> Result<Prediction> {
        Ok(Prediction {
            delta: [0.0; STATE_DIM],
            logit: 0.0,
        })
    }
}

/// Returns the exact offset from the current state to a known clean box.
struct Oracle {
    codec: StateCodec,
    schedule: DiffusionSchedule,
    target: Box3D,
}

impl ResidualPredictor for Oracle {
    fn codec(&self) -> &StateCodec {
        &self.codec
    }
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
    fn predict(
        &self,
        _: &BevGrid,
        x: &[f64; STATE_DIM],
        _: usize,
        sc: usize,
    ) -> Result<Prediction> {
        let goal = self.codec.encode(&canonical_box(&self.target), sc);
        let mut delta = [0.0; STATE_DIM];
        for k in 0..STATE_DIM {
            delta[k] = goal[k] - x[k];
        }
        Ok(Prediction { delta, logit: 3.0 })
    }
}

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(ScheduleConfig::default()).unwrap()
}

fn empty_bev() -> BevGrid {
    rasterize_points(&[], &BevConfig::default()).unwrap()
}

#[test]
fn schedule_signal_strictly_decreases() {
    let s = schedule();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.sigma(0), 0.0);
    for t in 1..=s.t_max() {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.sigma(t) > s.sigma(t - 1));
    }
}

#[test]
fn timesteps_descend_to_zero() {
    assert_eq!(
        inference_timesteps(200, 8),
        vec![200, 175, 150, 125, 100, 75, 50, 25, 0]
    );
    assert_eq!(inference_timesteps(200, 1), vec![200, 0]);
    assert_eq!(inference_timesteps(3, 8), vec![3, 2, 1, 0]);
}

#[test]
fn super_category_examples() {
    assert_eq!(super_category_of("truck", None).unwrap(), 0);
    assert_eq!(super_category_of("traffic cone", None).unwrap(), 4);
    assert_eq!(
        super_category_of("bollard", Some([0.5, 0.5, 1.1])).unwrap(),
        4
    );
    assert_eq!(
        super_category_of("tram", Some([11.0, 2.9, 3.5])).unwrap(),
        1
    );
    assert!(matches!(
        super_category_of("bollard", None),
        Err(Error::UnknownCategory(_))
    ));
}

#[test]
fn varifocal_examples() {
    let l = varifocal_loss(0.5, 0.5, 0.75, 2.0).unwrap();
    assert!((l - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!(varifocal_loss(1.0 - 1e-9, 1.0 - 1e-9, 0.75, 2.0).unwrap() < 1e-7);
    assert!(varifocal_loss(1e-9, 0.0, 0.75, 2.0).unwrap() < 1e-17);
    let neg = varifocal_loss(0.3, 0.0, 0.75, 2.0).unwrap();
    assert!((neg - 0.75 * 0.09 * -(0.7f64.ln())).abs() < 1e-12);
    for p in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(
            varifocal_loss(p, 0.5, 0.75, 2.0),
            Err(Error::Domain { .. })
        ));
    }
}

#[test]
fn varifocal_logit_gradient_matches_difference() {
    for &(z, q) in &[(0.3, 0.7), (-1.2, 0.2), (2.0, 0.0), (-0.4, 0.0), (0.0, 1.0)] {
        let h = 1e-6;
        let (lp, _) = varifocal_with_logit(z + h, q, 0.75, 2.0);
        let (lm, _) = varifocal_with_logit(z - h, q, 0.75, 2.0);
        let (_, g) = varifocal_with_logit(z, q, 0.75, 2.0);
        assert!((g - (lp - lm) / (2.0 * h)).abs() < 1e-8, "z={z} q={q}");
    }
}

#[test]
fn fuse_examples() {
    assert!((fuse_scores(1.0, 1.0, 0.6, 0.4).unwrap() - 1.0).abs() < 1e-15);
    assert!((fuse_scores(0.5, 1.0, 0.6, 0.4).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(fuse_scores(0.123, 0.456, 0.0, 1.0).unwrap(), 0.456);
    assert!(matches!(
        fuse_scores(0.5, 0.5, 0.6, 0.5),
        Err(Error::Weight { .. })
    ));
}

#[test]
fn codec_roundtrip() {
    let codec = StateCodec::default_for_extent(48.0);
    let b = Box3D::new(Point3::new(12.5, -7.25, 0.9), [4.4, 1.9, 1.7], 0.8);
    let back = codec.decode(&codec.encode(&b, 0), 0);
    assert!((back.center.x - b.center.x).abs() < 1e-12);
    assert!((back.size[0] - b.size[0]).abs() < 1e-12);
    assert!((back.yaw - b.yaw).abs() < 1e-12);
}

#[test]
fn canonical_box_keeps_footprint() {
    let b = Box3D::new(Point3::new(3.0, 4.0, 0.5), [0.5, 2.53, 0.98], 0.3);
    let c = canonical_box(&b);
    assert!(c.size[0] >= c.size[1]);
    assert!((iou_3d(&b, &c) - 1.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn zero_model_is_exact_fixed_point(
        x in -40.0f64..40.0, y in -40.0f64..40.0, z in 0.2f64..2.0,
        l in 0.3f64..12.0, w in 0.3f64..12.0, h in 0.3f64..4.0,
        yaw in -3.14f64..3.14, sc in 0usize..5, steps in 1usize..10, t in 1usize..1000,
    ) {
        let m = Zero(StateCodec::default_for_extent(48.0), schedule());
        let b = Box3D::new(Point3::new(x, y, z), [l, w, h], yaw);
        let cfg = RefineConfig { t_start: t, steps, ..RefineConfig::default() };
        let r = ddim_refine(&m, &empty_bev(), &b, sc, &cfg).unwrap();
        prop_assert_eq!(r.bbox, b);
        prop_assert_eq!(r.confidence, 0.5);
    }

    #[test]
    fn oracle_recovers_target_in_one_step(
        x in -40.0f64..40.0, y in -40.0f64..40.0,
        dx in -2.0f64..2.0, dy in -2.0f64..2.0, ds in 0.7f64..1.3, dyaw in -0.5f64..0.5,
        yaw in -3.0f64..3.0, sc in 0usize..5,
    ) {
        let gt = Box3D::new(Point3::new(x, y, 0.8), [4.2, 1.8, 1.6], yaw);
        let start = Box3D::new(
            Point3::new(x + dx, y + dy, 0.9),
            [4.2 * ds, 1.8 / ds, 1.6 * ds],
            yaw + dyaw,
        );
        let m = Oracle { codec: StateCodec::default_for_extent(48.0), schedule: schedule(), target: gt };
        let cfg = RefineConfig { steps: 1, ..RefineConfig::default() };
        let r = ddim_refine(&m, &empty_bev(), &start, sc, &cfg).unwrap();
        prop_assert!((r.bbox.center.x - gt.center.x).abs() < 1e-6);
        prop_assert!((r.bbox.center.y - gt.center.y).abs() < 1e-6);
        prop_assert!((r.bbox.center.z - gt.center.z).abs() < 1e-6);
        for k in 0..3 {
            prop_assert!((r.bbox.size[k] - gt.size[k]).abs() < 1e-6);
        }
        prop_assert!(crate::geom::wrap_angle(r.bbox.yaw - gt.yaw).abs() < 1e-6);
    }
}

#[test]
fn oracle_multi_step_also_lands_on_target() {
    let gt = Box3D::new(Point3::new(10.0, 5.0, 0.8), [4.2, 1.8, 1.6], 0.4);
    let start = Box3D::new(Point3::new(10.6, 5.3, 0.8), [3.6, 1.5, 1.4], 0.55);
    let m = Oracle {
        codec: StateCodec::default_for_extent(48.0),
        schedule: schedule(),
        target: gt,
    };
    let r = ddim_refine(&m, &empty_bev(), &start, 0, &RefineConfig::default()).unwrap();
    assert!((iou_3d(&r.bbox, &gt) - 1.0).abs() < 1e-9);
}

#[test]
fn stochastic_sampler_is_seeded() {
    let start = Box3D::new(Point3::new(10.6, 5.3, 0.8), [3.6, 1.5, 1.4], 0.55);
    let m = Zero(StateCodec::default_for_extent(48.0), schedule());
    let cfg = RefineConfig {
        eta: 1.0,
        seed: 7,
        ..RefineConfig::default()
    };
    let a = ddim_refine(&m, &empty_bev(), &start, 0, &cfg).unwrap();
    let b = ddim_refine(&m, &empty_bev(), &start, 0, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.bbox, start);
}

#[test]
fn refine_config_rejects_bad_values() {
    let s = schedule();
    for cfg in [
        RefineConfig {
            steps: 0,
            ..RefineConfig::default()
        },
        RefineConfig {
            t_start: 0,
            ..RefineConfig::default()
        },
        RefineConfig {
            t_start: 1001,
            ..RefineConfig::default()
        },
        RefineConfig {
            eta: 1.5,
            ..RefineConfig::default()
        },
    ] {
        assert!(cfg.validate(&s).is_err(), "{cfg:?}");
    }
}

#[test]
fn systematic_bias_pushes_outward_and_shrinks() {
    let b = Box3D::new(Point3::new(30.0, 40.0, 1.0), [4.0, 2.0, 1.5], 0.2);
    let out = SystematicBias::default().apply(&b);
    assert!((out.center.bev_norm() - 50.0 * 1.03).abs() < 1e-9);
    assert!((out.size[0] - 3.4).abs() < 1e-12);
    assert_eq!(SystematicBias::none().apply(&b), b);
}

#[test]
fn fresh_model_emits_zero_residual() {
    let model = DenoiserModel::new(small_model_config()).unwrap();
    let scene = scene_of(&[("car", 8.0, 2.0, 0.3)], 1);
    let bev = rasterize_bev(&scene, &model.config.bev).unwrap();
    let b = scene.gt[0].bbox;
    let p = model
        .predict(&bev, &model.codec.encode(&b, 0), 150, 0)
        .unwrap();
    assert_eq!(p.delta, [0.0; STATE_DIM]);
    let r = ddim_refine(&model, &bev, &b, 0, &RefineConfig::default()).unwrap();
    assert_eq!(r.bbox, b);
}

#[test]
fn off_grid_centre_is_out_of_extent() {
    let model = DenoiserModel::new(small_model_config()).unwrap();
    let bev = rasterize_points(&[], &model.config.bev).unwrap();
    let b = Box3D::new(Point3::new(20.0, 0.0, 0.8), [4.0, 2.0, 1.5], 0.0);
    let err = model
        .predict(&bev, &model.codec.encode(&b, 0), 100, 0)
        .unwrap_err();
    assert!(matches!(err, Error::OutOfExtent { .. }));
}

/// Perturbs the zero-initialized output layer so every path carries gradient.
fn randomize_all(model: &mut DenoiserModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.params_mut() {
        if p.name.starts_with("res2") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut model = DenoiserModel::new(small_model_config()).unwrap();
    randomize_all(&mut model, 5);
    let scene = scene_of(&[("car", 8.0, 2.0, 0.3), ("pedestrian", -5.0, 6.0, 1.0)], 2);
    let bev = rasterize_bev(&scene, &model.config.bev).unwrap();
    let cfg = TrainConfig {
        model: model.config,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (gi, t) in [(0usize, 40usize), (1, 300)] {
        let g = &scene.gt[gi];
        let b0 = canonical_box(&g.bbox);
        let sc = g.category.super_category;
        let x0 = model.codec.encode(&b0, sc);
        let xt = noised_state(&model, &x0, t, &mut rng);
        let q = sample_loss(&model, &model.store, &bev, &xt, &x0, &b0, t, sc, &cfg, None)
            .unwrap()
            .quality;
        let m = model.clone();
        let mut store = model.store.clone();
        let report = gradient_check(
            &mut store,
            |s| {
                let l = sample_loss(&m, s, &bev, &xt, &x0, &b0, t, sc, &cfg, Some(q))?;
                Ok((l.loss, l.grads))
            },
            &GradCheckOptions {
                max_per_param: Some(12),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn single_box_is_memorized() {
    let mut model = DenoiserModel::new(small_model_config()).unwrap();
    let scene = scene_of(&[("car", 8.0, 2.0, 0.3)], 3);
    let bev = rasterize_bev(&scene, &model.config.bev).unwrap();
    let cfg = TrainConfig {
        model: model.config,
        lambda_conf: 0.0,
        ..TrainConfig::default()
    };
    let b0 = canonical_box(&scene.gt[0].bbox);
    let x0 = model.codec.encode(&b0, 0);
    let t = 120;
    let xt = noised_state(&model, &x0, t, &mut ChaCha8Rng::seed_from_u64(4));
    let mut opt = crate::nn::AdamWState::new(&model.store);
    let adam = crate::nn::AdamW {
        lr: 3e-3,
        weight_decay: 0.0,
        ..Default::default()
    };
    let steps = 2000;
    let mut last = f64::INFINITY;
    for i in 0..steps {
        let l = sample_loss(&model, &model.store, &bev, &xt, &x0, &b0, t, 0, &cfg, None).unwrap();
        last = l.l_res;
        let lr = adam.lr * (1.0 - i as f64 / steps as f64);
        adam.step_with_lr(&mut model.store, &mut opt, &l.grads, lr);
    }
    let l = sample_loss(&model, &model.store, &bev, &xt, &x0, &b0, t, 0, &cfg, None).unwrap();
    assert!(
        l.l_res < 1e-3,
        "residual loss {} (previous {last})",
        l.l_res
    );
}

#[test]
fn novel_boxes_are_refused_for_training() {
    let scene = scene_of(&[("car", 8.0, 2.0, 0.3), ("truck", -8.0, 3.0, 0.0)], 4);
    assert!(matches!(training_samples(&[scene]), Err(Error::Config(_))));
}

fn tiny_corpus() -> Vec<Scene> {
    vec![
        scene_of(
            &[("car", 8.0, 2.0, 0.3), ("pedestrian", -5.0, 6.0, 1.0)],
            10,
        ),
        scene_of(&[("bicycle", 4.0, -6.0, 2.0)], 11),
        scene_of(&[("barrier", -7.0, -4.0, 0.5), ("car", 3.0, 9.0, -1.0)], 12),
    ]
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        model: small_model_config(),
        epochs: 2,
        scenes_per_step: 2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let scenes = tiny_corpus();
    let cfg = tiny_train_config();
    let run = |stop: Option<u64>| {
        let mut model = DenoiserModel::new(cfg.model).unwrap();
        let mut opt = crate::nn::AdamWState::new(&model.store);
        let mut progress = TrainProgress::default();
        let c = TrainConfig {
            stop_after_steps: stop,
            ..cfg
        };
        let rec = train(
            &mut model,
            &mut opt,
            &mut progress,
            &scenes,
            &c,
            |_, _, _, _| Ok(()),
        )
        .unwrap();
        (model, opt, progress, rec)
    };
    let (a, _, pa, ra) = run(None);
    let (b, _, _, rb) = run(None);
    assert_eq!(a.store, b.store);
    assert_eq!(ra, rb);
    assert_eq!(pa.global_step, 4);

    let (mut m, mut opt, mut progress, r1) = run(Some(3));
    assert_eq!(progress.global_step, 3);
    let r2 = train(
        &mut m,
        &mut opt,
        &mut progress,
        &scenes,
        &cfg,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(m.store, a.store);
    assert_eq!([r1, r2].concat(), ra);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let scenes = tiny_corpus();
    let cfg = tiny_train_config();
    let mut model = DenoiserModel::new(cfg.model).unwrap();
    let mut opt = crate::nn::AdamWState::new(&model.store);
    let mut progress = TrainProgress::default();
    train(
        &mut model,
        &mut opt,
        &mut progress,
        &scenes,
        &cfg,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let header = serde_json::json!({"seed": 9});
    save_checkpoint(&path, &model, &opt, &progress, Some(&header)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.optimizer, opt);
    assert_eq!(ck.progress, progress);
    assert_eq!(ck.header, Some(header));
    let path2 = dir.path().join("ckpt2.json");
    save_checkpoint(
        &path2,
        &ck.model,
        &ck.optimizer,
        &ck.progress,
        ck.header.as_ref(),
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn super_categories_diverge_after_training_on_distinct_biases() {
    // two groups whose boxes are consistently displaced in opposite
    // directions relative to the point evidence
    let mut model = DenoiserModel::new(small_model_config()).unwrap();
    let scene = scene_of(&[("car", 8.0, 2.0, 0.3), ("pedestrian", -5.0, 6.0, 1.0)], 2);
    let bev = rasterize_bev(&scene, &model.config.bev).unwrap();
    let cfg = TrainConfig {
        model: model.config,
        ..TrainConfig::default()
    };
    let mut opt = crate::nn::AdamWState::new(&model.store);
    let adam = crate::nn::AdamW {
        lr: 1e-2,
        ..Default::default()
    };
    let probe = model.codec.encode(&canonical_box(&scene.gt[0].bbox), 0);
    for _ in 0..10 {
        let mut grads = model.store.zero_grads();
        for (sc, shift) in [(0usize, 0.02), (4, -0.02)] {
            let mut x0 = probe;
            x0[0] += shift;
            let b0 = model.codec.decode(&x0, sc);
            let l = sample_loss(
                &model,
                &model.store,
                &bev,
                &probe,
                &x0,
                &b0,
                100,
                sc,
                &cfg,
                None,
            )
            .unwrap();
            grads.add_assign(&l.grads);
        }
        adam.step(&mut model.store, &mut opt, &grads);
    }
    let a = model.forward(&bev, &probe, 100, 0).unwrap();
    let b = model.forward(&bev, &probe, 100, 4).unwrap();
    assert!(a.raw()[0] > b.raw()[0]);
    let gap: f64 = a
        .film_features()
        .iter()
        .zip(b.film_features())
        .map(|(u, v)| (u - v).abs())
        .sum();
    assert!(gap > 1e-3);
}
