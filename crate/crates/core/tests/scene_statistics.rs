use ovlabel_core::geom::Point3;
use ovlabel_core::scene::{scene_with_objects, Category, GtObject, SceneConfig};
use ovlabel_core::Box3D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn car_at(range: f64, bearing: f64, yaw: f64) -> GtObject {
    let category = Category::by_name("car").unwrap();
    let s = category.prior_size;
    GtObject {
        bbox: Box3D::new(
            Point3::new(range * bearing.cos(), range * bearing.sin(), 0.5 * s[2]),
            s,
            yaw,
        ),
        category,
    }
}

fn points_on_object(range: f64, bearing: f64, yaw: f64, seed: u64) -> usize {
    let cfg = SceneConfig {
        clutter_points: 0,
        ..SceneConfig::default()
    };
    let s = scene_with_objects(&cfg, vec![car_at(range, bearing, yaw)], seed).unwrap();
    s.point_owners().iter().filter(|o| o.is_some()).count()
}

#[test]
fn points_thin_out_with_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let seeds = 60;
    let (mut near, mut far) = (0usize, 0usize);
    for seed in 0..seeds {
        let bearing = rng.gen_range(-PI..PI);
        let yaw = rng.gen_range(-PI..PI);
        near += points_on_object(10.0, bearing, yaw, seed);
        far += points_on_object(40.0, bearing, yaw, seed);
    }
    let (near, far) = (near as f64 / seeds as f64, far as f64 / seeds as f64);
    assert!(far < near, "mean points at 40 m {far} vs 10 m {near}");
    // surface sampling goes as 1/r², so a 4x range costs far more than half
    assert!(far < 0.5 * near, "mean points at 40 m {far} vs 10 m {near}");
}

#[test]
fn every_object_point_lies_on_its_box() {
    for seed in 0..50 {
        let cfg = SceneConfig::default().with_counts([("car", 2), ("pedestrian", 2), ("bus", 1)]);
        let s = ovlabel_core::scene::generate_scene(&cfg, seed).unwrap();
        assert!(!s.points.is_empty());
        for (p, owner) in s.points.iter().zip(s.point_owners()) {
            if let Some(o) = owner {
                assert!(s.gt[o].bbox.contains(p, 0.011));
            }
        }
        for g in &s.gt {
            assert!(g.bbox.center.x.abs() <= cfg.half_extent);
            assert!(g.bbox.center.y.abs() <= cfg.half_extent);
        }
    }
}
