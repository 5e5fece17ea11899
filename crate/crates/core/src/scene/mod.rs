//! Synthetic LiDAR/camera scenes and the oracle 2D seeker.
//!
//! Objects are placed on the ground plane without BEV overlap, their
//! sensor-facing surfaces are sampled with a density falling off as `1/r²`,
//! and points whose line of sight crosses another object are culled.

mod category;
pub(crate) mod io;
mod mask;
mod seek;

pub use category::{categories, Category, NUM_SUPER_CATEGORIES};
pub use io::{
    load_detections, load_scene, save_detections, save_scene, DetectionRecord, SCENE_VERSION,
};
pub use mask::PixelMask;
pub use seek::{oracle_seek, visible_pairs, Detection2D, SeekerNoiseConfig};

use crate::error::{Error, Result};
use crate::geom::{bev_intersection_area, Box3D, CameraModel, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Margin used to attribute a sampled point to its generating box.
pub const OWNER_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRigConfig {
    pub count: usize,
    pub hfov_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub mount_height: f64,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        Self {
            count: 6,
            hfov_deg: 90.0,
            image_width: 1600,
            image_height: 900,
            mount_height: 1.6,
        }
    }
}

impl CameraRigConfig {
    pub fn build(&self) -> Vec<CameraModel> {
        (0..self.count)
            .map(|k| {
                let yaw = 2.0 * PI * k as f64 / self.count as f64;
                CameraModel::looking_at_yaw(
                    Point3::new(0.0, 0.0, self.mount_height),
                    yaw,
                    self.hfov_deg.to_radians(),
                    self.image_width,
                    self.image_height,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// The world is the square `[-half_extent, half_extent]²`.
    pub half_extent: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Objects per category name.
    pub counts: BTreeMap<String, usize>,
    /// Relative per-axis size jitter around the category prior.
    pub size_jitter: f64,
    /// Expected surface points per m² at 1 m range.
    pub point_density: f64,
    pub max_points_per_face: usize,
    pub clutter_points: usize,
    pub occlusion: bool,
    pub lidar_height: f64,
    /// Minimum BEV gap kept between objects.
    pub placement_margin: f64,
    pub cameras: CameraRigConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_extent: 48.0,
            min_range: 5.0,
            max_range: 40.0,
            counts: BTreeMap::new(),
            size_jitter: 0.1,
            point_density: 1500.0,
            max_points_per_face: 400,
            clutter_points: 1500,
            occlusion: true,
            lidar_height: 1.8,
            placement_margin: 0.5,
            cameras: CameraRigConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn with_counts<'a>(mut self, counts: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        self.counts = counts
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.half_extent > 0.0) {
            return bad("half_extent must be positive");
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return bad("need 0 <= min_range < max_range");
        }
        if self.max_range > self.half_extent {
            return bad("max_range must not exceed half_extent");
        }
        if !(self.point_density > 0.0) {
            return bad("point_density must be positive");
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 1)");
        }
        if self.cameras.count == 0 {
            return bad("camera rig needs at least one camera");
        }
        for name in self.counts.keys() {
            if Category::by_name(name).is_none() {
                return Err(Error::UnknownCategory(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: Box3D,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub points: Vec<Point3>,
    pub gt: Vec<GtObject>,
    pub cameras: Vec<CameraModel>,
}

impl Scene {
    /// For each point, the index of the gt box that generated it (points
    /// within [`OWNER_MARGIN`] of a box belong to it).
    pub fn point_owners(&self) -> Vec<Option<usize>> {
        let inflated: Vec<Box3D> = self
            .gt
            .iter()
            .map(|g| g.bbox.inflated(OWNER_MARGIN))
            .collect();
        self.points
            .iter()
            .map(|p| inflated.iter().position(|b| b.contains(p, 0.0)))
            .collect()
    }
}

/// Segment–box test in the box frame (slab method). The segment runs from
/// `a` to `b`; touching the far endpoint does not count.
fn segment_hits_box(bx: &Box3D, a: &Point3, b: &Point3) -> bool {
    let o = bx.to_local(a);
    let e = bx.to_local(b);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0 - 1e-6;
    for k in 0..3 {
        let d = e[k] - o[k];
        let half = 0.5 * bx.size[k];
        if d.abs() < 1e-15 {
            if o[k].abs() > half {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half - o[k]) / d, (half - o[k]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn occluded(boxes: &[Box3D], own: Option<usize>, origin: &Point3, p: &Point3) -> bool {
    boxes
        .iter()
        .enumerate()
        .any(|(i, b)| Some(i) != own && segment_hits_box(b, origin, p))
}

fn place_objects(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GtObject>> {
    let mut placed: Vec<GtObject> = Vec::new();
    // canonical table order keeps placement independent of map ordering
    for cat in categories() {
        let count = config.counts.get(&cat.name).copied().unwrap_or(0);
        for _ in 0..count {
            let mut ok = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let r = rng.gen_range(config.min_range..config.max_range);
                let az = rng.gen_range(-PI..PI);
                let yaw = rng.gen_range(-PI..PI);
                let mut size = cat.prior_size;
                for s in size.iter_mut() {
                    if config.size_jitter > 0.0 {
                        *s *= 1.0 + rng.gen_range(-config.size_jitter..config.size_jitter);
                    }
                }
                let bx = Box3D::new(
                    Point3::new(r * az.cos(), r * az.sin(), 0.5 * size[2]),
                    size,
                    yaw,
                );
                let inside = bx
                    .bev_corners()
                    .iter()
                    .all(|[x, y]| x.abs() <= config.half_extent && y.abs() <= config.half_extent);
                if !inside {
                    continue;
                }
                let padded = bx.inflated(0.5 * config.placement_margin);
                let clear = placed.iter().all(|g| {
                    bev_intersection_area(&padded, &g.bbox.inflated(0.5 * config.placement_margin))
                        == 0.0
                });
                if clear {
                    ok = Some(bx);
                    break;
                }
            }
            let bbox = ok.ok_or_else(|| Error::PlacementFailure {
                category: cat.name.clone(),
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
            placed.push(GtObject {
                bbox,
                category: cat.clone(),
            });
        }
    }
    Ok(placed)
}

fn stochastic_round(lambda: f64, rng: &mut ChaCha8Rng) -> usize {
    let base = lambda.floor();
    let extra = rng.gen::<f64>() < lambda - base;
    base as usize + extra as usize
}

/// Samples the sensor-facing faces of `bx` (bottom face excluded).
fn sample_surfaces(
    bx: &Box3D,
    config: &SceneConfig,
    lidar: &Point3,
    rng: &mut ChaCha8Rng,
) -> Vec<Point3> {
    let [l, w, h] = bx.size;
    let (s, c) = bx.yaw.sin_cos();
    let to_world = |lx: f64, ly: f64, lz: f64| {
        Point3::new(
            bx.center.x + c * lx - s * ly,
            bx.center.y + s * lx + c * ly,
            bx.center.z + lz,
        )
    };
    let local_lidar = bx.to_local(lidar);
    // (axis, sign): axis 0 = length, 1 = width, 2 = height (top only)
    let faces = [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)];
    let mut out = Vec::new();
    for (axis, sign) in faces {
        let half = 0.5 * bx.size[axis];
        if sign * local_lidar[axis] <= half {
            continue;
        }
        let (area, mut fc) = match axis {
            0 => (w * h, [sign * half, 0.0, 0.0]),
            1 => (l * h, [0.0, sign * half, 0.0]),
            _ => (l * w, [0.0, 0.0, half]),
        };
        let centre = to_world(fc[0], fc[1], fc[2]);
        let r2 = (centre.x - lidar.x).powi(2)
            + (centre.y - lidar.y).powi(2)
            + (centre.z - lidar.z).powi(2);
        let lambda =
            (config.point_density * area / r2.max(1.0)).min(config.max_points_per_face as f64);
        let n = stochastic_round(lambda, rng);
        for _ in 0..n {
            for k in 0..3 {
                if k != axis {
                    fc[k] = rng.gen_range(-0.5..0.5) * bx.size[k];
                }
            }
            out.push(to_world(fc[0], fc[1], fc[2]));
        }
    }
    out
}

/// Builds a deterministic synthetic scene from `config` and `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = place_objects(config, &mut rng)?;
    Ok(populate(config, gt, seed, &mut rng))
}

/// Builds a scene around caller-placed objects, sampling their surfaces and
/// the ground clutter as [`generate_scene`] does. Overlap is not checked.
pub fn scene_with_objects(config: &SceneConfig, gt: Vec<GtObject>, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(populate(config, gt, seed, &mut rng))
}

fn populate(config: &SceneConfig, gt: Vec<GtObject>, seed: u64, rng: &mut ChaCha8Rng) -> Scene {
    let boxes: Vec<Box3D> = gt.iter().map(|g| g.bbox).collect();
    let lidar = Point3::new(0.0, 0.0, config.lidar_height);

    let mut points = Vec::new();
    for (i, bx) in boxes.iter().enumerate() {
        for p in sample_surfaces(bx, config, &lidar, rng) {
            if config.occlusion && occluded(&boxes, Some(i), &lidar, &p) {
                continue;
            }
            points.push(p);
        }
    }

    let owner_boxes: Vec<Box3D> = boxes.iter().map(|b| b.inflated(OWNER_MARGIN)).collect();
    for _ in 0..config.clutter_points {
        let p = Point3::new(
            rng.gen_range(-config.half_extent..config.half_extent),
            rng.gen_range(-config.half_extent..config.half_extent),
            rng.gen_range(0.0..0.05),
        );
        if owner_boxes.iter().any(|b| b.contains(&p, 0.0)) {
            continue;
        }
        if config.occlusion && occluded(&boxes, None, &lidar, &p) {
            continue;
        }
        points.push(p);
    }

    Scene {
        seed,
        points,
        gt,
        cameras: config.cameras.build(),
    }
}
