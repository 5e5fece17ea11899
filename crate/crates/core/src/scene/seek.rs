//! Oracle stand-in for an open-vocabulary 2D detector plus segmenter.
//!
//! Detections are derived from ground truth and then corrupted with the
//! failure modes a real front end exhibits: loose boxes, ragged or leaky
//! masks, missed objects, unreliable scores and wrong labels.

use super::{Category, PixelMask, Scene};
use crate::error::{Error, Result};
use crate::geom::{project_box3d, project_point, Box2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeekerNoiseConfig {
    /// Each box edge moves by up to this fraction of the box extent.
    pub box_jitter_frac: f64,
    /// Positive values dilate the mask, negative values peel its border.
    pub mask_erode_dilate_px: i32,
    /// Probability that a background point pixel inside the box leaks into
    /// the mask.
    pub leak_point_frac: f64,
    pub score_noise_std: f64,
    pub dropout_prob: f64,
    /// Probability of reporting a wrong category (drawn from the same
    /// base/novel group). Mislabelled detections score lower.
    pub label_flip_prob: f64,
}

impl Default for SeekerNoiseConfig {
    fn default() -> Self {
        Self {
            box_jitter_frac: 0.0,
            mask_erode_dilate_px: 0,
            leak_point_frac: 0.0,
            score_noise_std: 0.0,
            dropout_prob: 0.0,
            label_flip_prob: 0.0,
        }
    }
}

/// Score multiplier applied to mislabelled detections.
const FLIP_SCORE_FACTOR: f64 = 0.6;

impl SeekerNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("box_jitter_frac", self.box_jitter_frac)?;
        unit("leak_point_frac", self.leak_point_frac)?;
        unit("score_noise_std", self.score_noise_std)?;
        unit("dropout_prob", self.dropout_prob)?;
        unit("label_flip_prob", self.label_flip_prob)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub view: usize,
    pub bbox: Box2D,
    pub mask: PixelMask,
    pub category: Category,
    pub seeker_score: f64,
    /// Ground-truth object the oracle derived this detection from. Not
    /// persisted; absent for detections read from disk.
    pub source_gt: Option<usize>,
}

/// `(view, gt index)` pairs where the object has at least one LiDAR point
/// projecting into the view and its box projects (two or more corners in
/// front of the camera).
pub fn visible_pairs(scene: &Scene) -> Vec<(usize, usize)> {
    let owners = scene.point_owners();
    let mut out = Vec::new();
    for (m, cam) in scene.cameras.iter().enumerate() {
        let mut seen = vec![false; scene.gt.len()];
        for (p, owner) in scene.points.iter().zip(&owners) {
            if let Some(g) = owner {
                if !seen[*g] && project_point(cam, p).is_some() {
                    seen[*g] = true;
                }
            }
        }
        for (g, obj) in scene.gt.iter().enumerate() {
            if seen[g] && project_box3d(cam, &obj.bbox).is_some() {
                out.push((m, g));
            }
        }
    }
    out
}

fn jitter_box(b: &Box2D, frac: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Box2D {
    if frac == 0.0 {
        return *b;
    }
    let (bw, bh) = (b.width(), b.height());
    let mut d = [0.0; 4];
    for x in d.iter_mut() {
        *x = rng.gen_range(-1.0..=1.0) * frac;
    }
    let mut out = Box2D::new(
        (b.min_u + d[0] * bw).clamp(0.0, w),
        (b.min_v + d[1] * bh).clamp(0.0, h),
        (b.max_u + d[2] * bw).clamp(0.0, w),
        (b.max_v + d[3] * bh).clamp(0.0, h),
    );
    // a collapsed box keeps its centre and a one-pixel extent
    if !out.is_valid() {
        let (cu, cv) = b.center();
        out = Box2D::new(cu - 0.5, cv - 0.5, cu + 0.5, cv + 0.5);
    }
    out
}

/// Emits one detection per visible `(view, object)` pair, corrupted as
/// configured. Deterministic given the scene seed.
pub fn oracle_seek(scene: &Scene, noise: &SeekerNoiseConfig) -> Vec<Detection2D> {
    let owners = scene.point_owners();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eec_e4a1_0bad_cafe);
    let score_noise = Normal::new(0.0, noise.score_noise_std.max(0.0)).expect("finite std");
    let mut out = Vec::new();

    for (m, cam) in scene.cameras.iter().enumerate() {
        let (w, h) = (cam.image_width as f64, cam.image_height as f64);
        let pix: Vec<Option<(u32, u32)>> = scene
            .points
            .iter()
            .map(|p| project_point(cam, p).map(|pr| pr.pixel()))
            .collect();
        let mut obj_pixels: Vec<Vec<(u32, u32)>> = vec![Vec::new(); scene.gt.len()];
        for (px, owner) in pix.iter().zip(&owners) {
            if let (Some(px), Some(g)) = (px, owner) {
                obj_pixels[*g].push(*px);
            }
        }

        for (g, obj) in scene.gt.iter().enumerate() {
            if obj_pixels[g].is_empty() {
                continue;
            }
            let Some(oracle_box) = project_box3d(cam, &obj.bbox) else {
                continue;
            };
            if rng.gen::<f64>() < noise.dropout_prob {
                continue;
            }
            let bbox = jitter_box(&oracle_box, noise.box_jitter_frac, w, h, &mut rng);

            let mut mask = PixelMask::from_pixels(
                cam.image_width,
                cam.image_height,
                obj_pixels[g].iter().copied(),
            );
            mask = match noise.mask_erode_dilate_px {
                k if k > 0 => mask.dilate(k as u32),
                k if k < 0 => mask.peel(k.unsigned_abs()),
                _ => mask,
            };
            if noise.leak_point_frac > 0.0 {
                let mut leaked = Vec::new();
                for (px, owner) in pix.iter().zip(&owners) {
                    if let Some((u, v)) = px {
                        if *owner != Some(g)
                            && bbox.contains_pixel(*u, *v)
                            && rng.gen::<f64>() < noise.leak_point_frac
                        {
                            leaked.push((*u, *v));
                        }
                    }
                }
                mask = mask.union(leaked);
            }
            let mask = mask.retain_in_box(&bbox);

            let mut score = if noise.score_noise_std > 0.0 {
                (1.0 - score_noise.sample(&mut rng).abs()).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let mut category = obj.category.clone();
            if noise.label_flip_prob > 0.0 && rng.gen::<f64>() < noise.label_flip_prob {
                let pool: Vec<&Category> = super::categories()
                    .iter()
                    .filter(|c| c.is_base == obj.category.is_base && c.name != obj.category.name)
                    .collect();
                if !pool.is_empty() {
                    category = pool[rng.gen_range(0..pool.len())].clone();
                    score *= FLIP_SCORE_FACTOR;
                }
            }

            out.push(Detection2D {
                view: m,
                bbox,
                mask,
                category,
                seeker_score: score,
                source_gt: Some(g),
            });
        }
    }
    out
}
