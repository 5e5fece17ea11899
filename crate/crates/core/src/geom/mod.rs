//! Geometric kernels shared by every stage of the pipeline.
//!
//! Conventions: the ego frame is right-handed with `z` up and the ground at
//! `z = 0`. Boxes are yaw-rotated about `z`; yaw is stored in `[-π, π)` and
//! treated as ambiguous modulo `π` wherever orientation is estimated.

mod camera;
mod fit;
mod iou;

pub use camera::{project_box3d, project_point, CameraModel, Projection};
pub use fit::{convex_hull, fit_min_box, min_area_rect, Rect2, MIN_BOX_SIZE};
pub use iou::{bev_intersection_area, bev_iou, clip_convex, iou_2d, iou_3d, polygon_area};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Boundary tolerance for point-in-box queries, in meters.
pub const INSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn bev_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    // floor can land exactly on the upper bound through rounding
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Folds an angle into `[-π/2, π/2)`, the canonical range for headingless yaw.
pub fn fold_half_turn(a: f64) -> f64 {
    let w = a - PI * ((a + PI / 2.0) / PI).floor();
    if w >= PI / 2.0 {
        w - PI
    } else {
        w
    }
}

/// Oriented 3D box: `size = [length, width, height]`, length along the yaw
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            size,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn z_min(&self) -> f64 {
        self.center.z - 0.5 * self.size[2]
    }

    pub fn z_max(&self) -> f64 {
        self.center.z + 0.5 * self.size[2]
    }

    /// BEV footprint, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size[0];
        let hw = 0.5 * self.size[1];
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            [
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            ]
        })
    }

    /// The 8 corners: bottom ring first, then top ring.
    pub fn corners(&self) -> [Point3; 8] {
        let bev = self.bev_corners();
        let (z0, z1) = (self.z_min(), self.z_max());
        let mut out = [Point3::default(); 8];
        for (i, [x, y]) in bev.iter().enumerate() {
            out[i] = Point3::new(*x, *y, z0);
            out[i + 4] = Point3::new(*x, *y, z1);
        }
        out
    }

    /// Coordinates of `p` in the box frame (length axis first).
    pub fn to_local(&self, p: &Point3) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        [c * dx + s * dy, -s * dx + c * dy, p.z - self.center.z]
    }

    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= 0.5 * self.size[0] + tol
            && l[1].abs() <= 0.5 * self.size[1] + tol
            && l[2].abs() <= 0.5 * self.size[2] + tol
    }

    /// Returns a copy with every size component grown by `2 * margin`.
    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            size: self.size.map(|s| s + 2.0 * margin),
            ..*self
        }
    }

    /// Half extent of the BEV footprint along the unit direction `(dx, dy)`.
    pub fn support_along(&self, dx: f64, dy: f64) -> f64 {
        let (s, c) = self.yaw.sin_cos();
        let along_len = (c * dx + s * dy).abs();
        let along_wid = (-s * dx + c * dy).abs();
        0.5 * self.size[0] * along_len + 0.5 * self.size[1] * along_wid
    }
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub min_u: f64,
    pub min_v: f64,
    pub max_u: f64,
    pub max_v: f64,
}

impl Box2D {
    pub const fn new(min_u: f64, min_v: f64, max_u: f64, max_v: f64) -> Self {
        Self {
            min_u,
            min_v,
            max_u,
            max_v,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_u - self.min_u
    }

    pub fn height(&self) -> f64 {
        self.max_v - self.min_v
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_u + self.max_u),
            0.5 * (self.min_v + self.max_v),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.max_u > self.min_u && self.max_v > self.min_v
    }

    /// Whether the unit pixel cell `(u, v)` overlaps the box.
    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        let (u, v) = (u as f64, v as f64);
        u + 1.0 > self.min_u && u <= self.max_u && v + 1.0 > self.min_v && v <= self.max_v
    }
}

/// Indices of `pts` inside `b` (boundary inclusive within [`INSIDE_TOL`]).
pub fn points_in_box(b: &Box3D, pts: &[Point3]) -> Vec<usize> {
    pts.iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p, INSIDE_TOL))
        .map(|(i, _)| i)
        .collect()
}

/// Count-only variant of [`points_in_box`] over an index subset.
pub fn count_in_box(b: &Box3D, pts: &[Point3], idx: &[usize]) -> usize {
    idx.iter()
        .filter(|&&i| b.contains(&pts[i], INSIDE_TOL))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(
                ((a - w) / (2.0 * PI)).fract().abs() < 1e-9
                    || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9
            );
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn fold_half_turn_range() {
        assert!((fold_half_turn(PI) - 0.0).abs() < 1e-12);
        assert!((fold_half_turn(0.75 * PI) + 0.25 * PI).abs() < 1e-12);
        assert_eq!(fold_half_turn(PI / 2.0), -PI / 2.0);
    }

    #[test]
    fn center_inside() {
        let b = Box3D::new(Point3::new(3.0, -2.0, 1.0), [4.0, 2.0, 1.5], 0.4);
        let pts = vec![Point3::new(10.0, 10.0, 0.0), b.center];
        assert_eq!(points_in_box(&b, &pts), vec![1]);
    }

    #[test]
    fn translated_points_outside() {
        let b = Box3D::new(Point3::new(0.0, 0.0, 0.0), [2.0, 2.0, 2.0], 0.3);
        let pts: Vec<_> = (0..20)
            .map(|i| Point3::new(5.0 + i as f64 * 0.1, 0.0, 0.0))
            .collect();
        assert!(points_in_box(&b, &pts).is_empty());
    }

    #[test]
    fn points_in_box_matches_brute_force_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let b = Box3D::new(
                Point3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.0..2.0),
                ),
                [
                    rng.gen_range(0.5..5.0),
                    rng.gen_range(0.5..3.0),
                    rng.gen_range(0.5..3.0),
                ],
                rng.gen_range(-PI..PI),
            );
            let pts: Vec<_> = (0..200)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-8.0..8.0),
                        rng.gen_range(-8.0..8.0),
                        rng.gen_range(-1.0..4.0),
                    )
                })
                .collect();
            // rotate each point by -yaw with an explicit matrix
            let expected: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let th = -b.yaw;
                    let dx = p.x - b.center.x;
                    let dy = p.y - b.center.y;
                    let lx = th.cos() * dx - th.sin() * dy;
                    let ly = th.sin() * dx + th.cos() * dy;
                    lx.abs() <= b.size[0] / 2.0
                        && ly.abs() <= b.size[1] / 2.0
                        && (p.z - b.center.z).abs() <= b.size[2] / 2.0
                })
                .map(|(i, _)| i)
                .collect();
            assert_eq!(points_in_box(&b, &pts), expected);
        }
    }

    #[test]
    fn corners_are_inside() {
        let b = Box3D::new(Point3::new(1.0, 2.0, 0.5), [3.0, 1.0, 1.0], 1.1);
        for c in b.corners() {
            assert!(b.contains(&c, INSIDE_TOL));
        }
    }

    #[test]
    fn support_matches_corner_projection() {
        let b = Box3D::new(Point3::new(0.0, 0.0, 0.0), [4.0, 1.5, 1.0], 0.6);
        let (dx, dy) = (0.8_f64, 0.6_f64);
        let max_proj = b
            .bev_corners()
            .iter()
            .map(|[x, y]| x * dx + y * dy)
            .fold(f64::MIN, f64::max);
        assert!((b.support_along(dx, dy) - max_proj).abs() < 1e-12);
    }
}
