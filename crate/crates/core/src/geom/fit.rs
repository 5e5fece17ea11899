//! Minimal oriented box fitting: convex hull plus rotating calipers.

use super::{fold_half_turn, Box3D, Point3};
use crate::error::{Error, Result};

/// Per-axis size floor for degenerate fits, in meters.
pub const MIN_BOX_SIZE: f64 = 0.05;

/// Oriented rectangle in the plane; `axis` is the unit direction of `extent[0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub center: [f64; 2],
    pub axis: [f64; 2],
    pub extent: [f64; 2],
}

impl Rect2 {
    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Counter-clockwise convex hull (monotone chain) with collinear points
/// removed. Returns 1 or 2 points for degenerate input.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle of a counter-clockwise convex hull with
/// at least three vertices. One side of the optimum is collinear with a hull
/// edge, so the three remaining calipers only ever advance.
pub fn min_area_rect(hull: &[[f64; 2]]) -> Rect2 {
    let n = hull.len();
    assert!(n >= 3, "min_area_rect needs a proper hull");
    let edge_dir = |i: usize| {
        let d = sub(hull[(i + 1) % n], hull[i]);
        let len = d[0].hypot(d[1]);
        [d[0] / len, d[1] / len]
    };

    let e0 = edge_dir(0);
    let n0 = [-e0[1], e0[0]];
    let argmax = |f: &dyn Fn([f64; 2]) -> f64| {
        (0..n).fold(
            0,
            |best, k| if f(hull[k]) > f(hull[best]) { k } else { best },
        )
    };
    let mut right = argmax(&|p| dot(p, e0));
    let mut top = argmax(&|p| dot(p, n0));
    let mut left = argmax(&|p| -dot(p, e0));

    let mut best: Option<Rect2> = None;
    for i in 0..n {
        let e = edge_dir(i);
        let nrm = [-e[1], e[0]];
        let origin = hull[i];
        let along = |k: usize| dot(sub(hull[k], origin), e);
        let up = |k: usize| dot(sub(hull[k], origin), nrm);
        // each caliper function is unimodal around the hull, and its extremum
        // only moves counter-clockwise as the edge rotates
        let advance = |mut k: usize, better: &dyn Fn(usize, usize) -> bool| {
            for _ in 0..n {
                let next = (k + 1) % n;
                if !better(next, k) {
                    break;
                }
                k = next;
            }
            k
        };
        right = advance(right, &|a, b| along(a) >= along(b));
        top = advance(top, &|a, b| up(a) >= up(b));
        left = advance(left, &|a, b| along(a) <= along(b));
        let (lo, hi, h) = (along(left), along(right), up(top));
        let rect = Rect2 {
            center: [
                origin[0] + e[0] * 0.5 * (lo + hi) + nrm[0] * 0.5 * h,
                origin[1] + e[1] * 0.5 * (lo + hi) + nrm[1] * 0.5 * h,
            ],
            axis: e,
            extent: [hi - lo, h],
        };
        if best.is_none_or(|b| rect.area() < b.area()) {
            best = Some(rect);
        }
    }
    best.expect("hull has edges")
}

/// Fits the minimal-area oriented box to `points` in BEV, spanning their
/// vertical extent. The longer horizontal side becomes `length`; yaw is
/// folded into `[-π/2, π/2)`. Each size component is floored at
/// [`MIN_BOX_SIZE`].
pub fn fit_min_box(points: &[Point3]) -> Result<Box3D> {
    if points.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let (zmin, zmax) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.z), hi.max(p.z))
    });
    let bev: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
    let hull = convex_hull(&bev);

    let rect = match hull.len() {
        1 => Rect2 {
            center: hull[0],
            axis: [1.0, 0.0],
            extent: [0.0, 0.0],
        },
        2 => {
            let d = sub(hull[1], hull[0]);
            let len = d[0].hypot(d[1]);
            Rect2 {
                center: [
                    0.5 * (hull[0][0] + hull[1][0]),
                    0.5 * (hull[0][1] + hull[1][1]),
                ],
                axis: [d[0] / len, d[1] / len],
                extent: [len, 0.0],
            }
        }
        _ => min_area_rect(&hull),
    };

    let (length, width, axis) = if rect.extent[0] >= rect.extent[1] {
        (rect.extent[0], rect.extent[1], rect.axis)
    } else {
        (
            rect.extent[1],
            rect.extent[0],
            [-rect.axis[1], rect.axis[0]],
        )
    };
    let yaw = fold_half_turn(axis[1].atan2(axis[0]));
    Ok(Box3D::new(
        Point3::new(rect.center[0], rect.center[1], 0.5 * (zmin + zmax)),
        [
            length.max(MIN_BOX_SIZE),
            width.max(MIN_BOX_SIZE),
            (zmax - zmin).max(MIN_BOX_SIZE),
        ],
        yaw,
    ))
}
