use super::projected_iou;
use crate::error::{Error, Result};
use crate::geom::{Box2D, Box3D, CameraModel, Point3, INSIDE_TOL};
use std::f64::consts::PI;

/// Reorders a size so the longer horizontal side comes first.
pub fn canonical_size(s: [f64; 3]) -> [f64; 3] {
    if s[0] >= s[1] {
        s
    } else {
        [s[1], s[0], s[2]]
    }
}

/// Builds `n_sizes * n_yaws` candidate boxes, size-major. Sizes are the
/// category prior, the fitted size and their mean; yaws are uniform over
/// `[0, π)`. Each candidate is placed on the ray from the sensor through the
/// cluster centroid with its near face touching the cluster's nearest point
/// along that ray, vertically centred on the cluster.
pub fn generate_candidates(
    merged: &Box3D,
    points: &[Point3],
    prior: [f64; 3],
    n_sizes: usize,
    n_yaws: usize,
) -> Result<Vec<Box3D>> {
    if points.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let p = canonical_size(prior);
    let f = canonical_size(merged.size);
    let mean = [
        0.5 * (p[0] + f[0]),
        0.5 * (p[1] + f[1]),
        0.5 * (p[2] + f[2]),
    ];
    let sizes = [p, f, mean];

    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), q| (x + q.x, y + q.y));
    let (cx, cy) = (sx / n, sy / n);
    let r = cx.hypot(cy);
    let (dx, dy) = if r > 1e-9 {
        (cx / r, cy / r)
    } else {
        (1.0, 0.0)
    };
    let s_min = points
        .iter()
        .map(|q| q.x * dx + q.y * dy)
        .fold(f64::INFINITY, f64::min);
    let (zlo, zhi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
            (lo.min(q.z), hi.max(q.z))
        });
    let z = 0.5 * (zlo + zhi);

    let mut out = Vec::with_capacity(n_sizes * n_yaws);
    for size in sizes.iter().take(n_sizes) {
        for k in 0..n_yaws {
            let yaw = k as f64 * PI / n_yaws as f64;
            let mut b = Box3D::new(Point3::new(0.0, 0.0, z), *size, yaw);
            let along = s_min + b.support_along(dx, dy);
            b.center.x = along * dx;
            b.center.y = along * dy;
            out.push(b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub bbox: Box3D,
    pub s_pts: f64,
    pub s_iou: f64,
    pub s_total: f64,
}

/// Index of the best `(s_pts, s_iou)` pair under the weighted total. Ties go
/// to the higher IoU, then the lower index.
pub fn rank_candidates(scores: &[(f64, f64)], alpha_pts: f64, alpha_iou: f64) -> Option<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, &(pts, iou)) in scores.iter().enumerate() {
        let total = alpha_pts * pts + alpha_iou * iou;
        let better = match best {
            None => true,
            Some((_, bt, bi)) => total > bt || (total == bt && iou > bi),
        };
        if better {
            best = Some((i, total, iou));
        }
    }
    best.map(|b| b.0)
}

/// Scores each candidate by point coverage and projected IoU and returns the
/// best one per [`rank_candidates`].
pub fn score_candidates(
    candidates: &[Box3D],
    points: &[Point3],
    cam: &CameraModel,
    det_box: &Box2D,
    alpha_pts: f64,
    alpha_iou: f64,
) -> Result<Selection> {
    if points.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let scores: Vec<(f64, f64)> = candidates
        .iter()
        .map(|b| {
            let inside = points.iter().filter(|p| b.contains(p, INSIDE_TOL)).count();
            (
                inside as f64 / points.len() as f64,
                projected_iou(cam, b, det_box),
            )
        })
        .collect();
    let index = rank_candidates(&scores, alpha_pts, alpha_iou)
        .ok_or_else(|| Error::Config("no candidates to score".into()))?;
    let (s_pts, s_iou) = scores[index];
    Ok(Selection {
        index,
        bbox: candidates[index],
        s_pts,
        s_iou,
        s_total: alpha_pts * s_pts + alpha_iou * s_iou,
    })
}
