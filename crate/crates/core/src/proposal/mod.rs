//! Lifting 2D detections to scored 3D box proposals.
//!
//! Per detection: gather the LiDAR points that land on the mask, score each
//! by how central it is in the image box and how near the sensor, cluster
//! them, greedily merge clusters while the projected box agrees better with
//! the 2D box, then pick the best of a grid of prior-guided candidates.

mod dbscan;
mod io;
mod select;

pub use dbscan::dbscan;
pub use io::{load_proposals, save_proposals, ProposalsFile, PROPOSALS_VERSION};
pub use select::{
    canonical_size, generate_candidates, rank_candidates, score_candidates, Selection,
};

use crate::error::{Error, Result};
use crate::geom::{
    fit_min_box, iou_2d, project_box3d, project_point, Box2D, Box3D, CameraModel, Point3,
};
use crate::scene::{Category, Detection2D, Scene};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImcvConfig {
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    /// Range normalizer for the geometry score, meters.
    pub r_max: f64,
    pub alpha_pts: f64,
    pub alpha_iou: f64,
    /// Size hypotheses per yaw: 1 = prior, 2 = +fitted, 3 = +their mean.
    pub n_sizes: usize,
    pub n_yaws: usize,
    /// Merged boxes must stay below this multiple of the category prior.
    pub thresh_dim_factor: f64,
}

impl Default for ImcvConfig {
    fn default() -> Self {
        Self {
            dbscan_eps: 0.5,
            dbscan_min_samples: 1,
            r_max: 60.0,
            alpha_pts: 0.5,
            alpha_iou: 0.5,
            n_sizes: 3,
            n_yaws: 16,
            thresh_dim_factor: 1.2,
        }
    }
}

impl ImcvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dbscan_eps > 0.0) {
            return bad(format!(
                "dbscan_eps must be positive, got {}",
                self.dbscan_eps
            ));
        }
        if !(self.r_max > 0.0) {
            return bad(format!("r_max must be positive, got {}", self.r_max));
        }
        if !(0.0..=1.0).contains(&self.alpha_pts) || !(0.0..=1.0).contains(&self.alpha_iou) {
            return bad("alpha weights must lie in [0, 1]".into());
        }
        if (self.alpha_pts + self.alpha_iou - 1.0).abs() > 1e-9 {
            return bad(format!(
                "alpha_pts + alpha_iou must equal 1, got {}",
                self.alpha_pts + self.alpha_iou
            ));
        }
        if !(1..=3).contains(&self.n_sizes) {
            return bad(format!("n_sizes must be 1, 2 or 3, got {}", self.n_sizes));
        }
        if self.n_yaws == 0 {
            return bad("n_yaws must be at least 1".into());
        }
        if !(self.thresh_dim_factor > 0.0) {
            return bad("thresh_dim_factor must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPoint {
    pub index: usize,
    pub s_geo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted indices into the scene points.
    pub indices: Vec<usize>,
    /// Share of the detection's geometry-score mass held by this cluster.
    pub s_geo: f64,
    pub bbox: Box3D,
    /// Projected IoU of `bbox` against the detection box.
    pub s_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalScores {
    pub geo: f64,
    pub iou: f64,
    pub pts: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSource {
    pub view: usize,
    pub det_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub category: Category,
    pub super_category: usize,
    pub scores: ProposalScores,
    pub seeker_score: f64,
    pub source: ProposalSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_box: Option<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_score: Option<f64>,
}

impl Proposal {
    /// The refined box when present, else the initial one.
    pub fn final_box(&self) -> &Box3D {
        self.refined_box.as_ref().unwrap_or(&self.bbox)
    }

    /// Ranking score: fused confidence after refinement, seeker score before.
    pub fn ranking_score(&self) -> f64 {
        self.fused_score.unwrap_or(self.seeker_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDetection {
    pub det_index: usize,
    pub view: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImcvDiagnostics {
    pub skipped: Vec<SkippedDetection>,
    /// Cluster count per detection, zero for skipped ones.
    pub cluster_counts: Vec<usize>,
}

fn camera<'a>(scene: &'a Scene, det: &Detection2D) -> Option<&'a CameraModel> {
    scene.cameras.get(det.view)
}

/// Indices of scene points whose projection into the detection's view lands
/// on a mask pixel.
pub fn extract_foreground_points(scene: &Scene, det: &Detection2D) -> Vec<usize> {
    let Some(cam) = camera(scene, det) else {
        return Vec::new();
    };
    if det.mask.is_empty() {
        return Vec::new();
    }
    scene
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (u, v) = project_point(cam, p)?.pixel();
            det.mask.contains(u, v).then_some(i)
        })
        .collect()
}

/// Unnormalized centrality score from box-relative offsets and relative range.
pub fn raw_geometry_score(x_off: f64, y_off: f64, range_frac: f64) -> f64 {
    1.0 - ((x_off * x_off + y_off * y_off + range_frac * range_frac) / 3.0).sqrt()
}

/// Rescales to `[0, 1]` by min and max; a constant input maps to all ones.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

pub fn geometry_scores(
    scene: &Scene,
    det: &Detection2D,
    fg: &[usize],
    r_max: f64,
) -> Vec<ScoredPoint> {
    let Some(cam) = camera(scene, det) else {
        return Vec::new();
    };
    let (cu, cv) = det.bbox.center();
    let hw = 0.5 * det.bbox.width();
    let hh = 0.5 * det.bbox.height();
    let raw: Vec<f64> = fg
        .iter()
        .map(|&i| {
            let p = &scene.points[i];
            let (x, y) = match project_point(cam, p) {
                Some(pr) => (
                    ((pr.u - cu) / hw).clamp(-1.0, 1.0),
                    ((pr.v - cv) / hh).clamp(-1.0, 1.0),
                ),
                None => (1.0, 1.0),
            };
            raw_geometry_score(x, y, (p.norm() / r_max).clamp(0.0, 1.0))
        })
        .collect();
    fg.iter()
        .zip(min_max_normalize(&raw))
        .map(|(&index, s_geo)| ScoredPoint { index, s_geo })
        .collect()
}

/// IoU between the image envelope of `b` and the detection box; zero when
/// the box does not project.
pub fn projected_iou(cam: &CameraModel, b: &Box3D, det_box: &Box2D) -> f64 {
    project_box3d(cam, b).map_or(0.0, |pb| iou_2d(&pb, det_box))
}

fn make_cluster(
    scene: &Scene,
    cam: &CameraModel,
    det: &Detection2D,
    indices: Vec<usize>,
    s_geo: f64,
) -> Result<Cluster> {
    let pts: Vec<Point3> = indices.iter().map(|&i| scene.points[i]).collect();
    let bbox = fit_min_box(&pts)?;
    let s_iou = projected_iou(cam, &bbox, &det.bbox);
    Ok(Cluster {
        indices,
        s_geo,
        bbox,
        s_iou,
    })
}

/// Clusters the scored points and attaches geometry share, fitted box and
/// projected IoU to each cluster. Clusters come out in label order.
pub fn cluster_points(
    scene: &Scene,
    det: &Detection2D,
    scored: &[ScoredPoint],
    eps: f64,
    min_samples: usize,
) -> Result<Vec<Cluster>> {
    let cam = camera(scene, det)
        .ok_or_else(|| Error::Config(format!("detection view {} has no camera", det.view)))?;
    let pts: Vec<Point3> = scored.iter().map(|s| scene.points[s.index]).collect();
    let labels = dbscan(&pts, eps, min_samples);
    let total: f64 = scored.iter().map(|s| s.s_geo).sum();
    let n_labels = labels.iter().flatten().max().map_or(0, |m| m + 1);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    let mut mass = vec![0.0; n_labels];
    for (s, l) in scored.iter().zip(&labels) {
        if let Some(l) = l {
            members[*l].push(s.index);
            mass[*l] += s.s_geo;
        }
    }
    members
        .into_iter()
        .zip(mass)
        .map(|(mut idx, m)| {
            idx.sort_unstable();
            let share = if total > 0.0 { m / total } else { 0.0 };
            make_cluster(scene, cam, det, idx, share)
        })
        .collect()
}

/// Per-axis size cap for merged boxes of `category`.
pub fn thresh_dim(category: &Category, factor: f64) -> [f64; 3] {
    category.prior_size.map(|s| s * factor)
}

/// Whether `size` is strictly below `thresh` on every axis. Horizontal axes
/// are compared longer-to-longer, since fitted boxes put the longer side in
/// `length` while some priors do not.
pub fn within_thresh(size: &[f64; 3], thresh: &[f64; 3]) -> bool {
    let s = canonical_size(*size);
    let t = canonical_size(*thresh);
    s[0] < t[0] && s[1] < t[1] && s[2] < t[2]
}

/// Greedy merge: starting from the cluster with the largest geometry share,
/// absorb each remaining cluster (in decreasing share) if the refitted box
/// raises the projected IoU and stays under the size cap.
pub fn merge_clusters(
    scene: &Scene,
    det: &Detection2D,
    clusters: &[Cluster],
    thresh: &[f64; 3],
) -> Result<Cluster> {
    if clusters.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let cam = camera(scene, det)
        .ok_or_else(|| Error::Config(format!("detection view {} has no camera", det.view)))?;
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| {
        clusters[b]
            .s_geo
            .total_cmp(&clusters[a].s_geo)
            .then(a.cmp(&b))
    });

    let mut cur = clusters[order[0]].clone();
    for &k in &order[1..] {
        let c = &clusters[k];
        let mut idx = cur.indices.clone();
        idx.extend_from_slice(&c.indices);
        idx.sort_unstable();
        let cand = make_cluster(scene, cam, det, idx, cur.s_geo + c.s_geo)?;
        if cand.s_iou > cur.s_iou && within_thresh(&cand.bbox.size, thresh) {
            cur = cand;
        }
    }
    Ok(cur)
}

enum Outcome {
    Kept(Box<Proposal>, usize),
    Skipped(String, usize),
}

fn propose_one(
    scene: &Scene,
    pixels: &[Vec<Option<(u32, u32)>>],
    det_index: usize,
    det: &Detection2D,
    cfg: &ImcvConfig,
) -> Result<Outcome> {
    let Some(cam) = camera(scene, det) else {
        return Ok(Outcome::Skipped(
            format!("view {} has no camera", det.view),
            0,
        ));
    };
    let fg: Vec<usize> = pixels[det.view]
        .iter()
        .enumerate()
        .filter_map(|(i, px)| px.filter(|&(u, v)| det.mask.contains(u, v)).map(|_| i))
        .collect();
    if fg.is_empty() {
        return Ok(Outcome::Skipped("empty foreground".into(), 0));
    }
    let scored = geometry_scores(scene, det, &fg, cfg.r_max);
    let clusters = cluster_points(scene, det, &scored, cfg.dbscan_eps, cfg.dbscan_min_samples)?;
    if clusters.is_empty() {
        return Ok(Outcome::Skipped("no dense cluster".into(), 0));
    }
    let merged = merge_clusters(
        scene,
        det,
        &clusters,
        &thresh_dim(&det.category, cfg.thresh_dim_factor),
    )?;
    let pts: Vec<Point3> = merged.indices.iter().map(|&i| scene.points[i]).collect();
    let cands = generate_candidates(
        &merged.bbox,
        &pts,
        det.category.prior_size,
        cfg.n_sizes,
        cfg.n_yaws,
    )?;
    let sel = score_candidates(&cands, &pts, cam, &det.bbox, cfg.alpha_pts, cfg.alpha_iou)?;
    Ok(Outcome::Kept(
        Box::new(Proposal {
            bbox: sel.bbox,
            category: det.category.clone(),
            super_category: det.category.super_category,
            scores: ProposalScores {
                geo: merged.s_geo,
                iou: sel.s_iou,
                pts: sel.s_pts,
                total: sel.s_total,
            },
            seeker_score: det.seeker_score,
            source: ProposalSource {
                view: det.view,
                det_index,
            },
            refined_box: None,
            iou_conf: None,
            fused_score: None,
        }),
        clusters.len(),
    ))
}

/// Runs the full proposal stage over every detection of one scene. Output
/// order follows detection order; detections yielding no proposal are
/// listed in the diagnostics.
pub fn run_imcv(
    scene: &Scene,
    detections: &[Detection2D],
    cfg: &ImcvConfig,
) -> Result<(Vec<Proposal>, ImcvDiagnostics)> {
    cfg.validate()?;
    let mut used = vec![false; scene.cameras.len()];
    for d in detections {
        if let Some(u) = used.get_mut(d.view) {
            *u = true;
        }
    }
    let pixels: Vec<Vec<Option<(u32, u32)>>> = scene
        .cameras
        .iter()
        .zip(&used)
        .map(|(cam, &u)| {
            if !u {
                return Vec::new();
            }
            scene
                .points
                .iter()
                .map(|p| project_point(cam, p).map(|pr| pr.pixel()))
                .collect()
        })
        .collect();

    let outcomes: Vec<Result<Outcome>> = detections
        .par_iter()
        .enumerate()
        .map(|(i, d)| propose_one(scene, &pixels, i, d, cfg))
        .collect();

    let mut proposals = Vec::new();
    let mut diag = ImcvDiagnostics::default();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out? {
            Outcome::Kept(p, n) => {
                proposals.push(*p);
                diag.cluster_counts.push(n);
            }
            Outcome::Skipped(reason, n) => {
                diag.skipped.push(SkippedDetection {
                    det_index: i,
                    view: detections[i].view,
                    reason,
                });
                diag.cluster_counts.push(n);
            }
        }
    }
    Ok((proposals, diag))
}
