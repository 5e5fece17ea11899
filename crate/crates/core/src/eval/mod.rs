//! Matching predictions to ground truth, average precision, and box error
//! statistics.

use crate::denoiser::canonical_box;
use crate::geom::{fold_half_turn, iou_3d, Box3D};
use crate::proposal::Proposal;
use crate::scene::{Category, GtObject};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// A scored 3D box to be judged against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub category: String,
    pub score: f64,
}

impl ScoredBox {
    /// The proposal's current box and ranking score.
    pub fn from_proposal(p: &Proposal) -> Self {
        Self {
            bbox: *p.final_box(),
            category: p.category.name.clone(),
            score: p.ranking_score(),
        }
    }

    /// The proposal before refinement, ranked by the seeker score.
    pub fn initial(p: &Proposal) -> Self {
        Self {
            bbox: p.bbox,
            category: p.category.name.clone(),
            score: p.seeker_score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "snake_case")]
pub enum MatchCriterion {
    /// `iou_3d >= threshold`.
    Iou(f64),
    /// BEV centre distance `<= threshold` meters.
    CenterDistance(f64),
}

impl Default for MatchCriterion {
    fn default() -> Self {
        Self::Iou(0.25)
    }
}

impl MatchCriterion {
    /// Affinity of a pair (larger is better), or `None` if it fails.
    fn affinity(&self, p: &Box3D, g: &Box3D) -> Option<f64> {
        match *self {
            Self::Iou(th) => {
                let v = iou_3d(p, g);
                (v >= th).then_some(v)
            }
            Self::CenterDistance(th) => {
                let d = (p.center.x - g.center.x).hypot(p.center.y - g.center.y);
                (d <= th).then_some(-d)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// In the order the predictions were processed (descending score).
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Prediction indices by descending score, ties by index.
fn score_order(preds: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching: in descending score order each prediction claims the
/// best still-unmatched ground truth of its category that meets the
/// criterion, ties going to the lower gt index.
pub fn match_boxes(
    preds: &[ScoredBox],
    gts: &[GtObject],
    criterion: MatchCriterion,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for i in score_order(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.category.name != p.category {
                continue;
            }
            if let Some(a) = criterion.affinity(&p.bbox, &g.bbox) {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((j, a));
                }
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                out.pairs.push(MatchPair {
                    pred: i,
                    gt: j,
                    iou: iou_3d(&p.bbox, &gts[j].bbox),
                });
            }
            None => out.unmatched_preds.push(i),
        }
    }
    out.unmatched_preds.sort_unstable();
    out.unmatched_gt = (0..gts.len()).filter(|&j| !taken[j]).collect();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    /// Best precision at this recall or higher.
    pub envelope: f64,
}

/// Precision/recall after each ranked prediction.
pub fn pr_curve(ranked: &[(f64, bool)], num_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    let mut pts: Vec<PrPoint> = ranked
        .iter()
        .enumerate()
        .map(|(k, &(score, hit))| {
            tp += hit as usize;
            let precision = tp as f64 / (k + 1) as f64;
            PrPoint {
                score,
                recall: if num_gt == 0 {
                    0.0
                } else {
                    tp as f64 / num_gt as f64
                },
                precision,
                envelope: precision,
            }
        })
        .collect();
    for k in (0..pts.len().saturating_sub(1)).rev() {
        pts[k].envelope = pts[k].envelope.max(pts[k + 1].envelope);
    }
    pts
}

/// Area under the all-points interpolated precision envelope, by trapezoids
/// starting from recall 0 at the first envelope value. `None` without gt.
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let pts = pr_curve(ranked, num_gt);
    let Some(first) = pts.first() else {
        return Some(0.0);
    };
    let (mut r0, mut p0) = (0.0, first.envelope);
    let mut area = 0.0;
    for p in &pts {
        area += (p.recall - r0) * (p.envelope + p0) / 2.0;
        r0 = p.recall;
        p0 = p.envelope;
    }
    Some(area.clamp(0.0, 1.0))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Errors of one predicted box against its ground truth. Both boxes are put
/// in long-side-first form first so a length/width swap is not an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxError {
    pub center: f64,
    /// `|s_pred - s_gt| / s_gt` per axis.
    pub size: [f64; 3],
    /// Heading-free yaw difference in degrees, in `[0, 90]`.
    pub yaw_deg: f64,
}

pub fn box_error(pred: &Box3D, gt: &Box3D) -> BoxError {
    let (p, g) = (canonical_box(pred), canonical_box(gt));
    let d = [
        p.center.x - g.center.x,
        p.center.y - g.center.y,
        p.center.z - g.center.z,
    ];
    let mut size = [0.0; 3];
    for k in 0..3 {
        size[k] = (p.size[k] - g.size[k]).abs() / g.size[k];
    }
    BoxError {
        center: (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
        size,
        yaw_deg: fold_half_turn(p.yaw - g.yaw).abs().to_degrees(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxErrorStats {
    pub count: usize,
    pub center_mean: f64,
    pub center_median: f64,
    /// Mean over axes of the relative size error.
    pub size_mean: f64,
    pub size_median: f64,
    pub size_axis_mean: [f64; 3],
    pub yaw_mean_deg: f64,
    pub yaw_median_deg: f64,
    pub iou_mean: f64,
}

pub fn box_error_stats(pairs: &[(Box3D, Box3D)]) -> BoxErrorStats {
    let errs: Vec<BoxError> = pairs.iter().map(|(p, g)| box_error(p, g)).collect();
    let center: Vec<f64> = errs.iter().map(|e| e.center).collect();
    let size: Vec<f64> = errs
        .iter()
        .map(|e| e.size.iter().sum::<f64>() / 3.0)
        .collect();
    let yaw: Vec<f64> = errs.iter().map(|e| e.yaw_deg).collect();
    let ious: Vec<f64> = pairs.iter().map(|(p, g)| iou_3d(p, g)).collect();
    let mut axis = [0.0; 3];
    for (k, a) in axis.iter_mut().enumerate() {
        *a = mean(&errs.iter().map(|e| e.size[k]).collect::<Vec<_>>());
    }
    BoxErrorStats {
        count: pairs.len(),
        center_mean: mean(&center),
        center_median: median(&center),
        size_mean: mean(&size),
        size_median: median(&size),
        size_axis_mean: axis,
        yaw_mean_deg: mean(&yaw),
        yaw_median_deg: median(&yaw),
        iou_mean: mean(&ious),
    }
}

/// Per prediction, the best `iou_3d` with any ground truth of its category
/// (0 if there is none).
pub fn best_iou_per_prediction(preds: &[ScoredBox], gts: &[GtObject]) -> Vec<f64> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .filter(|g| g.category.name == p.category)
                .map(|g| iou_3d(&p.bbox, &g.bbox))
                .fold(0.0, f64::max)
        })
        .collect()
}

pub const IOU_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub criterion: MatchCriterion,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    /// Mean AP over categories with ground truth.
    pub map: Option<f64>,
    pub map_base: Option<f64>,
    pub map_novel: Option<f64>,
    pub errors: BoxErrorStats,
    /// Mean over predictions of the best same-category `iou_3d`.
    pub mean_best_iou: Option<f64>,
    /// Matched-pair `iou_3d` counts in bins of width 0.1.
    pub iou_histogram: [usize; IOU_BINS],
}

/// One scene's predictions and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub preds: &'a [ScoredBox],
    pub gts: &'a [GtObject],
}

/// Ranked `(score, is_true_positive)` lists per category pooled over
/// scenes, with gt counts. Ties in score keep scene then prediction order.
fn ranked_by_category(
    scenes: &[EvalScene<'_>],
    matches: &[MatchResult],
) -> BTreeMap<String, (Vec<(f64, bool)>, usize)> {
    let mut out: BTreeMap<String, (Vec<(f64, bool)>, usize)> = BTreeMap::new();
    for (s, m) in scenes.iter().zip(matches) {
        for g in s.gts {
            out.entry(g.category.name.clone()).or_default().1 += 1;
        }
        let mut hit = vec![false; s.preds.len()];
        for p in &m.pairs {
            hit[p.pred] = true;
        }
        for (i, p) in s.preds.iter().enumerate() {
            out.entry(p.category.clone())
                .or_default()
                .0
                .push((p.score, hit[i]));
        }
    }
    for (ranked, _) in out.values_mut() {
        // stable sort keeps scene/prediction order among equal scores
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    }
    out
}

fn mean_of(aps: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = aps.collect();
    (!v.is_empty()).then(|| mean(&v))
}

pub fn evaluate(scenes: &[EvalScene<'_>], criterion: MatchCriterion) -> MetricsReport {
    let matches: Vec<MatchResult> = scenes
        .par_iter()
        .map(|s| match_boxes(s.preds, s.gts, criterion))
        .collect();
    let ranked = ranked_by_category(scenes, &matches);
    let per_category: BTreeMap<String, CategoryMetrics> = ranked
        .into_par_iter()
        .map(|(name, (list, num_gt))| {
            let m = CategoryMetrics {
                ap: average_precision(&list, num_gt),
                num_gt,
                num_pred: list.len(),
                tp: list.iter().filter(|(_, h)| *h).count(),
            };
            (name, m)
        })
        .collect();
    let is_base = |n: &str| Category::by_name(n).map(|c| c.is_base);
    let map = mean_of(per_category.values().filter_map(|m| m.ap));
    let map_base = mean_of(
        per_category
            .iter()
            .filter(|(n, _)| is_base(n) == Some(true))
            .filter_map(|(_, m)| m.ap),
    );
    let map_novel = mean_of(
        per_category
            .iter()
            .filter(|(n, _)| is_base(n) == Some(false))
            .filter_map(|(_, m)| m.ap),
    );

    let mut pairs = Vec::new();
    for (s, m) in scenes.iter().zip(&matches) {
        for p in &m.pairs {
            pairs.push((s.preds[p.pred].bbox, s.gts[p.gt].bbox));
        }
    }
    let mut iou_histogram = [0usize; IOU_BINS];
    for (p, g) in &pairs {
        let b = ((iou_3d(p, g) * IOU_BINS as f64) as usize).min(IOU_BINS - 1);
        iou_histogram[b] += 1;
    }
    let best: Vec<f64> = scenes
        .iter()
        .flat_map(|s| best_iou_per_prediction(s.preds, s.gts))
        .collect();
    MetricsReport {
        criterion,
        per_category,
        map,
        map_base,
        map_novel,
        errors: box_error_stats(&pairs),
        mean_best_iou: (!best.is_empty()).then(|| mean(&best)),
        iou_histogram,
    }
}

/// Per-category PR curves as CSV rows:
/// `category,rank,score,recall,precision,envelope`.
pub fn pr_curves_csv(scenes: &[EvalScene<'_>], criterion: MatchCriterion) -> String {
    let matches: Vec<MatchResult> = scenes
        .iter()
        .map(|s| match_boxes(s.preds, s.gts, criterion))
        .collect();
    let mut out = String::from("category,rank,score,recall,precision,envelope\n");
    for (name, (list, num_gt)) in ranked_by_category(scenes, &matches) {
        for (k, p) in pr_curve(&list, num_gt).iter().enumerate() {
            let _ = writeln!(
                out,
                "{name},{k},{},{},{},{}",
                p.score, p.recall, p.precision, p.envelope
            );
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Fixed-width text rendering of a report.
pub fn render_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>8} {:>6} {:>6} {:>6}",
        "category", "AP", "gt", "pred", "tp"
    );
    for (name, m) in &r.per_category {
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>6} {:>6} {:>6}",
            name,
            fmt_opt(m.ap),
            m.num_gt,
            m.num_pred,
            m.tp
        );
    }
    let _ = writeln!(s, "{:<22} {:>8}", "mAP", fmt_opt(r.map));
    let _ = writeln!(s, "{:<22} {:>8}", "mAP (base)", fmt_opt(r.map_base));
    let _ = writeln!(s, "{:<22} {:>8}", "mAP (novel)", fmt_opt(r.map_novel));
    let e = &r.errors;
    let _ = writeln!(s, "matched pairs          {}", e.count);
    let _ = writeln!(
        s,
        "center error (m)       mean {:.4} median {:.4}",
        e.center_mean, e.center_median
    );
    let _ = writeln!(
        s,
        "size error (rel)       mean {:.4} median {:.4}",
        e.size_mean, e.size_median
    );
    let _ = writeln!(
        s,
        "yaw error (deg)        mean {:.4} median {:.4}",
        e.yaw_mean_deg, e.yaw_median_deg
    );
    let _ = writeln!(s, "iou_3d                 mean {:.4}", e.iou_mean);
    let _ = writeln!(
        s,
        "best iou per pred      mean {}",
        fmt_opt(r.mean_best_iou)
    );
    let hist: Vec<String> = r.iou_histogram.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(s, "iou histogram          {}", hist.join(" "));
    s
}
