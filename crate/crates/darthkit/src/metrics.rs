//! Tracking evaluation: CLEAR accuracy, identity F1 and the higher-order
//! detection/association decomposition, evaluated per class and aggregated.
//!
//! Semantics follow the reference evaluation kits used for MOT benchmarks:
//! - CLEAR matching is frame-by-frame Hungarian on IoU with previous
//!   correspondences kept while they still clear the threshold; an identity
//!   switch is a ground-truth track whose matched prediction differs from its
//!   most recent match, including across gaps. MOTA is never clamped and can
//!   be negative.
//! - IDF1 comes from one global bipartite matching of ground-truth and
//!   predicted identities maximizing the co-located frame count.
//! - The higher-order family sweeps 19 localization thresholds
//!   (0.05, 0.10, .., 0.95); per frame, one Hungarian match on
//!   global-alignment-weighted IoU is shared by all thresholds, and
//!   association accuracy averages each matched pair's alignment Jaccard over
//!   true positives.
//!
//! Classes are scored independently; `average` aggregation is the unweighted
//! mean over classes with ground truth, `overall` re-derives every metric from
//! summed count arrays. An empty ground truth makes the scores undefined and
//! is reported as absent values, never as zeros.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::{max_score_assignment, max_score_total};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::motio::TrackingResult;

/// Localization thresholds for the higher-order metrics.
pub const ALPHAS: [f64; 19] = {
    let mut a = [0.0; 19];
    let mut i = 0;
    while i < 19 {
        a[i] = 0.05 * (i + 1) as f64;
        i += 1;
    }
    a
};

/// Score used by both matching passes; boxes are compared in the ground
/// truth's pixel frame with no normalization.
fn frame_similarity(gt: &[BoundingBox], pred: &[BoundingBox]) -> Array2<f64> {
    Array2::from_shape_fn((gt.len(), pred.len()), |(i, j)| iou(&gt[i], &pred[j]))
}

/// Frame-aligned views of both results, extended with empty frames so the two
/// sides cover the same range.
fn aligned_frames(
    gt: &TrackingResult,
    pred: &TrackingResult,
) -> (Vec<(Vec<u64>, Vec<BoundingBox>)>, Vec<(Vec<u64>, Vec<BoundingBox>)>) {
    let mut g = gt.by_frame();
    let mut p = pred.by_frame();
    let frames = g.len().max(p.len());
    g.resize_with(frames, Default::default);
    p.resize_with(frames, Default::default);
    (g, p)
}

// CLEAR

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
}

fn clear_counts(gt: &TrackingResult, pred: &TrackingResult, iou_thr: f64) -> ClearCounts {
    let (gframes, pframes) = aligned_frames(gt, pred);
    let mut counts = ClearCounts::default();
    // Correspondences from the previous frame (drive match persistence) and
    // the most recent match ever per ground-truth id (drives switch counting).
    let mut prev: HashMap<u64, u64> = HashMap::new();
    let mut last_known: HashMap<u64, u64> = HashMap::new();

    for ((gids, gboxes), (pids, pboxes)) in gframes.iter().zip(pframes.iter()) {
        let sim = frame_similarity(gboxes, pboxes);
        // A persisting valid pair outweighs any rearrangement of plain IoU
        // scores, which is exactly the "keep while still above threshold"
        // rule; below-threshold pairs score zero and are dropped after.
        let score = Array2::from_shape_fn(sim.raw_dim(), |(i, j)| {
            if sim[[i, j]] >= iou_thr {
                let bonus = if prev.get(&gids[i]) == Some(&pids[j]) { 1000.0 } else { 0.0 };
                sim[[i, j]] + bonus
            } else {
                0.0
            }
        });
        let matched: Vec<(usize, usize)> = max_score_assignment(&score)
            .into_iter()
            .filter(|&(i, j)| sim[[i, j]] >= iou_thr)
            .collect();

        counts.tp += matched.len() as u64;
        counts.fn_ += (gids.len() - matched.len()) as u64;
        counts.fp += (pids.len() - matched.len()) as u64;

        prev.clear();
        for &(i, j) in &matched {
            if let Some(&old) = last_known.get(&gids[i]) {
                if old != pids[j] {
                    counts.idsw += 1;
                }
            }
            last_known.insert(gids[i], pids[j]);
            prev.insert(gids[i], pids[j]);
        }
    }
    counts
}

/// CLEAR summary `(MOTA, IDSW, FP, FN)`. MOTA is absent when the ground truth
/// has no boxes (the ratio is undefined, not zero).
pub fn clear_mot(
    gt: &TrackingResult,
    pred: &TrackingResult,
    iou_thr: f64,
) -> (Option<f64>, u64, u64, u64) {
    let c = clear_counts(gt, pred, iou_thr);
    let num_gt = gt.entries.len() as u64;
    let mota = (num_gt > 0)
        .then(|| 1.0 - (c.fn_ + c.fp + c.idsw) as f64 / num_gt as f64);
    (mota, c.idsw, c.fp, c.fn_)
}

// Identity F1

/// Maximum number of co-located frames achievable by one global injective
/// pairing of ground-truth and predicted identities.
fn idtp(gt: &TrackingResult, pred: &TrackingResult, iou_thr: f64) -> u64 {
    let (gframes, pframes) = aligned_frames(gt, pred);
    let gt_ids: Vec<u64> = gt.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pr_ids: Vec<u64> = pred.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
    let gidx: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let pidx: BTreeMap<u64, usize> = pr_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let mut overlap = Array2::<f64>::zeros((gt_ids.len(), pr_ids.len()));
    for ((gids, gboxes), (pids, pboxes)) in gframes.iter().zip(pframes.iter()) {
        for (i, g) in gboxes.iter().enumerate() {
            for (j, p) in pboxes.iter().enumerate() {
                if iou(g, p) >= iou_thr {
                    overlap[[gidx[&gids[i]], pidx[&pids[j]]]] += 1.0;
                }
            }
        }
    }
    max_score_total(&overlap).round() as u64
}

/// Identity F1 in `[0, 1]`; absent when the ground truth has no boxes.
pub fn idf1(gt: &TrackingResult, pred: &TrackingResult, iou_thr: f64) -> Option<f64> {
    if gt.entries.is_empty() {
        return None;
    }
    let tp = idtp(gt, pred, iou_thr) as f64;
    Some(2.0 * tp / (gt.entries.len() + pred.entries.len()) as f64)
}

// Higher-order family

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotaCounts {
    pub tp: [f64; 19],
    pub fp: [f64; 19],
    #[serde(rename = "fn")]
    pub fn_: [f64; 19],
    /// Per threshold, the sum over matched pairs of
    /// `pair_matches * pair_matches / (gt_frames + pred_frames - pair_matches)`,
    /// i.e. true positives weighted by their track-level alignment Jaccard.
    pub ass_weighted: [f64; 19],
}

impl Default for HotaCounts {
    fn default() -> Self {
        HotaCounts { tp: [0.0; 19], fp: [0.0; 19], fn_: [0.0; 19], ass_weighted: [0.0; 19] }
    }
}

fn hota_counts(gt: &TrackingResult, pred: &TrackingResult) -> HotaCounts {
    let (gframes, pframes) = aligned_frames(gt, pred);
    let gt_ids: Vec<u64> = gt.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pr_ids: Vec<u64> = pred.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
    let gidx: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let pidx: BTreeMap<u64, usize> = pr_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let (ng, np) = (gt_ids.len(), pr_ids.len());

    // First pass: appearance counts and soft potential-match mass per id pair,
    // giving a global alignment score that biases the per-frame matching
    // toward consistent identities.
    let mut gt_count = vec![0.0f64; ng];
    let mut pr_count = vec![0.0f64; np];
    let mut potential = Array2::<f64>::zeros((ng, np));
    for ((gids, gboxes), (pids, pboxes)) in gframes.iter().zip(pframes.iter()) {
        let sim = frame_similarity(gboxes, pboxes);
        let row_sum: Vec<f64> = (0..gids.len()).map(|i| sim.row(i).sum()).collect();
        let col_sum: Vec<f64> = (0..pids.len()).map(|j| sim.column(j).sum()).collect();
        for i in 0..gids.len() {
            for j in 0..pids.len() {
                let denom = row_sum[i] + col_sum[j] - sim[[i, j]];
                if denom > f64::EPSILON {
                    potential[[gidx[&gids[i]], pidx[&pids[j]]]] += sim[[i, j]] / denom;
                }
            }
        }
        for id in gids {
            gt_count[gidx[id]] += 1.0;
        }
        for id in pids {
            pr_count[pidx[id]] += 1.0;
        }
    }
    let alignment = Array2::from_shape_fn((ng, np), |(g, p)| {
        potential[[g, p]] / (gt_count[g] + pr_count[p] - potential[[g, p]])
    });

    // Second pass: one matching per frame shared by all thresholds.
    let mut counts = HotaCounts::default();
    let mut matches = vec![Array2::<f64>::zeros((ng, np)); ALPHAS.len()];
    for ((gids, gboxes), (pids, pboxes)) in gframes.iter().zip(pframes.iter()) {
        let sim = frame_similarity(gboxes, pboxes);
        let score = Array2::from_shape_fn(sim.raw_dim(), |(i, j)| {
            alignment[[gidx[&gids[i]], pidx[&pids[j]]]] * sim[[i, j]]
        });
        let pairs = max_score_assignment(&score);
        for (a, &alpha) in ALPHAS.iter().enumerate() {
            let mut tp_here = 0u64;
            for &(i, j) in &pairs {
                if sim[[i, j]] >= alpha - f64::EPSILON {
                    tp_here += 1;
                    matches[a][[gidx[&gids[i]], pidx[&pids[j]]]] += 1.0;
                }
            }
            counts.tp[a] += tp_here as f64;
            counts.fn_[a] += (gids.len() as u64 - tp_here) as f64;
            counts.fp[a] += (pids.len() as u64 - tp_here) as f64;
        }
    }
    for (a, m) in matches.iter().enumerate() {
        let mut acc = 0.0;
        for g in 0..ng {
            for p in 0..np {
                let c = m[[g, p]];
                if c > 0.0 {
                    acc += c * (c / (gt_count[g] + pr_count[p] - c));
                }
            }
        }
        counts.ass_weighted[a] = acc;
    }
    counts
}

/// Derive `(HOTA, DetA, AssA)` in `[0, 1]` from accumulated counts: per
/// threshold values combined by the geometric mean, then averaged.
pub fn hota_from_counts(c: &HotaCounts) -> (f64, f64, f64) {
    let mut hota = 0.0;
    let mut deta = 0.0;
    let mut assa = 0.0;
    for a in 0..ALPHAS.len() {
        let denom = c.tp[a] + c.fn_[a] + c.fp[a];
        let det = if denom > 0.0 { c.tp[a] / denom } else { 0.0 };
        let ass = c.ass_weighted[a] / c.tp[a].max(1.0);
        hota += (det * ass).sqrt();
        deta += det;
        assa += ass;
    }
    let n = ALPHAS.len() as f64;
    (hota / n, deta / n, assa / n)
}

/// `(HOTA, DetA, AssA)` in `[0, 1]`; absent when the ground truth is empty.
pub fn hota(gt: &TrackingResult, pred: &TrackingResult) -> Option<(f64, f64, f64)> {
    if gt.entries.is_empty() {
        return None;
    }
    Some(hota_from_counts(&hota_counts(gt, pred)))
}

// Class-wise evaluation and aggregation

/// Every count needed to re-derive the five metrics; counts pool across
/// sequences and classes by plain summation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub num_gt: u64,
    pub num_pred: u64,
    pub clear: ClearCounts,
    pub idtp: u64,
    pub hota: HotaCounts,
}

impl Default for ClassCounts {
    fn default() -> Self {
        ClassCounts {
            num_gt: 0,
            num_pred: 0,
            clear: ClearCounts::default(),
            idtp: 0,
            hota: HotaCounts::default(),
        }
    }
}

impl ClassCounts {
    pub fn merge(&mut self, other: &ClassCounts) {
        self.num_gt += other.num_gt;
        self.num_pred += other.num_pred;
        self.clear.tp += other.clear.tp;
        self.clear.fp += other.clear.fp;
        self.clear.fn_ += other.clear.fn_;
        self.clear.idsw += other.clear.idsw;
        self.idtp += other.idtp;
        for a in 0..ALPHAS.len() {
            self.hota.tp[a] += other.hota.tp[a];
            self.hota.fp[a] += other.hota.fp[a];
            self.hota.fn_[a] += other.hota.fn_[a];
            self.hota.ass_weighted[a] += other.hota.ass_weighted[a];
        }
    }
}

/// The five reported metrics, as percentages, in the fixed report order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub det_a: f64,
    pub mota: f64,
    pub hota: f64,
    pub idf1: f64,
    pub ass_a: f64,
}

/// Derive percentage values from counts; absent when there is no ground
/// truth to score against.
pub fn derive_values(c: &ClassCounts) -> Option<MetricValues> {
    if c.num_gt == 0 {
        return None;
    }
    let (hota, det_a, ass_a) = hota_from_counts(&c.hota);
    let mota =
        1.0 - (c.clear.fn_ + c.clear.fp + c.clear.idsw) as f64 / c.num_gt as f64;
    let idf1 = 2.0 * c.idtp as f64 / (c.num_gt + c.num_pred) as f64;
    Some(MetricValues {
        det_a: 100.0 * det_a,
        mota: 100.0 * mota,
        hota: 100.0 * hota,
        idf1: 100.0 * idf1,
        ass_a: 100.0 * ass_a,
    })
}

/// Counts for one class of one gt/pred pair. Inputs are filtered to the class
/// and gt ignore rows are dropped before counting.
pub fn class_counts(
    gt: &TrackingResult,
    pred: &TrackingResult,
    class: u32,
    iou_thr: f64,
) -> ClassCounts {
    let g = gt.filter_class(class).without_ignored();
    let p = pred.filter_class(class);
    ClassCounts {
        num_gt: g.entries.len() as u64,
        num_pred: p.entries.len() as u64,
        clear: clear_counts(&g, &p, iou_thr),
        idtp: idtp(&g, &p, iou_thr),
        hota: hota_counts(&g, &p),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u32,
    pub counts: ClassCounts,
    /// Absent when this class has no ground truth.
    pub values: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub name: String,
    pub per_class: Vec<ClassReport>,
    pub average: Option<MetricValues>,
    pub overall: Option<MetricValues>,
}

/// Dataset-level report: per-sequence sections plus class counts pooled over
/// sequences and the two aggregation views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_thr: f64,
    pub sequences: Vec<SequenceReport>,
    pub per_class: Vec<ClassReport>,
    pub average: Option<MetricValues>,
    pub overall: Option<MetricValues>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    /// Unweighted mean over classes that have ground truth.
    Average,
    /// Re-derive every metric from counts summed over classes.
    Overall,
}

/// Aggregate per-class reports. Absent when no class has ground truth.
pub fn aggregate(per_class: &[ClassReport], mode: AggregateMode) -> Option<MetricValues> {
    match mode {
        AggregateMode::Average => {
            let defined: Vec<&MetricValues> =
                per_class.iter().filter_map(|c| c.values.as_ref()).collect();
            if defined.is_empty() {
                return None;
            }
            let n = defined.len() as f64;
            Some(MetricValues {
                det_a: defined.iter().map(|v| v.det_a).sum::<f64>() / n,
                mota: defined.iter().map(|v| v.mota).sum::<f64>() / n,
                hota: defined.iter().map(|v| v.hota).sum::<f64>() / n,
                idf1: defined.iter().map(|v| v.idf1).sum::<f64>() / n,
                ass_a: defined.iter().map(|v| v.ass_a).sum::<f64>() / n,
            })
        }
        AggregateMode::Overall => {
            let mut pooled = ClassCounts::default();
            for c in per_class {
                pooled.merge(&c.counts);
            }
            derive_values(&pooled)
        }
    }
}

/// Evaluate named sequence pairs: per-sequence per-class counts, pooled into
/// dataset-level per-class counts, plus both aggregations at each level.
/// Classes are the union of both sides' labels; a class present only in
/// predictions still contributes false positives to the pooled view.
pub fn evaluate_sequences(
    pairs: &[(String, TrackingResult, TrackingResult)],
    iou_thr: f64,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::MismatchedSequences("no sequences to evaluate".into()));
    }
    let mut classes: BTreeSet<u32> = BTreeSet::new();
    for (_, gt, pred) in pairs {
        classes.extend(gt.without_ignored().classes());
        classes.extend(pred.classes());
    }

    let mut pooled: BTreeMap<u32, ClassCounts> = BTreeMap::new();
    let mut sequences = Vec::new();
    for (name, gt, pred) in pairs {
        let mut per_class = Vec::new();
        for &class in &classes {
            let counts = class_counts(gt, pred, class, iou_thr);
            pooled.entry(class).or_default().merge(&counts);
            per_class.push(ClassReport { class, values: derive_values(&counts), counts });
        }
        let average = aggregate(&per_class, AggregateMode::Average);
        let overall = aggregate(&per_class, AggregateMode::Overall);
        sequences.push(SequenceReport { name: name.clone(), per_class, average, overall });
    }

    let per_class: Vec<ClassReport> = pooled
        .into_iter()
        .map(|(class, counts)| ClassReport { class, values: derive_values(&counts), counts })
        .collect();
    let average = aggregate(&per_class, AggregateMode::Average);
    let overall = aggregate(&per_class, AggregateMode::Overall);
    Ok(MetricsReport { iou_thr, sequences, per_class, average, overall })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    use super::*;
    use crate::motio::TrackedBox;
    use crate::rng::{stream, StreamRole};

    fn tb(frame: usize, id: u64, x: f64, y: f64, w: f64, h: f64) -> TrackedBox {
        TrackedBox {
            frame,
            id,
            bbox: BoundingBox::from_xywh(x, y, w, h),
            conf: 1.0,
            class: 1,
            vis: 1.0,
        }
    }

    /// Two identities moving on straight lines for `frames` frames.
    fn two_track_gt(frames: usize) -> TrackingResult {
        let mut rows = Vec::new();
        for t in 0..frames {
            rows.push(tb(t + 1, 1, 5.0 + t as f64, 5.0, 10.0, 10.0));
            rows.push(tb(t + 1, 2, 40.0 - t as f64, 30.0, 12.0, 8.0));
        }
        TrackingResult::new(rows)
    }

    #[test]
    fn perfect_tracking_scores_one_everywhere() {
        let gt = two_track_gt(4);
        let (mota, idsw, fp, fn_) = clear_mot(&gt, &gt, 0.5);
        assert_eq!(mota, Some(1.0));
        assert_eq!((idsw, fp, fn_), (0, 0, 0));
        assert_eq!(idf1(&gt, &gt, 0.5), Some(1.0));
        let (h, d, a) = hota(&gt, &gt).unwrap();
        assert_abs_diff_eq!(h, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ten_gt_one_miss_one_false_positive_gives_mota_point_eight() {
        let gt = two_track_gt(5);
        assert_eq!(gt.entries.len(), 10);
        let mut pred = gt.clone();
        pred.entries.remove(0);
        pred.entries.push(tb(3, 9, 200.0, 200.0, 10.0, 10.0));
        let pred = TrackingResult::new(pred.entries);
        let (mota, idsw, fp, fn_) = clear_mot(&gt, &pred, 0.5);
        assert_eq!((idsw, fp, fn_), (0, 1, 1));
        assert_eq!(mota, Some(0.8));
    }

    #[test]
    fn midpoint_id_swap_halves_idf1() {
        let frames = 8;
        let gt = two_track_gt(frames);
        let swapped: Vec<TrackedBox> = gt
            .entries
            .iter()
            .map(|e| {
                let mut e = *e;
                if e.frame > frames / 2 {
                    e.id = 3 - e.id;
                }
                e
            })
            .collect();
        let pred = TrackingResult::new(swapped);
        assert_abs_diff_eq!(idf1(&gt, &pred, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        let (_, idsw, fp, fn_) = clear_mot(&gt, &pred, 0.5);
        assert_eq!((idsw, fp, fn_), (2, 0, 0));
    }

    #[test]
    fn consistent_relabeling_changes_nothing() {
        let gt = two_track_gt(5);
        let mut rng = stream(51, 0, StreamRole::Oracle);
        let pred = random_result(&mut rng, 3, 5);
        let relabeled = TrackingResult::new(
            pred.entries.iter().map(|e| TrackedBox { id: e.id * 7 + 100, ..*e }).collect(),
        );
        assert_eq!(clear_mot(&gt, &pred, 0.5), clear_mot(&gt, &relabeled, 0.5));
        assert_eq!(idf1(&gt, &pred, 0.5), idf1(&gt, &relabeled, 0.5));
        assert_eq!(hota(&gt, &pred), hota(&gt, &relabeled));
    }

    #[test]
    fn fresh_ids_each_frame_hurt_association_only() {
        let gt = two_track_gt(5);
        let fresh: Vec<TrackedBox> = gt
            .entries
            .iter()
            .map(|e| TrackedBox { id: (e.frame as u64) * 10 + e.id, ..*e })
            .collect();
        let pred = TrackingResult::new(fresh);
        let (h, d, a) = hota(&gt, &pred).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        assert!(a < 1.0, "fragmented identities must not score full association");
        assert!(h < 1.0 && h > 0.0);
    }

    #[test]
    fn empty_predictions_score_zero_but_defined() {
        let gt = two_track_gt(3);
        let empty = TrackingResult::default();
        let (mota, _, fp, fn_) = clear_mot(&gt, &empty, 0.5);
        assert_eq!(mota, Some(0.0));
        assert_eq!((fp, fn_), (0, 6));
        assert_eq!(idf1(&gt, &empty, 0.5), Some(0.0));
        let (h, d, a) = hota(&gt, &empty).unwrap();
        assert_eq!((h, d, a), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_ground_truth_is_undefined_not_zero() {
        let empty = TrackingResult::default();
        let pred = two_track_gt(3);
        assert_eq!(clear_mot(&empty, &pred, 0.5).0, None);
        assert_eq!(idf1(&empty, &pred, 0.5), None);
        assert_eq!(hota(&empty, &pred), None);
    }

    #[test]
    fn flooding_false_positives_drives_mota_negative() {
        let gt = TrackingResult::new(vec![tb(1, 1, 5.0, 5.0, 10.0, 10.0)]);
        let mut rows = vec![tb(1, 1, 5.0, 5.0, 10.0, 10.0)];
        for i in 0..5 {
            rows.push(tb(1, 10 + i, 100.0 + 20.0 * i as f64, 100.0, 10.0, 10.0));
        }
        let pred = TrackingResult::new(rows);
        let (mota, _, fp, _) = clear_mot(&gt, &pred, 0.5);
        assert_eq!(fp, 5);
        assert_eq!(mota, Some(-4.0));
    }

    #[test]
    fn persistence_keeps_the_old_match_over_a_better_newcomer() {
        // Frame 1: gt 1 matched to pred 1 (IoU ~0.54). Frame 2: pred 2
        // overlaps gt 1 much better, but the standing match still clears the
        // threshold and must persist, so pred 2 is a false positive and no
        // switch is counted.
        let gt = TrackingResult::new(vec![tb(1, 1, 0.0, 0.0, 10.0, 10.0), tb(2, 1, 0.0, 0.0, 10.0, 10.0)]);
        let pred = TrackingResult::new(vec![
            tb(1, 1, 3.0, 0.0, 10.0, 10.0),
            tb(2, 1, 3.0, 0.0, 10.0, 10.0),
            tb(2, 2, 0.0, 0.0, 10.0, 10.0),
        ]);
        let (_, idsw, fp, fn_) = clear_mot(&gt, &pred, 0.5);
        assert_eq!((idsw, fp, fn_), (0, 1, 0));
    }

    #[test]
    fn switch_is_counted_across_gaps() {
        // gt 1 matched to pred 1, vanishes from predictions for two frames,
        // then comes back as pred 2: one switch even though there was no
        // frame-to-frame handoff.
        let gt = TrackingResult::new(vec![
            tb(1, 1, 0.0, 0.0, 10.0, 10.0),
            tb(2, 1, 0.0, 0.0, 10.0, 10.0),
            tb(3, 1, 0.0, 0.0, 10.0, 10.0),
            tb(4, 1, 0.0, 0.0, 10.0, 10.0),
        ]);
        let pred = TrackingResult::new(vec![
            tb(1, 1, 0.0, 0.0, 10.0, 10.0),
            tb(4, 2, 0.0, 0.0, 10.0, 10.0),
        ]);
        let (_, idsw, _, _) = clear_mot(&gt, &pred, 0.5);
        assert_eq!(idsw, 1);
    }

    // Random tiny instances and definitional oracles.

    fn random_result(rng: &mut impl Rng, max_ids: usize, max_frames: usize) -> TrackingResult {
        let ids = rng.random_range(1..=max_ids) as u64;
        let frames = rng.random_range(1..=max_frames);
        let mut rows = Vec::new();
        for id in 1..=ids {
            for f in 1..=frames {
                if rng.random_bool(0.75) {
                    rows.push(tb(
                        f,
                        id,
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(5.0..20.0),
                        rng.random_range(5.0..20.0),
                    ));
                }
            }
        }
        TrackingResult::new(rows)
    }

    /// Perturbed copy so IoU values spread across the threshold sweep.
    fn jittered(rng: &mut impl Rng, base: &TrackingResult) -> TrackingResult {
        let mut rows = Vec::new();
        for e in &base.entries {
            if !rng.random_bool(0.85) {
                continue;
            }
            let mut e = *e;
            let dx: f64 = rng.random_range(-6.0..6.0);
            let dy: f64 = rng.random_range(-6.0..6.0);
            e.bbox = BoundingBox::new(e.bbox.x1 + dx, e.bbox.y1 + dy, e.bbox.x2 + dx, e.bbox.y2 + dy);
            e.id = ((e.id as usize * 13 + 1) % 4 + 1) as u64;
            rows.push(e);
        }
        TrackingResult::new(rows)
    }

    /// All injective pairings: recursion over gt ids, each either unmatched or
    /// matched to a free pred id.
    fn best_pairing_total(overlap: &Array2<f64>) -> f64 {
        fn go(overlap: &Array2<f64>, g: usize, used: &mut Vec<bool>) -> f64 {
            if g == overlap.nrows() {
                return 0.0;
            }
            let mut best = go(overlap, g + 1, used);
            for p in 0..overlap.ncols() {
                if !used[p] {
                    used[p] = true;
                    best = best.max(overlap[[g, p]] + go(overlap, g + 1, used));
                    used[p] = false;
                }
            }
            best
        }
        go(overlap, 0, &mut vec![false; overlap.ncols()])
    }

    fn oracle_idf1(gt: &TrackingResult, pred: &TrackingResult, iou_thr: f64) -> f64 {
        let gt_ids: Vec<u64> =
            gt.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
        let pr_ids: Vec<u64> =
            pred.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
        let mut overlap = Array2::<f64>::zeros((gt_ids.len(), pr_ids.len()));
        let frames = gt.max_frame().max(pred.max_frame());
        for f in 1..=frames {
            for a in gt.entries.iter().filter(|e| e.frame == f) {
                for b in pred.entries.iter().filter(|e| e.frame == f) {
                    if iou(&a.bbox, &b.bbox) >= iou_thr {
                        let gi = gt_ids.iter().position(|&x| x == a.id).unwrap();
                        let pj = pr_ids.iter().position(|&x| x == b.id).unwrap();
                        overlap[[gi, pj]] += 1.0;
                    }
                }
            }
        }
        let tp = best_pairing_total(&overlap);
        2.0 * tp / (gt.entries.len() + pred.entries.len()) as f64
    }

    #[test]
    fn idf1_matches_exhaustive_pairing_oracle() {
        let mut rng = stream(52, 0, StreamRole::Oracle);
        for _ in 0..40 {
            let gt = random_result(&mut rng, 3, 5);
            if gt.entries.is_empty() {
                continue;
            }
            let pred = jittered(&mut rng, &gt);
            let got = idf1(&gt, &pred, 0.5).unwrap();
            let want = oracle_idf1(&gt, &pred, 0.5);
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    /// All maximum-cardinality injective matchings of `r` rows to `c` columns.
    fn all_matchings(r: usize, c: usize) -> Vec<Vec<(usize, usize)>> {
        fn go(rows: usize, cols: usize, row: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
            if row == rows {
                out.push(cur.clone());
                return;
            }
            if rows <= cols {
                for col in 0..cols {
                    if !used[col] {
                        used[col] = true;
                        cur.push((row, col));
                        go(rows, cols, row + 1, used, cur, out);
                        cur.pop();
                        used[col] = false;
                    }
                }
            } else {
                // More rows than columns: some rows stay unmatched.
                go(rows, cols, row + 1, used, cur, out);
                for col in 0..cols {
                    if !used[col] {
                        used[col] = true;
                        cur.push((row, col));
                        go(rows, cols, row + 1, used, cur, out);
                        cur.pop();
                        used[col] = false;
                    }
                }
            }
        }
        let mut out = Vec::new();
        let mut filtered = Vec::new();
        go(r, c, 0, &mut vec![false; c], &mut Vec::new(), &mut out);
        let want = r.min(c);
        for m in out {
            if m.len() == want {
                filtered.push(m);
            }
        }
        filtered
    }

    /// Definitional re-derivation with the per-frame assignment replaced by
    /// exhaustive enumeration. Returns every final value reachable from tied
    /// optimal matchings; the implementation must land on one of them.
    fn oracle_hota(gt: &TrackingResult, pred: &TrackingResult) -> Vec<(f64, f64, f64)> {
        let gt_ids: Vec<u64> =
            gt.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
        let pr_ids: Vec<u64> =
            pred.entries.iter().map(|e| e.id).collect::<BTreeSet<_>>().into_iter().collect();
        let gpos = |id: u64| gt_ids.iter().position(|&x| x == id).unwrap();
        let ppos = |id: u64| pr_ids.iter().position(|&x| x == id).unwrap();
        let frames = gt.max_frame().max(pred.max_frame());
        let frame_rows = |r: &TrackingResult, f: usize| -> Vec<(u64, BoundingBox)> {
            r.entries.iter().filter(|e| e.frame == f).map(|e| (e.id, e.bbox)).collect()
        };

        let (ng, np) = (gt_ids.len(), pr_ids.len());
        let mut gc = vec![0.0f64; ng];
        let mut pc = vec![0.0f64; np];
        let mut potential = vec![vec![0.0f64; np]; ng];
        for f in 1..=frames {
            let gs = frame_rows(gt, f);
            let ps = frame_rows(pred, f);
            let sim: Vec<Vec<f64>> = gs
                .iter()
                .map(|(_, gb)| ps.iter().map(|(_, pb)| iou(gb, pb)).collect())
                .collect();
            for (i, (gid, _)) in gs.iter().enumerate() {
                for (j, (pid, _)) in ps.iter().enumerate() {
                    let row: f64 = sim[i].iter().sum();
                    let col: f64 = sim.iter().map(|r| r[j]).sum();
                    let denom = row + col - sim[i][j];
                    if denom > f64::EPSILON {
                        potential[gpos(*gid)][ppos(*pid)] += sim[i][j] / denom;
                    }
                }
            }
            for (gid, _) in &gs {
                gc[gpos(*gid)] += 1.0;
            }
            for (pid, _) in &ps {
                pc[ppos(*pid)] += 1.0;
            }
        }
        let align = |g: usize, p: usize| {
            let pot = potential[g][p];
            pot / (gc[g] + pc[p] - pot)
        };

        // Per frame, the set of matchings attaining the maximal total score.
        let mut per_frame: Vec<Vec<Vec<(usize, usize)>>> = Vec::new();
        let mut frame_data = Vec::new();
        for f in 1..=frames {
            let gs = frame_rows(gt, f);
            let ps = frame_rows(pred, f);
            let candidates = all_matchings(gs.len(), ps.len());
            let total = |m: &Vec<(usize, usize)>| -> f64 {
                m.iter()
                    .map(|&(i, j)| {
                        align(gpos(gs[i].0), ppos(ps[j].0)) * iou(&gs[i].1, &ps[j].1)
                    })
                    .sum()
            };
            let best = candidates.iter().map(&total).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<Vec<(usize, usize)>> = candidates
                .into_iter()
                .filter(|m| total(m) >= best - 1e-12)
                .collect();
            per_frame.push(tied);
            frame_data.push((gs, ps));
        }

        // Evaluate every combination of tied per-frame choices.
        let mut results = Vec::new();
        let combos: usize = per_frame.iter().map(|v| v.len()).product();
        assert!(combos <= 50_000, "oracle instance too degenerate: {combos} tied combinations");
        let mut pick = vec![0usize; per_frame.len()];
        loop {
            let mut tp = [0.0f64; 19];
            let mut fna = [0.0f64; 19];
            let mut fpa = [0.0f64; 19];
            let mut matches = vec![vec![[0.0f64; 19]; np]; ng];
            for (fi, (gs, ps)) in frame_data.iter().enumerate() {
                let m = &per_frame[fi][pick[fi]];
                for (a, &alpha) in ALPHAS.iter().enumerate() {
                    let mut here = 0.0;
                    for &(i, j) in m {
                        if iou(&gs[i].1, &ps[j].1) >= alpha - f64::EPSILON {
                            here += 1.0;
                            matches[gpos(gs[i].0)][ppos(ps[j].0)][a] += 1.0;
                        }
                    }
                    tp[a] += here;
                    fna[a] += gs.len() as f64 - here;
                    fpa[a] += ps.len() as f64 - here;
                }
            }
            let mut hsum = 0.0;
            let mut dsum = 0.0;
            let mut asum = 0.0;
            for a in 0..19 {
                let det_den = tp[a] + fna[a] + fpa[a];
                let det = if det_den > 0.0 { tp[a] / det_den } else { 0.0 };
                let mut ass_w = 0.0;
                for g in 0..ng {
                    for p in 0..np {
                        let c = matches[g][p][a];
                        if c > 0.0 {
                            ass_w += c * (c / (gc[g] + pc[p] - c));
                        }
                    }
                }
                let ass = ass_w / tp[a].max(1.0);
                hsum += (det * ass).sqrt();
                dsum += det;
                asum += ass;
            }
            results.push((hsum / 19.0, dsum / 19.0, asum / 19.0));

            // Advance the mixed-radix combination counter.
            let mut fi = 0;
            loop {
                if fi == pick.len() {
                    return results;
                }
                pick[fi] += 1;
                if pick[fi] < per_frame[fi].len() {
                    break;
                }
                pick[fi] = 0;
                fi += 1;
            }
        }
    }

    #[test]
    fn hota_matches_exhaustive_matching_oracle() {
        let mut rng = stream(53, 0, StreamRole::Oracle);
        for _ in 0..40 {
            let gt = random_result(&mut rng, 3, 5);
            if gt.entries.is_empty() {
                continue;
            }
            let pred = jittered(&mut rng, &gt);
            let (h, d, a) = hota(&gt, &pred).unwrap();
            let feasible = oracle_hota(&gt, &pred);
            let ok = feasible.iter().any(|&(oh, od, oa)| {
                (h - oh).abs() <= 1e-9 && (d - od).abs() <= 1e-9 && (a - oa).abs() <= 1e-9
            });
            assert!(ok, "impl ({h}, {d}, {a}) not among {} oracle outcomes", feasible.len());
        }
    }

    // Aggregation

    fn report_for(gt: &TrackingResult, pred: &TrackingResult) -> MetricsReport {
        evaluate_sequences(&[("seq".to_string(), gt.clone(), pred.clone())], 0.5).unwrap()
    }

    #[test]
    fn one_class_average_equals_overall() {
        let gt = two_track_gt(4);
        let mut rng = stream(54, 0, StreamRole::Oracle);
        let pred = jittered(&mut rng, &gt);
        let r = report_for(&gt, &pred);
        assert_eq!(r.average, r.overall);
        assert_eq!(r.per_class.len(), 1);
    }

    #[test]
    fn equal_sized_classes_average_their_motas() {
        // Class 1 tracked perfectly, class 2 entirely missed; equal gt counts.
        let mut rows = Vec::new();
        for f in 1..=3 {
            rows.push(tb(f, 1, 5.0, 5.0, 10.0, 10.0));
            let mut c2 = tb(f, 2, 60.0, 60.0, 10.0, 10.0);
            c2.class = 2;
            rows.push(c2);
        }
        let gt = TrackingResult::new(rows);
        let pred = gt.filter_class(1);
        let r = report_for(&gt, &pred);
        let avg = r.average.unwrap();
        assert_abs_diff_eq!(avg.mota, 50.0, epsilon = 1e-12);
        let overall = r.overall.unwrap();
        assert_abs_diff_eq!(overall.mota, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn unequal_class_sizes_split_average_from_overall() {
        // Class 1: 6 boxes, perfect. Class 2: 2 boxes, missed.
        let mut rows = Vec::new();
        for f in 1..=6 {
            rows.push(tb(f, 1, 5.0, 5.0, 10.0, 10.0));
        }
        for f in 1..=2 {
            let mut c2 = tb(f, 2, 60.0, 60.0, 10.0, 10.0);
            c2.class = 2;
            rows.push(c2);
        }
        let gt = TrackingResult::new(rows);
        let pred = gt.filter_class(1);
        let r = report_for(&gt, &pred);
        let avg = r.average.unwrap();
        let overall = r.overall.unwrap();
        assert_abs_diff_eq!(avg.mota, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(overall.mota, 75.0, epsilon = 1e-12);
        assert!((avg.hota - overall.hota).abs() > 1.0);
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let gt = two_track_gt(4);
        let mut rng = stream(55, 0, StreamRole::Oracle);
        let pred = jittered(&mut rng, &gt);
        let a = serde_json::to_string(&report_for(&gt, &pred)).unwrap();
        let b = serde_json::to_string(&report_for(&gt, &pred)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ignore_rows_are_excluded_from_scoring() {
        let gt = two_track_gt(3);
        let mut with_ignored = gt.clone();
        let mut extra = tb(1, 9, 80.0, 80.0, 10.0, 10.0);
        extra.conf = 0.0;
        with_ignored.entries.push(extra);
        let with_ignored = TrackingResult::new(with_ignored.entries);
        let r_plain = report_for(&gt, &gt);
        let r_ignored = report_for(&with_ignored, &gt);
        assert_eq!(r_plain.overall, r_ignored.overall);
    }
}
