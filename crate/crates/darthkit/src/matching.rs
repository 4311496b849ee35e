//! Pseudo-label assignment and RoI sampling for contrastive adaptation.
//!
//! The teacher's confidence-filtered detections act as pseudo ground truth.
//! Every candidate RoI is assigned by IoU: at or above `pos_iou` it is a
//! positive for its best-overlapping detection, below `neg_iou` a negative,
//! in between ignored. Two RoIs from different views form a positive pair
//! exactly when both are positive for the same detection index.
//!
//! Negative sampling is IoU-balanced: the negative range `[0, neg_iou)` is
//! split into equal-width bins and each non-empty bin gets an equal share of
//! the negative quota, so easy all-background negatives do not crowd out
//! near-miss ones.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoundingBox, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// IoU at or above which a RoI is positive for its best detection.
    pub pos_iou: f64,
    /// IoU below which a RoI is negative; `[neg_iou, pos_iou)` is ignored.
    pub neg_iou: f64,
    /// RoI budget on the student view (positives only).
    pub samples_student: usize,
    /// RoI budget on the contrastive view (positives plus negatives).
    pub samples_contrastive: usize,
    /// Fraction of the contrastive budget reserved for positives; the rest
    /// is filled with negatives.
    pub contrastive_pos_fraction: f64,
    /// Number of equal-width IoU bins for balanced negative sampling.
    pub neg_bin_count: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            pos_iou: 0.7,
            neg_iou: 0.3,
            samples_student: 32,
            samples_contrastive: 64,
            contrastive_pos_fraction: 0.5,
            neg_bin_count: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
    Ignore,
}

/// One RoI with its assignment against the pseudo detections.
#[derive(Debug, Clone)]
pub struct AssignedRoi {
    pub bbox: BoundingBox,
    /// Best-overlapping detection (lowest index on ties); `None` when the
    /// RoI overlaps nothing.
    pub assigned_det: Option<usize>,
    pub max_iou: f64,
    pub polarity: Polarity,
}

/// Keep detections with confidence at or above `gamma`.
pub fn filter_detections(dets: &[Detection], gamma: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= gamma).cloned().collect()
}

/// Assign every RoI by IoU against the detections.
pub fn assign_rois(rois: &[BoundingBox], dets: &[Detection], cfg: &MatchConfig) -> Vec<AssignedRoi> {
    rois.iter()
        .map(|r| {
            let mut best = 0.0f64;
            let mut best_idx = None;
            for (d, det) in dets.iter().enumerate() {
                let v = iou(r, &det.bbox);
                if v > best {
                    best = v;
                    best_idx = Some(d);
                }
            }
            let polarity = if best >= cfg.pos_iou {
                Polarity::Positive
            } else if best < cfg.neg_iou {
                Polarity::Negative
            } else {
                Polarity::Ignore
            };
            AssignedRoi {
                bbox: *r,
                assigned_det: best_idx,
                max_iou: best,
                polarity,
            }
        })
        .collect()
}

/// Positive-pair labels between two assigned RoI sets:
/// `labels[i, j]` holds exactly when both sides are positive for the same
/// detection index.
pub fn build_match_table(student: &[AssignedRoi], contrastive: &[AssignedRoi]) -> Array2<bool> {
    Array2::from_shape_fn((student.len(), contrastive.len()), |(i, j)| {
        student[i].polarity == Polarity::Positive
            && contrastive[j].polarity == Polarity::Positive
            && student[i].assigned_det == contrastive[j].assigned_det
            && student[i].assigned_det.is_some()
    })
}

/// Uniform sample of `k` items from `pool` without replacement (partial
/// Fisher-Yates). Returns ascending indices into the original ordering.
pub(crate) fn sample_without_replacement(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() <= k {
        let mut all = pool.to_vec();
        all.sort_unstable();
        return all;
    }
    let mut items = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    let mut picked = items[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Student-side sample: positives only, uniformly capped at the budget.
/// Empty when there is no positive RoI.
pub fn sample_student_rois(
    assigned: &[AssignedRoi],
    cfg: &MatchConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let positives: Vec<usize> = assigned
        .iter()
        .enumerate()
        .filter(|(_, a)| a.polarity == Polarity::Positive)
        .map(|(i, _)| i)
        .collect();
    sample_without_replacement(&positives, cfg.samples_student, rng)
}

/// Contrastive-side sample: positives up to the reserved fraction, remainder
/// filled with IoU-balanced negatives.
pub fn sample_contrastive_rois(
    assigned: &[AssignedRoi],
    cfg: &MatchConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let positives: Vec<usize> = assigned
        .iter()
        .enumerate()
        .filter(|(_, a)| a.polarity == Polarity::Positive)
        .map(|(i, _)| i)
        .collect();
    let pos_quota = ((cfg.samples_contrastive as f64) * cfg.contrastive_pos_fraction).round() as usize;
    let mut picked = sample_without_replacement(&positives, pos_quota, rng);
    let neg_quota = cfg.samples_contrastive - picked.len();
    picked.extend(sample_balanced_negatives(assigned, neg_quota, cfg, rng));
    picked.sort_unstable();
    picked
}

/// IoU-balanced negative sample: equal share per non-empty bin, leftover
/// quota refilled uniformly from the remaining negatives.
fn sample_balanced_negatives(
    assigned: &[AssignedRoi],
    quota: usize,
    cfg: &MatchConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let bin_width = cfg.neg_iou / cfg.neg_bin_count as f64;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); cfg.neg_bin_count];
    for (i, a) in assigned.iter().enumerate() {
        if a.polarity == Polarity::Negative {
            let b = ((a.max_iou / bin_width) as usize).min(cfg.neg_bin_count - 1);
            bins[b].push(i);
        }
    }
    let nonempty = bins.iter().filter(|b| !b.is_empty()).count();
    if nonempty == 0 || quota == 0 {
        return Vec::new();
    }
    let share = quota / nonempty;
    let mut extra = quota % nonempty;
    let mut picked = Vec::new();
    let mut picked_mask: Vec<bool> = vec![false; assigned.len()];
    for bin in &bins {
        if bin.is_empty() {
            continue;
        }
        let want = share + if extra > 0 { extra -= 1; 1 } else { 0 };
        for idx in sample_without_replacement(bin, want, rng) {
            picked.push(idx);
            picked_mask[idx] = true;
        }
    }
    // Refill any deficit from negatives not yet taken, uniformly.
    if picked.len() < quota {
        let rest: Vec<usize> = assigned
            .iter()
            .enumerate()
            .filter(|(i, a)| a.polarity == Polarity::Negative && !picked_mask[*i])
            .map(|(i, _)| i)
            .collect();
        picked.extend(sample_without_replacement(&rest, quota - picked.len(), rng));
    }
    picked.sort_unstable();
    picked
}
