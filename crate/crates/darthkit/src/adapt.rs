//! The adaptation engine: source pretraining, the test-time adaptation step
//! (views, teacher pseudo-labels, matching, losses, student update, teacher
//! EMA), and the pseudo-label-only baseline.
//!
//! The adaptation loop never sees target labels; it takes a [`VideoSet`],
//! which carries no annotation fields, so the no-label contract is enforced
//! by the type system rather than by convention. The teacher is loaded onto
//! every tape as constants, so no gradient can reach it; it only moves
//! through the exponential moving average of the student after each step.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_sigmoid, Gradients, Graph, Tid};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, Detection, WarpRecord};
use crate::image_data::ImageArray;
use crate::losses::{
    dc_roi, dc_rpn, pcl_aux, pcl_embed, sample_aux_pairs, total_loss, LossBreakdown, LossParts,
    LossWeights,
};
use crate::matching::{
    assign_rois, build_match_table, filter_detections, sample_contrastive_rois,
    sample_student_rois, sample_without_replacement, AssignedRoi, MatchConfig,
};
use crate::model::{
    backbone_rpn, blend_weights, decode_box, decode_proposals, detect, detect_with_embeddings,
    encode_box, forward_graph, load_params, roi_heads, DetectConfig, ModelConfig, ModelWeights,
    ParamTids, STRIDE,
};
use crate::rng::{derive_seed, stream, StreamRole};
use crate::video::{LabeledVideoSet, VideoSet};
use crate::views::{make_views, map_detections, AugConfig};

/// Negative anchors sampled per positive in supervised RPN training.
const ANCHOR_NEG_PER_POS: usize = 3;
/// Floor on the sampled negative-anchor count when positives are scarce.
const ANCHOR_NEG_MIN: usize = 4;
/// Random background RoIs added per supervised training step.
const TRAIN_NEG_ROIS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Teacher EMA momentum: teacher ← tau·teacher + (1−tau)·student.
    pub tau: f64,
    /// Confidence floor for teacher detections used as pseudo-labels.
    pub gamma_conf: f64,
    pub lr: f64,
    /// SGD momentum; plain SGD by default.
    pub momentum: f64,
    /// Global gradient-norm ceiling applied before every update.
    pub grad_clip_norm: f64,
    pub epochs: usize,
    /// Steps between learning-rate decays; 0 disables the schedule.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Score slack of the consistency gate on RPN regression.
    pub dc_epsilon: f64,
    /// Negatives sampled per positive pair for the auxiliary cosine loss.
    pub aux_neg_per_pos: usize,
    /// Jittered copies of each pseudo-label added to the RoI candidate pool.
    pub jitter_per_det: usize,
    /// Loss term weights.
    pub weights: LossWeights,
    /// RoI assignment and sampling budgets.
    pub matching: MatchConfig,
    pub aug: AugConfig,
    /// Post-processing of the teacher's raw outputs into detections.
    pub detect: DetectConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            tau: 0.998,
            gamma_conf: 0.7,
            lr: 0.001,
            momentum: 0.0,
            grad_clip_norm: 35.0,
            epochs: 1,
            lr_decay_step: 0,
            lr_decay_factor: 0.1,
            dc_epsilon: 0.1,
            aux_neg_per_pos: 3,
            jitter_per_det: 3,
            weights: LossWeights::default(),
            matching: MatchConfig::default(),
            aug: AugConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma_conf) {
            return Err(Error::InvalidConfig(format!(
                "gamma_conf {} outside [0, 1]",
                self.gamma_conf
            )));
        }
        if self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr {} < 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "grad_clip_norm {} must be positive",
                self.grad_clip_norm
            )));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor {} outside (0, 1]",
                self.lr_decay_factor
            )));
        }
        if self.dc_epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!("dc_epsilon {} < 0", self.dc_epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Steps of linear learning-rate ramp from zero at the start of
    /// training; 0 disables it. Batch-one SGD at the full rate can throw the
    /// fresh random weights into an unrecoverable region on the first few
    /// frames, and the ramp lets early gradients settle first.
    pub lr_warmup_steps: usize,
    /// Jittered copies of each ground-truth box in the RoI training set.
    pub jitter_per_gt: usize,
    /// Random background RoIs per step.
    pub neg_rois: usize,
    /// Weight of the cross-view identity embedding loss.
    pub embed_weight: f64,
    pub aug: AugConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            grad_clip_norm: 35.0,
            lr_decay_step: 0,
            lr_decay_factor: 0.1,
            lr_warmup_steps: 0,
            jitter_per_gt: 3,
            neg_rois: TRAIN_NEG_ROIS,
            embed_weight: 1.0,
            aug: AugConfig::default(),
        }
    }
}

/// Student, teacher, and optimizer accumulators of one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub student: ModelWeights,
    pub teacher: ModelWeights,
    /// SGD momentum buffers, aligned with the student's parameter entries.
    pub optimizer_state: Vec<ArrayD<f64>>,
    pub step: usize,
    pub config: AdaptConfig,
}

impl AdaptState {
    /// Both networks start from the source weights; buffers start at zero.
    pub fn new(source: ModelWeights, config: AdaptConfig) -> Self {
        let optimizer_state =
            source.entries().iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        AdaptState { teacher: source.clone(), student: source, optimizer_state, step: 0, config }
    }
}

/// Per-step observables of one adaptation step.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_grad_norm: f64,
    pub lr: f64,
}

#[derive(Serialize)]
struct AdaptStepRecord<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Serialize)]
struct TrainStepRecord<'a> {
    step: usize,
    total: f64,
    grad_norm: f64,
    clipped_grad_norm: f64,
    lr: f64,
    parts: BTreeMap<&'a str, f64>,
}

fn log_line(log: &mut Option<&mut dyn Write>, record: &impl Serialize) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        serde_json::to_writer(&mut *w, record)?;
        writeln!(w)?;
    }
    Ok(())
}

fn decayed_lr(base: f64, step: usize, decay_step: usize, factor: f64) -> f64 {
    if decay_step == 0 {
        base
    } else {
        base * factor.powi((step / decay_step) as i32)
    }
}

fn warmed_lr(base: f64, step: usize, warmup: usize, decay_step: usize, factor: f64) -> f64 {
    let lr = decayed_lr(base, step, decay_step, factor);
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else {
        lr
    }
}

/// Clip the global gradient norm, then apply one SGD-with-momentum update.
/// Parameters with no gradient keep their value (their momentum buffer still
/// decays). Returns the pre- and post-clip global norms.
fn sgd_update(
    weights: &mut ModelWeights,
    opt: &mut [ArrayD<f64>],
    p: &ParamTids,
    grads: &mut Gradients,
    lr: f64,
    momentum: f64,
    clip: f64,
) -> (f64, f64) {
    let tids: Vec<Tid> = p.iter().map(|(_, t)| t).collect();
    let gvecs: Vec<Option<ArrayD<f64>>> = tids.iter().map(|&t| grads.take(t)).collect();
    let norm = gvecs
        .iter()
        .flatten()
        .map(|a| a.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for ((entry, buf), gv) in weights.entries_mut().iter_mut().zip(opt.iter_mut()).zip(gvecs) {
        if momentum == 0.0 {
            if let Some(gv) = gv {
                entry.1.scaled_add(-lr * scale, &gv);
            }
        } else {
            buf.mapv_inplace(|v| v * momentum);
            if let Some(gv) = gv {
                buf.scaled_add(scale, &gv);
            }
            entry.1.scaled_add(-lr, buf);
        }
    }
    (norm, norm * scale)
}

fn ensure_finite(g: &Graph, named: &[(&'static str, Option<Tid>)], step: usize) -> Result<()> {
    for (name, t) in named {
        if let Some(t) = t {
            if !g.scalar_value(*t).is_finite() {
                return Err(Error::NonFinite { component: (*name).to_string(), step });
            }
        }
    }
    Ok(())
}

/// Random shift and log-scale perturbation of a box, clipped to the view;
/// None when the result collapses.
fn jitter_box(
    b: &BoundingBox,
    shift_frac: f64,
    scale_frac: f64,
    w: f64,
    h: f64,
    rng: &mut impl Rng,
) -> Option<BoundingBox> {
    let (cx, cy) = b.center();
    let (bw, bh) = (b.width(), b.height());
    let cx = cx + rng.random_range(-shift_frac..=shift_frac) * bw;
    let cy = cy + rng.random_range(-shift_frac..=shift_frac) * bh;
    let bw = bw * rng.random_range(-scale_frac..=scale_frac).exp();
    let bh = bh * rng.random_range(-scale_frac..=scale_frac).exp();
    let out = BoundingBox {
        x1: cx - bw / 2.0,
        y1: cy - bh / 2.0,
        x2: cx + bw / 2.0,
        y2: cy + bh / 2.0,
    }
    .clip(w, h);
    (!out.is_degenerate()).then_some(out)
}

/// Candidate RoIs around pseudo-labels: each detection box plus jittered
/// copies, complementing the RPN's own proposals.
fn det_candidates(
    dets: &[Detection],
    jitter_per_det: usize,
    w: f64,
    h: f64,
    rng: &mut impl Rng,
) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    for d in dets {
        out.push(d.bbox);
        for _ in 0..jitter_per_det {
            if let Some(b) = jitter_box(&d.bbox, 0.1, 0.15, w, h, rng) {
                out.push(b);
            }
        }
    }
    out
}

/// Score-ordered top-k decoded RPN boxes, no NMS: the raw proposal set used
/// for head-output consistency.
fn top_scoring_rois(
    anchors: &[BoundingBox],
    rpn_cls: &Array1<f64>,
    rpn_reg: &Array2<f64>,
    img_w: usize,
    img_h: usize,
    k: usize,
) -> Vec<BoundingBox> {
    let mut scored: Vec<(usize, f64, BoundingBox)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, anchor)| {
            let delta = [rpn_reg[[i, 0]], rpn_reg[[i, 1]], rpn_reg[[i, 2]], rpn_reg[[i, 3]]];
            let b = decode_box(anchor, &delta).clip(img_w as f64, img_h as f64);
            if b.width() < 1.0 || b.height() < 1.0 {
                None
            } else {
                Some((i, rpn_cls[i], b))
            }
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.into_iter().map(|s| s.2).collect()
}

/// One test-time adaptation step on a single unlabeled frame:
/// 1. build teacher/student/contrastive views;
/// 2. teacher detects on the teacher view, filtered at `gamma_conf`;
/// 3. pseudo-labels are expressed in each view's coordinates;
/// 4. student runs on the student view (own RPN proposals plus pseudo-label
///    jitters as RoI candidates; teacher proposals for head consistency) and
///    on the contrastive view;
/// 5. the teacher's outputs enter the tape as constants only;
/// 6. RoIs are matched across views and all four losses are formed;
/// 7. the student takes one norm-clipped SGD step;
/// 8. the teacher is blended toward the student by EMA.
///
/// With zero surviving pseudo-labels the contrastive losses contribute
/// nothing while the consistency losses still fire.
pub fn adapt_step(
    state: &mut AdaptState,
    model_cfg: &ModelConfig,
    frame: &ImageArray,
    seed: u64,
) -> Result<StepReport> {
    let cfg = state.config.clone();
    let step = state.step;
    let views = make_views(frame, seed, &cfg.aug, STRIDE)?;
    let (sh, sw, _) = views.student.dim();
    let (chh, cw, _) = views.contrastive.dim();

    // Teacher pseudo-labels on the teacher view. The student view shares its
    // geometry, so the boxes transfer unchanged; the contrastive view needs
    // a warp.
    let (teacher_dets, _) = detect_with_embeddings(&state.teacher, model_cfg, &cfg.detect, &views.teacher)?;
    let student_dets = filter_detections(&teacher_dets, cfg.gamma_conf);
    let contrastive_dets =
        map_detections(&student_dets, &views.warp_teacher, &views.warp_contrastive);

    // Teacher consistency targets: RPN outputs and head outputs on its own
    // top proposals, all read out as plain values.
    let (t_scores, t_reg, dc_rois, t_roi_cls, t_roi_reg) = {
        let mut tg = Graph::new();
        let tp = load_params(&mut tg, &state.teacher, false);
        let (feat, fh, fw, rpn_cls, rpn_reg, anchors) =
            backbone_rpn(&mut tg, &tp, model_cfg, &views.teacher)?;
        let cls: Array1<f64> =
            tg.value(rpn_cls).clone().into_dimensionality().expect("1-d rpn cls");
        let reg: Array2<f64> =
            tg.value(rpn_reg).clone().into_dimensionality().expect("2-d rpn reg");
        let dc_rois =
            top_scoring_rois(&anchors, &cls, &reg, sw, sh, model_cfg.rpn_post_nms_top_n);
        let heads = (!dc_rois.is_empty())
            .then(|| roi_heads(&mut tg, &tp, model_cfg, feat, fh, fw, &dc_rois));
        let (t_roi_cls, t_roi_reg) = match heads {
            Some((rc, rr, _)) => (
                tg.value(rc).clone().into_dimensionality().expect("2-d roi cls"),
                tg.value(rr).clone().into_dimensionality().expect("2-d roi reg"),
            ),
            None => (Array2::zeros((0, model_cfg.num_classes)), Array2::zeros((0, 4))),
        };
        (cls.mapv(stable_sigmoid), reg, dc_rois, t_roi_cls, t_roi_reg)
    };

    // Student tape. Backbones for both views, RoI candidates, consistency
    // heads on the teacher's proposals.
    let mut g = Graph::new();
    let p = load_params(&mut g, &state.student, true);
    let (feat_s, fhs, fws, s_rpn_cls, s_rpn_reg, s_anchors) =
        backbone_rpn(&mut g, &p, model_cfg, &views.student)?;
    let s_cls_val: Array1<f64> =
        g.value(s_rpn_cls).clone().into_dimensionality().expect("1-d rpn cls");
    let s_reg_val: Array2<f64> =
        g.value(s_rpn_reg).clone().into_dimensionality().expect("2-d rpn reg");
    let mut s_cands = decode_proposals(model_cfg, &s_anchors, &s_cls_val, &s_reg_val, sw, sh);
    s_cands.extend(det_candidates(
        &student_dets,
        cfg.jitter_per_det,
        sw as f64,
        sh as f64,
        &mut stream(seed, 0, StreamRole::JitterStudent),
    ));
    let s_embeds = (!s_cands.is_empty())
        .then(|| roi_heads(&mut g, &p, model_cfg, feat_s, fhs, fws, &s_cands).2);
    let s_dc_heads = (!dc_rois.is_empty())
        .then(|| roi_heads(&mut g, &p, model_cfg, feat_s, fhs, fws, &dc_rois));

    let (feat_c, fhc, fwc, c_rpn_cls, c_rpn_reg, c_anchors) =
        backbone_rpn(&mut g, &p, model_cfg, &views.contrastive)?;
    let c_cls_val: Array1<f64> =
        g.value(c_rpn_cls).clone().into_dimensionality().expect("1-d rpn cls");
    let c_reg_val: Array2<f64> =
        g.value(c_rpn_reg).clone().into_dimensionality().expect("2-d rpn reg");
    let mut c_cands = decode_proposals(model_cfg, &c_anchors, &c_cls_val, &c_reg_val, cw, chh);
    c_cands.extend(det_candidates(
        &contrastive_dets,
        cfg.jitter_per_det,
        cw as f64,
        chh as f64,
        &mut stream(seed, 0, StreamRole::JitterContrastive),
    ));
    let c_embeds = (!c_cands.is_empty())
        .then(|| roi_heads(&mut g, &p, model_cfg, feat_c, fhc, fwc, &c_cands).2);

    // Cross-view matching and the contrastive losses.
    let mut parts = LossParts::default();
    if let (Some(s_embeds), Some(c_embeds), false, false) =
        (s_embeds, c_embeds, student_dets.is_empty(), contrastive_dets.is_empty())
    {
        let assigned_s = assign_rois(&s_cands, &student_dets, &cfg.matching);
        let assigned_c = assign_rois(&c_cands, &contrastive_dets, &cfg.matching);
        let idx_s = sample_student_rois(
            &assigned_s,
            &cfg.matching,
            &mut stream(seed, 0, StreamRole::RoiSampleStudent),
        );
        let idx_c = sample_contrastive_rois(
            &assigned_c,
            &cfg.matching,
            &mut stream(seed, 0, StreamRole::RoiSampleContrastive),
        );
        if !idx_s.is_empty() && !idx_c.is_empty() {
            let sel_c: Vec<AssignedRoi> = idx_c.iter().map(|&j| assigned_c[j].clone()).collect();
            // Contrastive anchors must have at least one positive; keep only
            // student RoIs whose pseudo-identity appears on the other side.
            let keep: Vec<usize> = idx_s
                .iter()
                .copied()
                .filter(|&i| {
                    let table = build_match_table(&[assigned_s[i].clone()], &sel_c);
                    table.iter().any(|&b| b)
                })
                .collect();
            if !keep.is_empty() {
                let sel_s: Vec<AssignedRoi> = keep.iter().map(|&i| assigned_s[i].clone()).collect();
                let table = build_match_table(&sel_s, &sel_c);
                let v = g.gather_rows(s_embeds, keep);
                let k = g.gather_rows(c_embeds, idx_c);
                parts.embed = Some(pcl_embed(&mut g, v, k, &table)?);
                let mut pairs = sample_aux_pairs(
                    &table,
                    cfg.aux_neg_per_pos,
                    &mut stream(seed, 0, StreamRole::PairSample),
                );
                // The cosine is undefined for zero embeddings (possible early
                // in training when a RoI sees only dead activations); drop
                // such pairs rather than abort.
                let vv: Array2<f64> = g.value(v).clone().into_dimensionality().expect("2-d");
                let kv: Array2<f64> = g.value(k).clone().into_dimensionality().expect("2-d");
                let live = |r: &ndarray::ArrayView1<f64>| r.dot(r) >= 1e-24;
                pairs.retain(|&(i, j, _)| live(&vv.row(i)) && live(&kv.row(j)));
                parts.aux = Some(pcl_aux(&mut g, v, k, &pairs)?);
            }
        }
    }

    // Consistency losses: teacher outputs are plain arrays, so they enter
    // the tape as constants and receive no gradient.
    let s_probs = g.sigmoid(s_rpn_cls);
    parts.dc_rpn = Some(dc_rpn(&mut g, &t_scores, &t_reg, s_probs, s_rpn_reg, cfg.dc_epsilon)?);
    if let Some((s_dc_cls, s_dc_reg, _)) = s_dc_heads {
        parts.dc_roi = Some(dc_roi(&mut g, &t_roi_cls, &t_roi_reg, s_dc_cls, s_dc_reg)?);
    }

    ensure_finite(
        &g,
        &[
            ("embed", parts.embed),
            ("aux", parts.aux),
            ("dc_rpn", parts.dc_rpn),
            ("dc_roi", parts.dc_roi),
        ],
        step,
    )?;
    let (total, breakdown) = total_loss(&mut g, parts, &cfg.weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { component: "total".to_string(), step });
    }

    let mut grads = g.backward(total);
    let lr = decayed_lr(cfg.lr, step, cfg.lr_decay_step, cfg.lr_decay_factor);
    let (grad_norm, clipped_grad_norm) = sgd_update(
        &mut state.student,
        &mut state.optimizer_state,
        &p,
        &mut grads,
        lr,
        cfg.momentum,
        cfg.grad_clip_norm,
    );

    state.teacher = blend_weights(&state.teacher, &state.student, cfg.tau)?;
    state.step += 1;
    state.student.step = state.step as u64;
    Ok(StepReport { breakdown, grad_norm, clipped_grad_norm, lr })
}

/// Adapt the source model to an unlabeled target video: an i.i.d. shuffle
/// over all frames per epoch, one [`adapt_step`] per frame, step-decayed
/// learning rate. Zero epochs returns the source weights unchanged. Each
/// step appends one JSON line to `log` when given.
pub fn adapt_run(
    source: &ModelWeights,
    video: &VideoSet,
    model_cfg: &ModelConfig,
    cfg: &AdaptConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<ModelWeights> {
    cfg.validate()?;
    if cfg.epochs == 0 || video.is_empty() {
        return Ok(source.clone());
    }
    let mut state = AdaptState::new(source.clone(), cfg.clone());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..video.len()).collect();
        order.shuffle(&mut stream(seed, epoch as u64, StreamRole::EpochShuffle));
        for &fi in &order {
            let step = state.step;
            let report = adapt_step(
                &mut state,
                model_cfg,
                &video.frames[fi],
                derive_seed(seed, step as u64),
            )?;
            log_line(&mut log, &AdaptStepRecord { step, report: &report })?;
        }
    }
    Ok(state.student)
}

/// Per-anchor supervised RPN targets: positive at IoU ≥ 0.5 (plus the best
/// anchor of every label), negative below 0.3, ignored between.
fn rpn_targets(
    anchors: &[BoundingBox],
    labels: &[Detection],
) -> (Vec<(usize, [f64; 4])>, Vec<usize>) {
    let mut best_for_anchor: Vec<(f64, usize)> = vec![(0.0, 0); anchors.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (li, l) in labels.iter().enumerate() {
            let v = iou(a, &l.bbox);
            if v > best_for_anchor[ai].0 {
                best_for_anchor[ai] = (v, li);
            }
        }
    }
    let mut pos: BTreeMap<usize, usize> = BTreeMap::new();
    for (ai, &(v, li)) in best_for_anchor.iter().enumerate() {
        if v >= 0.5 {
            pos.insert(ai, li);
        }
    }
    // Force-match the best anchor of each label so no label goes unclaimed.
    for (li, l) in labels.iter().enumerate() {
        let mut best = (0.0f64, None);
        for (ai, a) in anchors.iter().enumerate() {
            let v = iou(a, &l.bbox);
            if v > best.0 {
                best = (v, Some(ai));
            }
        }
        if let Some(ai) = best.1 {
            pos.insert(ai, li);
        }
    }
    let positives: Vec<(usize, [f64; 4])> = pos
        .iter()
        .map(|(&ai, &li)| (ai, encode_box(&anchors[ai], &labels[li].bbox)))
        .collect();
    let negatives: Vec<usize> = best_for_anchor
        .iter()
        .enumerate()
        .filter(|&(ai, &(v, _))| v < 0.3 && !pos.contains_key(&ai))
        .map(|(ai, _)| ai)
        .collect();
    (positives, negatives)
}

/// RoI training set: the label boxes, jittered copies, strongly displaced
/// hard negatives around each label, and random background boxes.
fn training_rois(
    labels: &[Detection],
    jitter_per_gt: usize,
    neg_rois: usize,
    w: f64,
    h: f64,
    rng: &mut impl Rng,
) -> Vec<BoundingBox> {
    let mut rois: Vec<BoundingBox> = labels.iter().map(|l| l.bbox).collect();
    for l in labels {
        for _ in 0..jitter_per_gt {
            if let Some(b) = jitter_box(&l.bbox, 0.2, 0.3, w, h, rng) {
                rois.push(b);
            }
        }
        // Off-center copies land below the positive IoU bar and teach the
        // classifier that near-miss boxes are background.
        for _ in 0..jitter_per_gt {
            if let Some(b) = jitter_box(&l.bbox, 0.55, 0.35, w, h, rng) {
                rois.push(b);
            }
        }
    }
    for _ in 0..neg_rois {
        let bw = rng.random_range(0.1..0.4) * w;
        let bh = rng.random_range(0.1..0.4) * h;
        let x1 = rng.random_range(0.0..(w - bw));
        let y1 = rng.random_range(0.0..(h - bh));
        let b = BoundingBox { x1, y1, x2: x1 + bw, y2: y1 + bh }.clip(w, h);
        if !b.is_degenerate() {
            rois.push(b);
        }
    }
    rois
}

/// Class index per RoI (background 0 below IoU 0.5) and regression targets
/// for the positive RoIs.
fn roi_targets(
    rois: &[BoundingBox],
    labels: &[Detection],
) -> (Vec<(usize, usize)>, Vec<(usize, [f64; 4])>) {
    let mut cls = Vec::with_capacity(rois.len());
    let mut reg = Vec::new();
    for (ri, r) in rois.iter().enumerate() {
        let mut best = (0.0f64, None);
        for (li, l) in labels.iter().enumerate() {
            let v = iou(r, &l.bbox);
            if v > best.0 {
                best = (v, Some(li));
            }
        }
        match best {
            (v, Some(li)) if v >= 0.5 => {
                cls.push((ri, labels[li].class as usize));
                reg.push((ri, encode_box(r, &labels[li].bbox)));
            }
            _ => cls.push((ri, 0)),
        }
    }
    (cls, reg)
}

/// Cross-view identity supervision for the embedding head during source
/// pretraining: the same object under two views forms a positive pair.
struct IdentitySupervision<'a> {
    other_view: &'a ImageArray,
    main: &'a [(u64, Detection)],
    other: &'a [(u64, Detection)],
    jitter_per_id: usize,
    weight: f64,
}

/// Softmax cross-entropy over RoI class logits, stabilized by subtracting a
/// detached per-row maximum (the loss value and gradient are shift-invariant).
fn softmax_ce(g: &mut Graph, logits: Tid, cls: &[(usize, usize)]) -> Tid {
    let vals: Array2<f64> = g.value(logits).clone().into_dimensionality().expect("2-d logits");
    let row_max: Array1<f64> =
        Array1::from_iter(vals.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b))));
    let rm = g.constant(row_max.into_dyn());
    let centered = g.sub_broadcast_col(logits, rm);
    let ex = g.exp(centered);
    let se = g.sum_axis1(ex);
    let lse = g.log(se);
    let zy = g.gather_elems(centered, cls.to_vec());
    let diff = g.sub(lse, zy);
    g.mean(diff)
}

struct TrainHyper {
    lr: f64,
    momentum: f64,
    clip: f64,
    jitter_per_gt: usize,
    neg_rois: usize,
}

/// One supervised detection step (RPN + RoI heads) on a single view, with
/// optional cross-view identity supervision of the embedding head. Mutates
/// `weights` and `opt` in place.
fn supervised_step(
    weights: &mut ModelWeights,
    opt: &mut [ArrayD<f64>],
    model_cfg: &ModelConfig,
    view: &ImageArray,
    labels: &[Detection],
    identity: Option<&IdentitySupervision>,
    hp: &TrainHyper,
    rng_anchor: &mut ChaCha8Rng,
    rng_roi: &mut ChaCha8Rng,
    step: usize,
) -> Result<(f64, f64, f64, Vec<(&'static str, f64)>)> {
    let (h, w, _) = view.dim();
    let mut g = Graph::new();
    let p = load_params(&mut g, weights, true);
    let rois = training_rois(labels, hp.jitter_per_gt, hp.neg_rois, w as f64, h as f64, rng_roi);
    let out = forward_graph(&mut g, &p, model_cfg, view, Some(&rois))?;
    let mut parts: Vec<(&'static str, Tid)> = Vec::new();

    let (pos, negs) = rpn_targets(&out.anchors, labels);
    let quota = (ANCHOR_NEG_PER_POS * pos.len()).max(ANCHOR_NEG_MIN);
    let neg_pick = sample_without_replacement(&negs, quota, rng_anchor);
    let mut sampled: Vec<usize> = pos.iter().map(|&(i, _)| i).collect();
    let mut y = vec![1.0; sampled.len()];
    sampled.extend(neg_pick.iter().copied());
    y.resize(sampled.len(), 0.0);
    if !sampled.is_empty() {
        let gathered = g.gather_1d(out.rpn_cls, sampled);
        let probs = g.sigmoid(gathered);
        let yv = g.constant(Array1::from_vec(y).into_dyn());
        let d = g.sub(probs, yv);
        let d2 = g.mul(d, d);
        parts.push(("rpn_cls", g.mean(d2)));
    }
    if !pos.is_empty() {
        let idx: Vec<usize> = pos.iter().map(|&(i, _)| i).collect();
        let tgt = Array2::from_shape_fn((pos.len(), 4), |(i, j)| pos[i].1[j]);
        let pr = g.gather_rows(out.rpn_reg, idx);
        let tv = g.constant(tgt.into_dyn());
        let d = g.sub(pr, tv);
        let d2 = g.mul(d, d);
        let rs = g.sum_axis1(d2);
        parts.push(("rpn_reg", g.mean(rs)));
    }

    let (cls, reg) = roi_targets(&rois, labels);
    parts.push(("roi_cls", softmax_ce(&mut g, out.roi_cls, &cls)));
    if !reg.is_empty() {
        let idx: Vec<usize> = reg.iter().map(|&(i, _)| i).collect();
        let tgt = Array2::from_shape_fn((reg.len(), 4), |(i, j)| reg[i].1[j]);
        let rr = g.gather_rows(out.roi_reg, idx);
        let tv = g.constant(tgt.into_dyn());
        let d = g.sub(rr, tv);
        let d2 = g.mul(d, d);
        let rs = g.sum_axis1(d2);
        parts.push(("roi_reg", g.mean(rs)));
    }

    if let Some(id) = identity {
        let other_ids: std::collections::BTreeSet<u64> =
            id.other.iter().map(|&(i, _)| i).collect();
        let usable: Vec<&(u64, Detection)> =
            id.main.iter().filter(|(i, _)| other_ids.contains(i)).collect();
        if !usable.is_empty() {
            let (oh, ow, _) = id.other_view.dim();
            let mut v_rois = Vec::new();
            let mut v_ids = Vec::new();
            for (oid, det) in &usable {
                v_rois.push(det.bbox);
                v_ids.push(*oid);
                for _ in 0..id.jitter_per_id {
                    if let Some(b) = jitter_box(&det.bbox, 0.1, 0.15, w as f64, h as f64, rng_roi) {
                        v_rois.push(b);
                        v_ids.push(*oid);
                    }
                }
            }
            let mut k_rois = Vec::new();
            let mut k_ids = Vec::new();
            for (oid, det) in id.other {
                k_rois.push(det.bbox);
                k_ids.push(*oid);
                for _ in 0..id.jitter_per_id {
                    if let Some(b) = jitter_box(&det.bbox, 0.1, 0.15, ow as f64, oh as f64, rng_roi)
                    {
                        k_rois.push(b);
                        k_ids.push(*oid);
                    }
                }
            }
            let table = Array2::from_shape_fn((v_ids.len(), k_ids.len()), |(i, j)| {
                v_ids[i] == k_ids[j]
            });
            let (feat2, fh2, fw2, _, _, _) = backbone_rpn(&mut g, &p, model_cfg, id.other_view)?;
            let (_, _, k_embed) = roi_heads(&mut g, &p, model_cfg, feat2, fh2, fw2, &k_rois);
            let (fh1, fw1) = (h / STRIDE, w / STRIDE);
            let (_, _, v_embed) = roi_heads(&mut g, &p, model_cfg, out.feat, fh1, fw1, &v_rois);
            let embed = pcl_embed(&mut g, v_embed, k_embed, &table)?;
            parts.push(("embed", g.mul_scalar(embed, id.weight)));
        }
    }

    let named: Vec<(&'static str, Option<Tid>)> =
        parts.iter().map(|&(n, t)| (n, Some(t))).collect();
    ensure_finite(&g, &named, step)?;
    let mut total = parts[0].1;
    for &(_, t) in &parts[1..] {
        total = g.add(total, t);
    }
    if !g.scalar_value(total).is_finite() {
        return Err(Error::NonFinite { component: "total".to_string(), step });
    }
    let values: Vec<(&'static str, f64)> =
        parts.iter().map(|&(n, t)| (n, g.scalar_value(t))).collect();
    let total_value = g.scalar_value(total);
    let mut grads = g.backward(total);
    let (norm, clipped) =
        sgd_update(weights, opt, &p, &mut grads, hp.lr, hp.momentum, hp.clip);
    Ok((total_value, norm, clipped, values))
}

/// Map labeled boxes into a view's coordinates, keeping identities; boxes
/// degenerate after the warp are dropped.
fn map_labeled(
    rows: &[(u64, Detection)],
    from: &WarpRecord,
    to: &WarpRecord,
) -> Vec<(u64, Detection)> {
    rows.iter()
        .filter_map(|(id, det)| {
            let mapped = map_detections(std::slice::from_ref(det), from, to);
            mapped.into_iter().next().map(|d| (*id, d))
        })
        .collect()
}

/// Supervised source pretraining: detection losses on one augmented view and
/// cross-view identity supervision for the embedding head. Zero epochs
/// returns the seeded initialization unchanged.
pub fn pretrain_source(
    dataset: &LabeledVideoSet,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<ModelWeights> {
    let max_class = dataset.gt.entries.iter().map(|e| e.class).max().unwrap_or(0);
    if max_class as usize >= model_cfg.num_classes {
        return Err(Error::InvalidConfig(format!(
            "ground-truth class {max_class} outside model's {} classes",
            model_cfg.num_classes
        )));
    }
    let mut weights = ModelWeights::init(model_cfg, seed);
    if cfg.epochs == 0 {
        return Ok(weights);
    }
    let mut opt: Vec<ArrayD<f64>> =
        weights.entries().iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
    let n = dataset.video.len();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, epoch as u64, StreamRole::EpochShuffle));
        for (pos_in_epoch, &fi) in order.iter().enumerate() {
            let rows: Vec<(u64, Detection)> = dataset
                .gt
                .entries
                .iter()
                .filter(|e| e.frame == fi + 1 && e.conf != 0.0)
                .map(|e| (e.id, Detection { bbox: e.bbox, score: 1.0, class: e.class }))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let frame = &dataset.video.frames[fi];
            let (fh, fw, _) = frame.dim();
            let tick = (epoch * n + pos_in_epoch) as u64;
            let vseed = stream(seed, tick, StreamRole::PretrainView).random();
            let views = make_views(frame, vseed, &cfg.aug, STRIDE)?;
            let ident = WarpRecord::identity(fw, fh);
            let labeled_s = map_labeled(&rows, &ident, &views.warp_teacher);
            let labeled_c = map_labeled(&rows, &ident, &views.warp_contrastive);
            if labeled_s.is_empty() {
                continue;
            }
            let labels: Vec<Detection> = labeled_s.iter().map(|&(_, d)| d).collect();
            let idsup = IdentitySupervision {
                other_view: &views.contrastive,
                main: &labeled_s,
                other: &labeled_c,
                jitter_per_id: 2,
                weight: cfg.embed_weight,
            };
            let hp = TrainHyper {
                lr: warmed_lr(
                    cfg.lr,
                    step,
                    cfg.lr_warmup_steps,
                    cfg.lr_decay_step,
                    cfg.lr_decay_factor,
                ),
                momentum: cfg.momentum,
                clip: cfg.grad_clip_norm,
                jitter_per_gt: cfg.jitter_per_gt,
                neg_rois: cfg.neg_rois,
            };
            let (total, grad_norm, clipped, part_values) = supervised_step(
                &mut weights,
                &mut opt,
                model_cfg,
                &views.student,
                &labels,
                (cfg.embed_weight > 0.0).then_some(&idsup),
                &hp,
                &mut stream(vseed, 0, StreamRole::PretrainAnchorSample),
                &mut stream(vseed, 0, StreamRole::PretrainRoiSample),
                step,
            )?;
            log_line(
                &mut log,
                &TrainStepRecord {
                    step,
                    total,
                    grad_norm,
                    clipped_grad_norm: clipped,
                    lr: hp.lr,
                    parts: part_values.into_iter().collect(),
                },
            )?;
            step += 1;
            weights.step = step as u64;
        }
    }
    Ok(weights)
}

/// Pseudo-label baseline: a frozen copy of the source model labels each
/// frame at `conf_thr`; the student trains on those labels with the
/// supervised detection objective only, so the embedding head receives no
/// gradient. Frames with zero pseudo-labels are skipped.
pub fn sfod_baseline(
    source: &ModelWeights,
    video: &VideoSet,
    model_cfg: &ModelConfig,
    conf_thr: f64,
    cfg: &AdaptConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<ModelWeights> {
    if !(0.0..=1.0).contains(&conf_thr) {
        return Err(Error::InvalidConfig(format!("conf_thr {conf_thr} outside [0, 1]")));
    }
    cfg.validate()?;
    let mut det_cfg = cfg.detect;
    det_cfg.score_thr = conf_thr;
    let mut student = source.clone();
    let mut opt: Vec<ArrayD<f64>> =
        student.entries().iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
    let n = video.len();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, epoch as u64, StreamRole::EpochShuffle));
        for (pos_in_epoch, &fi) in order.iter().enumerate() {
            let tick = (epoch * n + pos_in_epoch) as u64;
            let vseed = derive_seed(seed, tick);
            let views = make_views(&video.frames[fi], vseed, &cfg.aug, STRIDE)?;
            // Labels come from the frozen source on the clean geometric view;
            // the student trains on the photometrically augmented twin, which
            // shares those coordinates.
            let pseudo = detect(source, model_cfg, &det_cfg, &views.teacher)?;
            if pseudo.is_empty() {
                continue;
            }
            let hp = TrainHyper {
                lr: decayed_lr(cfg.lr, step, cfg.lr_decay_step, cfg.lr_decay_factor),
                momentum: cfg.momentum,
                clip: cfg.grad_clip_norm,
                jitter_per_gt: cfg.jitter_per_det,
                neg_rois: TRAIN_NEG_ROIS,
            };
            let (total, grad_norm, clipped, part_values) = supervised_step(
                &mut student,
                &mut opt,
                model_cfg,
                &views.student,
                &pseudo,
                None,
                &hp,
                &mut stream(vseed, 0, StreamRole::PretrainAnchorSample),
                &mut stream(vseed, 0, StreamRole::PretrainRoiSample),
                step,
            )?;
            log_line(
                &mut log,
                &TrainStepRecord {
                    step,
                    total,
                    grad_norm,
                    clipped_grad_norm: clipped,
                    lr: hp.lr,
                    parts: part_values.into_iter().collect(),
                },
            )?;
            step += 1;
            student.step = step as u64;
        }
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate, DomainStyle, SceneSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            embed_dim: 8,
            enc_channels: [4, 6, 8],
            hidden_dim: 12,
            anchor_scale: 16.0,
            anchor_ratios: vec![1.0],
            rpn_pre_nms_top_n: 24,
            rpn_post_nms_top_n: 6,
            rpn_nms_iou: 0.7,
            roi_pool_size: 3,
        }
    }

    fn tiny_target(seed: u64) -> VideoSet {
        let spec = SceneSpec::sample(2, 3, 64, 48, seed);
        generate(&spec, &DomainStyle::target()).unwrap().0
    }

    fn tiny_source(seed: u64) -> LabeledVideoSet {
        let spec = SceneSpec::sample(2, 3, 64, 48, seed);
        let (video, gt) = generate(&spec, &DomainStyle::source()).unwrap();
        LabeledVideoSet { video, gt }
    }

    #[test]
    fn ema_drift_follows_the_geometric_law() {
        let mcfg = tiny_model();
        let cfg = AdaptConfig { tau: 0.9, lr: 0.0, epochs: 1, ..AdaptConfig::default() };
        let mut state = AdaptState::new(ModelWeights::init(&mcfg, 1), cfg);
        state.teacher = ModelWeights::init(&mcfg, 2);
        let d0: Vec<f64> = state
            .teacher
            .entries()
            .iter()
            .zip(state.student.entries())
            .map(|((_, a), (_, b))| (a - b).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let video = tiny_target(5);
        for n in 1..=3usize {
            adapt_step(&mut state, &mcfg, &video.frames[0], derive_seed(9, n as u64)).unwrap();
            for (i, ((_, a), (_, b))) in
                state.teacher.entries().iter().zip(state.student.entries()).enumerate()
            {
                let dn = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
                let want = 0.9f64.powi(n as i32) * d0[i];
                assert!(
                    (dn - want).abs() <= 1e-9 * want.max(1e-12),
                    "entry {i} step {n}: {dn} vs {want}"
                );
            }
        }
    }

    #[test]
    fn tau_one_leaves_teacher_bytes_unchanged() {
        let mcfg = tiny_model();
        let cfg = AdaptConfig { tau: 1.0, lr: 0.01, ..AdaptConfig::default() };
        let mut state = AdaptState::new(ModelWeights::init(&mcfg, 3), cfg);
        let before = state.teacher.clone();
        let video = tiny_target(6);
        adapt_step(&mut state, &mcfg, &video.frames[0], 77).unwrap();
        assert_eq!(state.teacher.entries(), before.entries());
    }

    #[test]
    fn full_filtering_keeps_only_consistency_losses() {
        let mcfg = tiny_model();
        let cfg = AdaptConfig { gamma_conf: 1.0, ..AdaptConfig::default() };
        let mut state = AdaptState::new(ModelWeights::init(&mcfg, 4), cfg);
        let video = tiny_target(7);
        let report = adapt_step(&mut state, &mcfg, &video.frames[0], 12).unwrap();
        assert_eq!(report.breakdown.embed, 0.0);
        assert_eq!(report.breakdown.aux, 0.0);
        assert!(report.breakdown.dc_rpn >= 0.0);
        assert!(report.breakdown.dc_roi >= 0.0);
        assert!(report.breakdown.total.is_finite());
    }

    #[test]
    fn gradient_clipping_bounds_the_applied_norm() {
        let mcfg = tiny_model();
        let video = tiny_target(8);

        let cfg = AdaptConfig { grad_clip_norm: 0.05, ..AdaptConfig::default() };
        let mut state = AdaptState::new(ModelWeights::init(&mcfg, 5), cfg);
        let r = adapt_step(&mut state, &mcfg, &video.frames[0], 21).unwrap();
        assert!(r.clipped_grad_norm <= 0.05 + 1e-6, "clipped norm {}", r.clipped_grad_norm);

        let cfg = AdaptConfig { grad_clip_norm: 1e12, ..AdaptConfig::default() };
        let mut state = AdaptState::new(ModelWeights::init(&mcfg, 5), cfg);
        let r = adapt_step(&mut state, &mcfg, &video.frames[0], 21).unwrap();
        assert_eq!(r.clipped_grad_norm, r.grad_norm, "no clipping below the ceiling");
    }

    #[test]
    fn zero_epochs_returns_source_unchanged() {
        let mcfg = tiny_model();
        let source = ModelWeights::init(&mcfg, 6);
        let cfg = AdaptConfig { epochs: 0, ..AdaptConfig::default() };
        let out = adapt_run(&source, &tiny_target(9), &mcfg, &cfg, 1, None).unwrap();
        assert_eq!(out, source);
    }

    #[test]
    fn adapt_run_is_deterministic_including_its_log() {
        let mcfg = tiny_model();
        let source = ModelWeights::init(&mcfg, 7);
        let video = tiny_target(10);
        let cfg = AdaptConfig { epochs: 1, ..AdaptConfig::default() };
        let run = || {
            let mut log = Vec::new();
            let w = adapt_run(&source, &video, &mcfg, &cfg, 42, Some(&mut log)).unwrap();
            (w, log)
        };
        let (wa, la) = run();
        let (wb, lb) = run();
        assert_eq!(wa, wb);
        assert_eq!(la, lb);
        assert!(!la.is_empty());
    }

    #[test]
    fn pretrain_zero_epochs_is_the_seeded_init() {
        let mcfg = tiny_model();
        let data = tiny_source(11);
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let w = pretrain_source(&data, &mcfg, &cfg, 13, None).unwrap();
        assert_eq!(w, ModelWeights::init(&mcfg, 13));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let mcfg = tiny_model();
        let data = tiny_source(12);
        let cfg = PretrainConfig { epochs: 1, ..PretrainConfig::default() };
        let a = pretrain_source(&data, &mcfg, &cfg, 14, None).unwrap();
        let b = pretrain_source(&data, &mcfg, &cfg, 14, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelWeights::init(&mcfg, 14), "training must move the weights");
    }

    #[test]
    fn sfod_with_threshold_one_changes_nothing() {
        let mcfg = tiny_model();
        let source = ModelWeights::init(&mcfg, 15);
        let cfg = AdaptConfig::default();
        let out = sfod_baseline(&source, &tiny_target(13), &mcfg, 1.0, &cfg, 3, None).unwrap();
        assert_eq!(out, source);
    }

    #[test]
    fn sfod_trains_detection_but_never_the_embedding_head() {
        let mcfg = tiny_model();
        let source = ModelWeights::init(&mcfg, 16);
        let cfg = AdaptConfig { epochs: 1, ..AdaptConfig::default() };
        // Threshold 0 guarantees pseudo-labels from any model state.
        let out = sfod_baseline(&source, &tiny_target(14), &mcfg, 0.0, &cfg, 4, None).unwrap();
        assert_ne!(out, source, "training signal expected at threshold 0");
        let mut detection_changed = false;
        for ((name, a), (_, b)) in out.entries().iter().zip(source.entries()) {
            if name.starts_with("embed.") {
                assert_eq!(a, b, "{name} must stay untouched");
            } else if a != b {
                detection_changed = true;
            }
        }
        assert!(detection_changed);
    }
}
