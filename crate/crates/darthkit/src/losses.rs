//! Adaptation objectives: cross-view contrastive embedding losses and
//! teacher-student detection-consistency penalties, plus their weighted total.
//!
//! Two families:
//! - Contrastive losses ([`pcl_embed`], [`pcl_aux`]) pull matched instance
//!   embeddings from two student views together and push unmatched ones apart.
//!   Both sides are student outputs, so gradients flow into both arguments.
//! - Consistency losses ([`dc_rpn`], [`dc_roi`]) penalize disagreement between
//!   teacher and student detector heads on photometrically different views of
//!   the same geometry. The teacher side enters the graph as constants and
//!   receives no gradient by construction.
//!
//! Empty inputs (no anchors, no sampled pairs, no RoIs) cost exactly zero so a
//! frame without usable detections still trains through the consistency terms.

use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tid};
use crate::error::{Error, Result};
use crate::matching::sample_without_replacement;

/// One sampled embedding pair: (anchor row in `v`, target row in `k`, label).
pub type AuxPair = (usize, usize, bool);

/// Weights for the four loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Contrastive embedding term weight.
    pub embed: f64,
    /// Cosine auxiliary term weight.
    pub aux: f64,
    /// RPN consistency term weight.
    pub dc_rpn: f64,
    /// RoI head consistency term weight.
    pub dc_roi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            embed: 0.25,
            aux: 1.0,
            dc_rpn: 1.0,
            dc_roi: 1.0,
        }
    }
}

/// Per-step component values. `total` is the weighted sum of the components
/// in the fixed order embed, aux, dc_rpn, dc_roi; components absent from the
/// step contribute exactly zero and are reported as zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub embed: f64,
    pub aux: f64,
    pub dc_rpn: f64,
    pub dc_roi: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Graph nodes for the loss components present at one step. `None` means the
/// component had no inputs this step (e.g. no detections survived filtering).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub embed: Option<Tid>,
    pub aux: Option<Tid>,
    pub dc_rpn: Option<Tid>,
    pub dc_roi: Option<Tid>,
}

fn dims2(g: &Graph, t: Tid, context: &str) -> Result<(usize, usize)> {
    let s = g.value(t).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape(context, "2-d array", format!("{s:?}")));
    }
    Ok((s[0], s[1]))
}

fn dims1(g: &Graph, t: Tid, context: &str) -> Result<usize> {
    let s = g.value(t).shape().to_vec();
    if s.len() != 1 {
        return Err(Error::shape(context, "1-d array", format!("{s:?}")));
    }
    Ok(s[0])
}

/// Contrastive embedding loss over all positive/negative target pairs.
///
/// `v` is `[V,E]` anchor embeddings, `k` is `[K,E]` target embeddings from the
/// other view, `pair_labels[i][j]` marks targets matched to anchor `i`. Per
/// anchor the loss is `log(1 + sum_{pos,neg} exp(v.k_neg - v.k_pos))` on raw
/// dot products, stabilized so dots of several hundred stay finite; the result
/// is the mean over anchors. Zero anchors cost zero. An anchor row with no
/// positive column is a contract violation: callers drop such anchors before
/// calling.
pub fn pcl_embed(g: &mut Graph, v: Tid, k: Tid, pair_labels: &Array2<bool>) -> Result<Tid> {
    let (nv, ev) = dims2(g, v, "pcl_embed anchors")?;
    let (nk, ek) = dims2(g, k, "pcl_embed targets")?;
    if ev != ek {
        return Err(Error::shape("pcl_embed", format!("embed dim {ev}"), format!("{ek}")));
    }
    if pair_labels.dim() != (nv, nk) {
        return Err(Error::shape(
            "pcl_embed pair_labels",
            format!("[{nv}, {nk}]"),
            format!("{:?}", pair_labels.dim()),
        ));
    }
    if nv == 0 {
        return Ok(g.scalar_const(0.0));
    }
    for i in 0..nv {
        if !(0..nk).any(|j| pair_labels[[i, j]]) {
            return Err(Error::Contract(format!(
                "pcl_embed anchor {i} has no positive target; drop unmatched anchors first"
            )));
        }
    }

    let kt = g.transpose(k);
    let dots = g.matmul(v, kt);
    let mut per_anchor = Vec::with_capacity(nv);
    for i in 0..nv {
        let pos: Vec<(usize, usize)> =
            (0..nk).filter(|&j| pair_labels[[i, j]]).map(|j| (i, j)).collect();
        let neg: Vec<(usize, usize)> =
            (0..nk).filter(|&j| !pair_labels[[i, j]]).map(|j| (i, j)).collect();
        if neg.is_empty() {
            per_anchor.push(g.scalar_const(0.0));
            continue;
        }
        let dp = g.gather_elems(dots, pos);
        let dn = g.gather_elems(dots, neg);
        let diff = g.sub_outer(dn, dp);
        per_anchor.push(g.logsumexp_zero(diff));
    }
    let stacked = g.stack_scalars(per_anchor);
    Ok(g.mean(stacked))
}

/// [`pcl_embed`] evaluated on plain arrays through a throwaway graph.
pub fn pcl_embed_value(v: &Array2<f64>, k: &Array2<f64>, pair_labels: &Array2<bool>) -> Result<f64> {
    let mut g = Graph::new();
    let vt = g.leaf(v.clone().into_dyn());
    let kt = g.leaf(k.clone().into_dyn());
    let loss = pcl_embed(&mut g, vt, kt, pair_labels)?;
    Ok(g.scalar_value(loss))
}

/// `log(1 + sum_i exp(x_i))`, max-shifted. Local to keep the reference form
/// below independent of the graph ops it is used to cross-check.
fn lse_zero(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().cloned().fold(0.0f64, f64::max);
    let s: f64 = (-m).exp() + xs.iter().map(|&x| (x - m).exp()).sum::<f64>();
    m + s.ln()
}

/// Reference softmax form of the embedding loss: per anchor, the summed
/// negative log softmax of each positive against all negatives, averaged over
/// anchors. Used as a test oracle, not in the training path. Agrees with
/// [`pcl_embed`] whenever each anchor has exactly one positive.
pub fn pcl_embed_multi(v: &Array2<f64>, k: &Array2<f64>, pair_labels: &Array2<bool>) -> Result<f64> {
    let (nv, e) = v.dim();
    let (nk, ek) = k.dim();
    if e != ek {
        return Err(Error::shape("pcl_embed_multi", format!("embed dim {e}"), format!("{ek}")));
    }
    if pair_labels.dim() != (nv, nk) {
        return Err(Error::shape(
            "pcl_embed_multi pair_labels",
            format!("[{nv}, {nk}]"),
            format!("{:?}", pair_labels.dim()),
        ));
    }
    if nv == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..nv {
        let dot = |j: usize| (0..e).map(|d| v[[i, d]] * k[[j, d]]).sum::<f64>();
        let pos: Vec<usize> = (0..nk).filter(|&j| pair_labels[[i, j]]).collect();
        let neg: Vec<usize> = (0..nk).filter(|&j| !pair_labels[[i, j]]).collect();
        if pos.is_empty() {
            return Err(Error::Contract(format!(
                "pcl_embed_multi anchor {i} has no positive target"
            )));
        }
        for &p in &pos {
            let dp = dot(p);
            total += lse_zero(neg.iter().map(|&n| dot(n) - dp));
        }
    }
    Ok(total / nv as f64)
}

/// Sample the explicit pair list for [`pcl_aux`]: every positive pair, plus
/// `neg_per_pos` times as many negative pairs drawn uniformly without
/// replacement (capped at availability). Positives come out in row-major
/// order, then negatives in row-major order of the sampled cells.
pub fn sample_aux_pairs(
    pair_labels: &Array2<bool>,
    neg_per_pos: usize,
    rng: &mut impl rand::Rng,
) -> Vec<AuxPair> {
    let (nv, nk) = pair_labels.dim();
    let mut pos_cells = Vec::new();
    let mut neg_cells = Vec::new();
    for i in 0..nv {
        for j in 0..nk {
            if pair_labels[[i, j]] {
                pos_cells.push((i, j));
            } else {
                neg_cells.push((i, j));
            }
        }
    }
    let want_neg = pos_cells.len().saturating_mul(neg_per_pos).min(neg_cells.len());
    let idx: Vec<usize> = (0..neg_cells.len()).collect();
    let picked = sample_without_replacement(&idx, want_neg, rng);
    let mut pairs: Vec<AuxPair> = pos_cells.into_iter().map(|(i, j)| (i, j, true)).collect();
    pairs.extend(picked.into_iter().map(|c| (neg_cells[c].0, neg_cells[c].1, false)));
    pairs
}

/// Cosine auxiliary loss over an explicit sampled pair list: the mean of
/// `(cos(v_i, k_j) - label)^2` with label 1 for positives and 0 for negatives.
/// An empty list costs zero. A zero-norm embedding among the sampled rows is a
/// numeric-domain error (a dead embedding head, not a definable value).
pub fn pcl_aux(g: &mut Graph, v: Tid, k: Tid, pairs: &[AuxPair]) -> Result<Tid> {
    let (nv, _) = dims2(g, v, "pcl_aux anchors")?;
    let (nk, _) = dims2(g, k, "pcl_aux targets")?;
    if pairs.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    for &(i, j, _) in pairs {
        if i >= nv || j >= nk {
            return Err(Error::shape(
                "pcl_aux pair index",
                format!("< [{nv}, {nk}]"),
                format!("({i}, {j})"),
            ));
        }
    }
    let row_norm_sq = |val: &ArrayD<f64>, r: usize| -> f64 {
        let m = val.view().into_dimensionality::<ndarray::Ix2>().expect("2-d value");
        m.row(r).iter().map(|x| x * x).sum()
    };
    for &(i, j, _) in pairs {
        if row_norm_sq(g.value(v), i) < 1e-24 || row_norm_sq(g.value(k), j) < 1e-24 {
            return Err(Error::NumericDomain(format!(
                "zero-norm embedding in pcl_aux pair ({i}, {j})"
            )));
        }
    }

    let vi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let kj: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let va = g.gather_rows(v, vi);
    let kb = g.gather_rows(k, kj);
    let prod = g.mul(va, kb);
    let dots = g.sum_axis1(prod);
    let va2 = g.mul(va, va);
    let kb2 = g.mul(kb, kb);
    let va_ss = g.sum_axis1(va2);
    let kb_ss = g.sum_axis1(kb2);
    let nv_ = g.sqrt(va_ss);
    let nk_ = g.sqrt(kb_ss);
    let denom = g.mul(nv_, nk_);
    let cos = g.div(dots, denom);
    let targets: Array1<f64> = pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect();
    let tgt = g.constant(targets.into_dyn());
    let diff = g.sub(cos, tgt);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}

/// [`pcl_aux`] evaluated on plain arrays through a throwaway graph.
pub fn pcl_aux_value(v: &Array2<f64>, k: &Array2<f64>, pairs: &[AuxPair]) -> Result<f64> {
    let mut g = Graph::new();
    let vt = g.leaf(v.clone().into_dyn());
    let kt = g.leaf(k.clone().into_dyn());
    let loss = pcl_aux(&mut g, vt, kt, pairs)?;
    Ok(g.scalar_value(loss))
}

/// RPN consistency: mean over anchors of the squared score gap plus, where the
/// teacher scores the anchor at least `epsilon` above the student, the squared
/// regression gap. Teacher arrays enter as constants; the gate compares the
/// teacher score against the student's current (detached) value, so gradients
/// never flow through the gate itself. Zero anchors cost zero.
pub fn dc_rpn(
    g: &mut Graph,
    teacher_scores: &Array1<f64>,
    teacher_reg: &Array2<f64>,
    student_scores: Tid,
    student_reg: Tid,
    epsilon: f64,
) -> Result<Tid> {
    let n = dims1(g, student_scores, "dc_rpn student scores")?;
    let (nr, four) = dims2(g, student_reg, "dc_rpn student regressions")?;
    if teacher_scores.len() != n || nr != n || four != 4 || teacher_reg.dim() != (n, 4) {
        return Err(Error::shape(
            "dc_rpn",
            format!("scores [{n}], regressions [{n}, 4]"),
            format!(
                "teacher [{}] / [{:?}], student reg [{nr}, {four}]",
                teacher_scores.len(),
                teacher_reg.dim()
            ),
        ));
    }
    if n == 0 {
        return Ok(g.scalar_const(0.0));
    }

    let student_now =
        g.value(student_scores).view().into_dimensionality::<ndarray::Ix1>().expect("1-d").to_owned();
    let gate: Array1<f64> = teacher_scores
        .iter()
        .zip(student_now.iter())
        .map(|(&t, &s)| if t > s + epsilon { 1.0 } else { 0.0 })
        .collect();

    let ts = g.constant(teacher_scores.clone().into_dyn());
    let tr = g.constant(teacher_reg.clone().into_dyn());
    let gate_t = g.constant(gate.into_dyn());

    let ds = g.sub(ts, student_scores);
    let ds2 = g.mul(ds, ds);
    let dr = g.sub(tr, student_reg);
    let dr2 = g.mul(dr, dr);
    let dr_row = g.sum_axis1(dr2);
    let gated = g.mul(dr_row, gate_t);
    let per_anchor = g.add(ds2, gated);
    Ok(g.mean(per_anchor))
}

/// [`dc_rpn`] evaluated on plain arrays through a throwaway graph.
pub fn dc_rpn_value(
    teacher_scores: &Array1<f64>,
    teacher_reg: &Array2<f64>,
    student_scores: &Array1<f64>,
    student_reg: &Array2<f64>,
    epsilon: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let ss = g.leaf(student_scores.clone().into_dyn());
    let sr = g.leaf(student_reg.clone().into_dyn());
    let loss = dc_rpn(&mut g, teacher_scores, teacher_reg, ss, sr, epsilon)?;
    Ok(g.scalar_value(loss))
}

/// RoI head consistency: squared gap between per-RoI zero-mean class logits
/// plus squared regression gap, normalized by RoI count times class count.
/// The zero-mean construction makes the class term invariant to any per-RoI
/// constant added to either model's logits. Teacher arrays enter as constants.
/// Zero RoIs cost zero. Callers evaluate the student on the teacher's
/// proposals so both sides score identical regions.
pub fn dc_roi(
    g: &mut Graph,
    teacher_logits: &Array2<f64>,
    teacher_reg: &Array2<f64>,
    student_logits: Tid,
    student_reg: Tid,
) -> Result<Tid> {
    let (k, c) = dims2(g, student_logits, "dc_roi student logits")?;
    let (kr, four) = dims2(g, student_reg, "dc_roi student regressions")?;
    if teacher_logits.dim() != (k, c) || teacher_reg.dim() != (k, 4) || kr != k || four != 4 {
        return Err(Error::shape(
            "dc_roi",
            format!("logits [{k}, {c}], regressions [{k}, 4]"),
            format!(
                "teacher {:?} / {:?}, student reg [{kr}, {four}]",
                teacher_logits.dim(),
                teacher_reg.dim()
            ),
        ));
    }
    if k == 0 {
        return Ok(g.scalar_const(0.0));
    }
    if c == 0 {
        return Err(Error::shape("dc_roi", "at least one class column", "0"));
    }

    let row_means = teacher_logits.sum_axis(ndarray::Axis(1)) / c as f64;
    let teacher_centered = teacher_logits - &row_means.insert_axis(ndarray::Axis(1));
    let tl = g.constant(teacher_centered.into_dyn());
    let tr = g.constant(teacher_reg.clone().into_dyn());

    let sm = g.mean_axis1(student_logits);
    let sl = g.sub_broadcast_col(student_logits, sm);
    let dl = g.sub(sl, tl);
    let dl2 = g.mul(dl, dl);
    let s_cls = g.sum(dl2);
    let drg = g.sub(student_reg, tr);
    let drg2 = g.mul(drg, drg);
    let s_reg = g.sum(drg2);
    let total = g.add(s_cls, s_reg);
    Ok(g.mul_scalar(total, 1.0 / (k as f64 * c as f64)))
}

/// [`dc_roi`] evaluated on plain arrays through a throwaway graph.
pub fn dc_roi_value(
    teacher_logits: &Array2<f64>,
    teacher_reg: &Array2<f64>,
    student_logits: &Array2<f64>,
    student_reg: &Array2<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let sl = g.leaf(student_logits.clone().into_dyn());
    let sr = g.leaf(student_reg.clone().into_dyn());
    let loss = dc_roi(&mut g, teacher_logits, teacher_reg, sl, sr)?;
    Ok(g.scalar_value(loss))
}

/// Weighted sum of the present components in the fixed order embed, aux,
/// dc_rpn, dc_roi. Absent components contribute exactly zero. A non-finite
/// component value is rejected by name before it can poison the total.
pub fn total_loss(g: &mut Graph, parts: LossParts, weights: &LossWeights) -> Result<(Tid, LossBreakdown)> {
    let named = [
        ("embed", parts.embed, weights.embed),
        ("aux", parts.aux, weights.aux),
        ("dc_rpn", parts.dc_rpn, weights.dc_rpn),
        ("dc_roi", parts.dc_roi, weights.dc_roi),
    ];
    let mut values = [0.0f64; 4];
    for (slot, (name, part, _)) in named.iter().enumerate() {
        if let Some(t) = part {
            let v = g.scalar_value(*t);
            if !v.is_finite() {
                return Err(Error::NumericDomain(format!("non-finite {name} loss component: {v}")));
            }
            values[slot] = v;
        }
    }

    let mut acc: Option<Tid> = None;
    for (_, part, gamma) in named {
        if let Some(t) = part {
            let weighted = g.mul_scalar(t, gamma);
            acc = Some(match acc {
                None => weighted,
                Some(prev) => g.add(prev, weighted),
            });
        }
    }
    let total = acc.unwrap_or_else(|| g.scalar_const(0.0));
    let breakdown = LossBreakdown {
        embed: values[0],
        aux: values[1],
        dc_rpn: values[2],
        dc_roi: values[3],
        total: g.scalar_value(total),
        weights: *weights,
    };
    Ok((total, breakdown))
}
