//! The toy detector with an appearance embedding head.
//!
//! Architecture: three stride-2 3x3 conv blocks (overall stride 8, single
//! feature level), a small RPN (3x3 conv trunk, 1x1 heads, one scale and two
//! aspect ratios per cell), a 4x4 average-pool RoI crop feeding a shared fc,
//! a class-aware classification head with a class-agnostic box regressor, and
//! a separate fc / layer-norm / fc embedding head producing one appearance
//! vector per RoI.
//!
//! Forward passes are built on the [`crate::autodiff`] tape so the same code
//! path serves training (gradients) and inference (values only). Proposal
//! decoding, NMS and detection post-processing run on plain values; no
//! gradient flows through box coordinates.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, RoiBins, Tid};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::image_data::ImageArray;
use crate::rng::{stream, StreamRole};

/// Encoder stride: three stride-2 convolutions.
pub const STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Class count including background at index 0.
    pub num_classes: usize,
    pub embed_dim: usize,
    pub enc_channels: [usize; 3],
    /// Width of the RoI fc and the embedding hidden layer.
    pub hidden_dim: usize,
    /// Anchor side length in pixels (single scale).
    pub anchor_scale: f64,
    /// Height/width ratios, one anchor per ratio per cell.
    pub anchor_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub roi_pool_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            embed_dim: 64,
            enc_channels: [8, 16, 32],
            hidden_dim: 64,
            anchor_scale: 20.0,
            anchor_ratios: vec![1.0, 0.5],
            rpn_pre_nms_top_n: 64,
            rpn_post_nms_top_n: 16,
            rpn_nms_iou: 0.7,
            roi_pool_size: 4,
        }
    }
}

/// Detection post-processing thresholds, shared by the adaptation teacher and
/// the tracker so "what counts as a detection" means one thing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thr: 0.5,
            nms_iou: 0.5,
            max_dets: 20,
        }
    }
}

enum InitRule {
    /// He-normal on the leading fan-in.
    Weight { fan_in: usize },
    Zero,
    One,
    /// Background-favouring logit bias for the RPN objectness head.
    NegativePrior,
}

struct ParamSpec {
    name: &'static str,
    shape: Vec<usize>,
    rule: InitRule,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [c1, c2, c3] = cfg.enc_channels;
    let a = cfg.anchor_ratios.len();
    let h = cfg.hidden_dim;
    let pooled = c3 * cfg.roi_pool_size * cfg.roi_pool_size;
    let c = cfg.num_classes;
    let e = cfg.embed_dim;
    vec![
        ParamSpec { name: "enc.conv1.w", shape: vec![c1, 3, 3, 3], rule: InitRule::Weight { fan_in: 3 * 9 } },
        ParamSpec { name: "enc.conv1.b", shape: vec![c1], rule: InitRule::Zero },
        ParamSpec { name: "enc.conv2.w", shape: vec![c2, c1, 3, 3], rule: InitRule::Weight { fan_in: c1 * 9 } },
        ParamSpec { name: "enc.conv2.b", shape: vec![c2], rule: InitRule::Zero },
        ParamSpec { name: "enc.conv3.w", shape: vec![c3, c2, 3, 3], rule: InitRule::Weight { fan_in: c2 * 9 } },
        ParamSpec { name: "enc.conv3.b", shape: vec![c3], rule: InitRule::Zero },
        ParamSpec { name: "rpn.conv.w", shape: vec![c3, c3, 3, 3], rule: InitRule::Weight { fan_in: c3 * 9 } },
        ParamSpec { name: "rpn.conv.b", shape: vec![c3], rule: InitRule::Zero },
        ParamSpec { name: "rpn.cls.w", shape: vec![a, c3, 1, 1], rule: InitRule::Weight { fan_in: c3 } },
        ParamSpec { name: "rpn.cls.b", shape: vec![a], rule: InitRule::NegativePrior },
        ParamSpec { name: "rpn.reg.w", shape: vec![4 * a, c3, 1, 1], rule: InitRule::Weight { fan_in: c3 } },
        ParamSpec { name: "rpn.reg.b", shape: vec![4 * a], rule: InitRule::Zero },
        ParamSpec { name: "roi.fc.w", shape: vec![pooled, h], rule: InitRule::Weight { fan_in: pooled } },
        ParamSpec { name: "roi.fc.b", shape: vec![h], rule: InitRule::Zero },
        ParamSpec { name: "roi.cls.w", shape: vec![h, c], rule: InitRule::Weight { fan_in: h } },
        ParamSpec { name: "roi.cls.b", shape: vec![c], rule: InitRule::Zero },
        ParamSpec { name: "roi.reg.w", shape: vec![h, 4], rule: InitRule::Weight { fan_in: h } },
        ParamSpec { name: "roi.reg.b", shape: vec![4], rule: InitRule::Zero },
        ParamSpec { name: "embed.fc1.w", shape: vec![pooled, h], rule: InitRule::Weight { fan_in: pooled } },
        ParamSpec { name: "embed.fc1.b", shape: vec![h], rule: InitRule::Zero },
        ParamSpec { name: "embed.ln.gamma", shape: vec![h], rule: InitRule::One },
        ParamSpec { name: "embed.ln.beta", shape: vec![h], rule: InitRule::Zero },
        ParamSpec { name: "embed.fc2.w", shape: vec![h, e], rule: InitRule::Weight { fan_in: h } },
        ParamSpec { name: "embed.fc2.b", shape: vec![e], rule: InitRule::Zero },
    ]
}

/// Ordered, named parameter arrays plus the producing step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    entries: Vec<(String, ArrayD<f64>)>,
    pub step: u64,
}

impl ModelWeights {
    /// Deterministic seeded initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let entries = param_specs(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = stream(seed, i as u64, StreamRole::WeightInit);
                let n: usize = spec.shape.iter().product();
                let data: Vec<f64> = match spec.rule {
                    InitRule::Weight { fan_in } => {
                        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    InitRule::Zero => vec![0.0; n],
                    InitRule::One => vec![1.0; n],
                    InitRule::NegativePrior => vec![-2.0; n],
                };
                let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("spec shape");
                (spec.name.to_string(), arr)
            })
            .collect();
        ModelWeights { entries, step: 0 }
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn entries(&self) -> &[(String, ArrayD<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, ArrayD<f64>)] {
        &mut self.entries
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Flat L2 distance to another weight set with identical layout.
    pub fn l2_distance(&self, other: &ModelWeights) -> f64 {
        assert_eq!(self.entries.len(), other.entries.len(), "layout mismatch");
        self.entries
            .iter()
            .zip(other.entries.iter())
            .map(|((na, a), (nb, b))| {
                assert_eq!(na, nb, "layout mismatch");
                a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Exponential moving average: `tau * keep + (1 - tau) * incoming`,
/// elementwise over every parameter. `tau = 1` freezes `keep`; `tau = 0`
/// copies `incoming`.
pub fn blend_weights(keep: &ModelWeights, incoming: &ModelWeights, tau: f64) -> Result<ModelWeights> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    if keep.entries.len() != incoming.entries.len() {
        return Err(Error::shape(
            "blend_weights",
            format!("{} entries", keep.entries.len()),
            format!("{} entries", incoming.entries.len()),
        ));
    }
    let mut entries = Vec::with_capacity(keep.entries.len());
    for ((na, a), (nb, b)) in keep.entries.iter().zip(incoming.entries.iter()) {
        if na != nb || a.shape() != b.shape() {
            return Err(Error::shape("blend_weights", na.clone(), nb.clone()));
        }
        entries.push((na.clone(), a * tau + b * (1.0 - tau)));
    }
    Ok(ModelWeights { entries, step: incoming.step })
}

/// Parameters registered on a graph, once per tape.
pub struct ParamTids {
    tids: Vec<(String, Tid)>,
}

impl ParamTids {
    pub fn get(&self, name: &str) -> Tid {
        self.tids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Tid)> {
        self.tids.iter().map(|(n, t)| (n.as_str(), *t))
    }
}

/// Register every parameter on `g`. `trainable` decides leaf vs constant:
/// the teacher is loaded as constants so no gradient can reach it.
pub fn load_params(g: &mut Graph, w: &ModelWeights, trainable: bool) -> ParamTids {
    let tids = w
        .entries
        .iter()
        .map(|(n, arr)| {
            let t = if trainable { g.leaf(arr.clone()) } else { g.constant(arr.clone()) };
            (n.clone(), t)
        })
        .collect();
    ParamTids { tids }
}

/// `(H, W, 3)` pixels in `[0, 255]` to a normalized `[3, H, W]` input.
pub fn image_to_input(img: &ImageArray) -> Array3<f64> {
    let (h, w, _) = img.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| img[[y, x, c]] / 255.0 - 0.5)
}

/// Anchor grid in view pixel coordinates, `(cell y, cell x, ratio)` order.
pub fn anchor_grid(cfg: &ModelConfig, feat_h: usize, feat_w: usize) -> Vec<BoundingBox> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * cfg.anchor_ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * STRIDE as f64;
            let cy = (y as f64 + 0.5) * STRIDE as f64;
            for &r in &cfg.anchor_ratios {
                let h = cfg.anchor_scale * r.sqrt();
                let w = cfg.anchor_scale / r.sqrt();
                anchors.push(BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
            }
        }
    }
    anchors
}

/// Log-space box deltas of `target` relative to `anchor`.
pub fn encode_box(anchor: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`]; the log-size deltas are clamped to +-4 so wild
/// regressions cannot overflow.
pub fn decode_box(anchor: &BoundingBox, delta: &[f64; 4]) -> BoundingBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta[0] * aw;
    let cy = acy + delta[1] * ah;
    let w = aw * delta[2].clamp(-4.0, 4.0).exp();
    let h = ah * delta[3].clamp(-4.0, 4.0).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Greedy NMS: keep highest score first (ties: lower index), suppress
/// overlaps at or above `iou_thr`.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && crate::geometry::iou(&boxes[i], &boxes[j]) >= iou_thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// RoI average-pool windows on the feature grid for one box.
fn roi_bins(b: &BoundingBox, feat_h: usize, feat_w: usize, pool: usize) -> RoiBins {
    let gx0 = ((b.x1 / STRIDE as f64).floor() as isize).clamp(0, feat_w as isize - 1) as usize;
    let gy0 = ((b.y1 / STRIDE as f64).floor() as isize).clamp(0, feat_h as isize - 1) as usize;
    let gx1 = ((b.x2 / STRIDE as f64).ceil() as isize).clamp(gx0 as isize + 1, feat_w as isize) as usize;
    let gy1 = ((b.y2 / STRIDE as f64).ceil() as isize).clamp(gy0 as isize + 1, feat_h as isize) as usize;
    let span_x = gx1 - gx0;
    let span_y = gy1 - gy0;
    let mut cells = Vec::with_capacity(pool * pool);
    for j in 0..pool {
        let mut y0 = gy0 + j * span_y / pool;
        let mut y1 = gy0 + (j + 1) * span_y / pool;
        if y1 <= y0 {
            y1 = (y0 + 1).min(gy1);
            y0 = y1 - 1;
        }
        for i in 0..pool {
            let mut x0 = gx0 + i * span_x / pool;
            let mut x1 = gx0 + (i + 1) * span_x / pool;
            if x1 <= x0 {
                x1 = (x0 + 1).min(gx1);
                x0 = x1 - 1;
            }
            cells.push((y0, y1, x0, x1));
        }
    }
    RoiBins { cells }
}

/// Graph-side outputs of one forward pass.
pub struct ForwardGraph {
    pub feat: Tid,
    /// Objectness logits, `[N]`, anchor order matches [`anchor_grid`].
    pub rpn_cls: Tid,
    /// Box deltas, `[N, 4]`.
    pub rpn_reg: Tid,
    pub anchors: Vec<BoundingBox>,
    /// RoIs the heads ran on (given or self-proposed), view coordinates.
    pub proposals: Vec<BoundingBox>,
    /// `[K, C]` class logits.
    pub roi_cls: Tid,
    /// `[K, 4]` class-agnostic box deltas.
    pub roi_reg: Tid,
    /// `[K, E]` appearance embeddings.
    pub embeddings: Tid,
}

/// Plain-value outputs of [`forward`].
#[derive(Debug, Clone)]
pub struct DetectorOutputs {
    pub rpn_cls: Array1<f64>,
    pub rpn_reg: Array2<f64>,
    pub anchors: Vec<BoundingBox>,
    pub proposals: Vec<BoundingBox>,
    pub roi_cls: Array2<f64>,
    pub roi_reg: Array2<f64>,
    pub embeddings: Array2<f64>,
}

fn linear(g: &mut Graph, x: Tid, p: &ParamTids, w: &str, b: &str) -> Tid {
    let wt = p.get(w);
    let bt = p.get(b);
    let y = g.matmul(x, wt);
    g.add_broadcast_row(y, bt)
}

fn conv_block(g: &mut Graph, x: Tid, p: &ParamTids, w: &str, b: &str, stride: usize) -> Tid {
    let wt = p.get(w);
    let bt = p.get(b);
    let c = g.conv2d(x, wt, stride, 1);
    let c = g.add_broadcast_chan(c, bt);
    g.relu(c)
}

fn layer_norm(g: &mut Graph, x: Tid, p: &ParamTids, gamma: &str, beta: &str) -> Tid {
    let m = g.mean_axis1(x);
    let centered = g.sub_broadcast_col(x, m);
    let sq = g.mul(centered, centered);
    let var = g.mean_axis1(sq);
    let var_eps = g.add_scalar(var, 1e-6);
    let std = g.sqrt(var_eps);
    let normed = g.div_broadcast_col(centered, std);
    let scaled = g.mul_broadcast_row(normed, p.get(gamma));
    g.add_broadcast_row(scaled, p.get(beta))
}

/// Run the RoI heads (classification, regression, embedding) on `rois` over
/// an existing feature map. Used by the training path to evaluate heads on
/// several RoI sets within one tape.
pub fn roi_heads(
    g: &mut Graph,
    p: &ParamTids,
    cfg: &ModelConfig,
    feat: Tid,
    feat_h: usize,
    feat_w: usize,
    rois: &[BoundingBox],
) -> (Tid, Tid, Tid) {
    let pool = cfg.roi_pool_size;
    let bins: Vec<RoiBins> = rois.iter().map(|b| roi_bins(b, feat_h, feat_w, pool)).collect();
    let pooled = g.roi_pool(feat, bins, pool * pool);
    // Pooled layout is [K, C3 * cells]; the fc consumes it directly.
    let rf = linear(g, pooled, p, "roi.fc.w", "roi.fc.b");
    let rf = g.relu(rf);
    let roi_cls = linear(g, rf, p, "roi.cls.w", "roi.cls.b");
    let roi_reg = linear(g, rf, p, "roi.reg.w", "roi.reg.b");
    let e1 = linear(g, pooled, p, "embed.fc1.w", "embed.fc1.b");
    let e1 = layer_norm(g, e1, p, "embed.ln.gamma", "embed.ln.beta");
    let e1 = g.relu(e1);
    let embeddings = linear(g, e1, p, "embed.fc2.w", "embed.fc2.b");
    (roi_cls, roi_reg, embeddings)
}

/// Backbone + RPN over one image. Returns the feature map and flat anchor
/// outputs; RoI heads are applied separately so callers choose the RoI set.
pub fn backbone_rpn(
    g: &mut Graph,
    p: &ParamTids,
    cfg: &ModelConfig,
    img: &ImageArray,
) -> Result<(Tid, usize, usize, Tid, Tid, Vec<BoundingBox>)> {
    let (h, w, _) = img.dim();
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::shape(
            "forward",
            format!("image dims divisible by {STRIDE}"),
            format!("({h}, {w})"),
        ));
    }
    let x = g.constant(image_to_input(img).into_dyn());
    let c1 = conv_block(g, x, p, "enc.conv1.w", "enc.conv1.b", 2);
    let c2 = conv_block(g, c1, p, "enc.conv2.w", "enc.conv2.b", 2);
    let c3 = conv_block(g, c2, p, "enc.conv3.w", "enc.conv3.b", 2);
    let (feat_h, feat_w) = (h / STRIDE, w / STRIDE);
    let a = cfg.anchor_ratios.len();

    let rt = conv_block(g, c3, p, "rpn.conv.w", "rpn.conv.b", 1);
    let cls_w = p.get("rpn.cls.w");
    let cls_b = p.get("rpn.cls.b");
    let cls_map = g.conv2d(rt, cls_w, 1, 0);
    let cls_map = g.add_broadcast_chan(cls_map, cls_b);
    let cls_hwc = g.permute3(cls_map, [1, 2, 0]);
    let rpn_cls = g.reshape(cls_hwc, &[feat_h * feat_w * a]);

    let reg_w = p.get("rpn.reg.w");
    let reg_b = p.get("rpn.reg.b");
    let reg_map = g.conv2d(rt, reg_w, 1, 0);
    let reg_map = g.add_broadcast_chan(reg_map, reg_b);
    let reg_hwc = g.permute3(reg_map, [1, 2, 0]);
    // Channel layout is (ratio, coord), so the flat [N, 4] view lines up with
    // the anchor order.
    let rpn_reg = g.reshape(reg_hwc, &[feat_h * feat_w * a, 4]);

    let anchors = anchor_grid(cfg, feat_h, feat_w);
    Ok((c3, feat_h, feat_w, rpn_cls, rpn_reg, anchors))
}

/// Decode, clip, score-sort, and NMS the RPN outputs into proposals.
pub fn decode_proposals(
    cfg: &ModelConfig,
    anchors: &[BoundingBox],
    rpn_cls: &Array1<f64>,
    rpn_reg: &Array2<f64>,
    img_w: usize,
    img_h: usize,
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
                Some((i, sigmoid(rpn_cls[i]), b))
            }
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    scored.truncate(cfg.rpn_pre_nms_top_n);
    let boxes: Vec<BoundingBox> = scored.iter().map(|s| s.2).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let keep = nms(&boxes, &scores, cfg.rpn_nms_iou);
    keep.into_iter()
        .take(cfg.rpn_post_nms_top_n)
        .map(|i| boxes[i])
        .collect()
}

/// Full forward on an existing tape. With `rois: None` the model proposes its
/// own RoIs from the RPN.
pub fn forward_graph(
    g: &mut Graph,
    p: &ParamTids,
    cfg: &ModelConfig,
    img: &ImageArray,
    rois: Option<&[BoundingBox]>,
) -> Result<ForwardGraph> {
    let (h, w, _) = img.dim();
    let (feat, feat_h, feat_w, rpn_cls, rpn_reg, anchors) = backbone_rpn(g, p, cfg, img)?;
    let proposals = match rois {
        Some(r) => r.to_vec(),
        None => {
            let cls_val = g.value(rpn_cls).clone().into_dimensionality().expect("1-d rpn cls");
            let reg_val = g.value(rpn_reg).clone().into_dimensionality().expect("2-d rpn reg");
            decode_proposals(cfg, &anchors, &cls_val, &reg_val, w, h)
        }
    };
    let (roi_cls, roi_reg, embeddings) = roi_heads(g, p, cfg, feat, feat_h, feat_w, &proposals);
    Ok(ForwardGraph {
        feat,
        rpn_cls,
        rpn_reg,
        anchors,
        proposals,
        roi_cls,
        roi_reg,
        embeddings,
    })
}

/// Value-level forward pass.
pub fn forward(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    img: &ImageArray,
    rois: Option<&[BoundingBox]>,
) -> Result<DetectorOutputs> {
    let mut g = Graph::new();
    let p = load_params(&mut g, weights, false);
    let out = forward_graph(&mut g, &p, cfg, img, rois)?;
    Ok(DetectorOutputs {
        rpn_cls: g.value(out.rpn_cls).clone().into_dimensionality().expect("1-d"),
        rpn_reg: g.value(out.rpn_reg).clone().into_dimensionality().expect("2-d"),
        anchors: out.anchors,
        proposals: out.proposals,
        roi_cls: g.value(out.roi_cls).clone().into_dimensionality().expect("2-d"),
        roi_reg: g.value(out.roi_reg).clone().into_dimensionality().expect("2-d"),
        embeddings: g.value(out.embeddings).clone().into_dimensionality().expect("2-d"),
    })
}

/// Detections plus the appearance embedding of each detection's source RoI,
/// from a single forward pass.
pub fn detect_with_embeddings(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    det_cfg: &DetectConfig,
    img: &ImageArray,
) -> Result<(Vec<Detection>, Array2<f64>)> {
    let (h, w, _) = img.dim();
    let out = forward(weights, cfg, img, None)?;
    let k = out.proposals.len();
    // (roi index, class, score, refined box) candidates above threshold.
    let mut cands: Vec<(usize, u32, f64, BoundingBox)> = Vec::new();
    for i in 0..k {
        let probs = softmax_row(out.roi_cls.row(i).as_slice().expect("contiguous row"));
        let delta = [out.roi_reg[[i, 0]], out.roi_reg[[i, 1]], out.roi_reg[[i, 2]], out.roi_reg[[i, 3]]];
        let refined = decode_box(&out.proposals[i], &delta).clip(w as f64, h as f64);
        if refined.width() < 1.0 || refined.height() < 1.0 {
            continue;
        }
        for (c, &pc) in probs.iter().enumerate().skip(1) {
            if pc >= det_cfg.score_thr {
                cands.push((i, c as u32, pc, refined));
            }
        }
    }
    // Per-class NMS over candidates.
    let mut kept: Vec<(usize, u32, f64, BoundingBox)> = Vec::new();
    let mut classes: Vec<u32> = cands.iter().map(|c| c.1).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let of_class: Vec<&(usize, u32, f64, BoundingBox)> =
            cands.iter().filter(|c| c.1 == class).collect();
        let boxes: Vec<BoundingBox> = of_class.iter().map(|c| c.3).collect();
        let scores: Vec<f64> = of_class.iter().map(|c| c.2).collect();
        for i in nms(&boxes, &scores, det_cfg.nms_iou) {
            kept.push(*of_class[i]);
        }
    }
    kept.sort_by(|a, b| b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)));
    kept.truncate(det_cfg.max_dets);

    let e = out.embeddings.ncols();
    let mut embeds = Array2::zeros((kept.len(), e));
    let mut dets = Vec::with_capacity(kept.len());
    for (row, &(i, class, score, bbox)) in kept.iter().enumerate() {
        embeds.row_mut(row).assign(&out.embeddings.row(i));
        dets.push(Detection { bbox, score, class });
    }
    Ok((dets, embeds))
}

/// Detections only.
pub fn detect(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    det_cfg: &DetectConfig,
    img: &ImageArray,
) -> Result<Vec<Detection>> {
    Ok(detect_with_embeddings(weights, cfg, det_cfg, img)?.0)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DKCHKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    dtype: String,
    global_step: u64,
    entries: Vec<CheckpointEntry>,
}

/// Single-file container: magic, little-endian u64 manifest length, JSON
/// manifest, then the raw little-endian f64 arrays in manifest order.
/// Written atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, weights: &ModelWeights) -> Result<()> {
    let manifest = CheckpointManifest {
        version: 1,
        dtype: "f64".to_string(),
        global_step: weights.step,
        entries: weights
            .entries
            .iter()
            .map(|(n, a)| CheckpointEntry { name: n.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        for (_, arr) in &weights.entries {
            for v in arr.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".to_string()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            f.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::Checkpoint(format!("entry {}: {err}", e.name)))?;
        entries.push((e.name.clone(), arr));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(ModelWeights { entries, step: manifest.global_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamRole};
    use ndarray::Array3;
    use rand::Rng;

    fn test_image(h: usize, w: usize, seed: u64) -> ImageArray {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 53 + seed as usize * 7) % 256) as f64
        })
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = ModelWeights::init(&cfg, 5);
        let b = ModelWeights::init(&cfg, 5);
        assert_eq!(a, b);
        let c = ModelWeights::init(&cfg, 6);
        assert!(a.l2_distance(&c) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::default();
        let mut w = ModelWeights::init(&cfg, 9);
        w.step = 1234;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &w).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(w, back);
        assert_eq!(back.step, 1234);
    }

    #[test]
    fn missing_checkpoint_is_reported_as_missing_artifact() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn forward_shapes_follow_config() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 1);
        let img = test_image(48, 64, 0);
        let out = forward(&w, &cfg, &img, None).unwrap();
        let n = (48 / STRIDE) * (64 / STRIDE) * cfg.anchor_ratios.len();
        assert_eq!(out.rpn_cls.len(), n);
        assert_eq!(out.rpn_reg.dim(), (n, 4));
        assert_eq!(out.anchors.len(), n);
        assert!(out.proposals.len() <= cfg.rpn_post_nms_top_n);
        let k = out.proposals.len();
        assert_eq!(out.roi_cls.dim(), (k, cfg.num_classes));
        assert_eq!(out.roi_reg.dim(), (k, 4));
        assert_eq!(out.embeddings.dim(), (k, cfg.embed_dim));
    }

    #[test]
    fn full_image_roi_gives_single_embedding() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 2);
        let img = test_image(48, 64, 1);
        let roi = [BoundingBox::new(0.0, 0.0, 64.0, 48.0)];
        let out = forward(&w, &cfg, &img, Some(&roi)).unwrap();
        assert_eq!(out.embeddings.dim(), (1, cfg.embed_dim));
        assert!(out.embeddings.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_image_dims_error() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 3);
        let img = test_image(50, 64, 2);
        assert!(forward(&w, &cfg, &img, None).is_err());
    }

    #[test]
    fn explicit_rois_are_permutation_equivariant() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 4);
        let img = test_image(48, 64, 3);
        let rois = vec![
            BoundingBox::new(5.0, 5.0, 25.0, 30.0),
            BoundingBox::new(30.0, 10.0, 60.0, 40.0),
            BoundingBox::new(0.0, 0.0, 64.0, 48.0),
        ];
        let fwd = forward(&w, &cfg, &img, Some(&rois)).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<BoundingBox> = perm.iter().map(|&i| rois[i]).collect();
        let fwd_p = forward(&w, &cfg, &img, Some(&permuted)).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..cfg.num_classes {
                assert_eq!(fwd_p.roi_cls[[new_row, c]], fwd.roi_cls[[old_row, c]]);
            }
            for e in 0..cfg.embed_dim {
                assert_eq!(fwd_p.embeddings[[new_row, e]], fwd.embeddings[[old_row, e]]);
            }
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs() {
        let cfg = ModelConfig::default();
        for seed in 0..5 {
            let w = ModelWeights::init(&cfg, seed);
            let img = test_image(48, 48, seed);
            let out = forward(&w, &cfg, &img, None).unwrap();
            assert!(out.rpn_cls.iter().all(|v| v.is_finite()));
            assert!(out.rpn_reg.iter().all(|v| v.is_finite()));
            assert!(out.roi_cls.iter().all(|v| v.is_finite()));
            assert!(out.roi_reg.iter().all(|v| v.is_finite()));
            assert!(out.embeddings.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn box_codec_round_trips() {
        let mut rng = stream(55, 0, StreamRole::Oracle);
        for _ in 0..200 {
            let anchor = BoundingBox::new(
                rng.random_range(0.0..50.0),
                rng.random_range(0.0..50.0),
                rng.random_range(60.0..100.0),
                rng.random_range(60.0..100.0),
            );
            let target = BoundingBox::new(
                rng.random_range(0.0..50.0),
                rng.random_range(0.0..50.0),
                rng.random_range(60.0..100.0),
                rng.random_range(60.0..100.0),
            );
            let decoded = decode_box(&anchor, &encode_box(&anchor, &target));
            assert!((decoded.x1 - target.x1).abs() < 1e-9);
            assert!((decoded.y1 - target.y1).abs() < 1e-9);
            assert!((decoded.x2 - target.x2).abs() < 1e-9);
            assert!((decoded.y2 - target.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_suppresses_overlaps_keeps_best() {
        let boxes = vec![
            BoundingBox::new(0.0, 0.0, 10.0, 10.0),
            BoundingBox::new(1.0, 1.0, 11.0, 11.0),
            BoundingBox::new(50.0, 50.0, 60.0, 60.0),
        ];
        let scores = vec![0.8, 0.9, 0.5];
        let keep = nms(&boxes, &scores, 0.5);
        assert_eq!(keep, vec![1, 2]);
    }

    #[test]
    fn blend_weights_endpoints() {
        let cfg = ModelConfig::default();
        let teacher = ModelWeights::init(&cfg, 7);
        let student = ModelWeights::init(&cfg, 8);
        let frozen = blend_weights(&teacher, &student, 1.0).unwrap();
        assert!(teacher.l2_distance(&frozen) < 1e-12);
        let copied = blend_weights(&teacher, &student, 0.0).unwrap();
        assert!(student.l2_distance(&copied) < 1e-12);
        assert!(blend_weights(&teacher, &student, 1.5).is_err());
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, 11);
        let img = test_image(24, 32, 5);
        let mut g = Graph::new();
        let p = load_params(&mut g, &w, true);
        let rois = [BoundingBox::new(2.0, 2.0, 20.0, 20.0), BoundingBox::new(8.0, 4.0, 30.0, 22.0)];
        let out = forward_graph(&mut g, &p, &cfg, &img, Some(&rois)).unwrap();
        let s1 = g.sum(out.rpn_cls);
        let sq = g.mul(out.rpn_reg, out.rpn_reg);
        let s2 = g.sum(sq);
        let s3 = g.sum(out.roi_cls);
        let s4 = g.sum(out.roi_reg);
        let s5 = g.sum(out.embeddings);
        let mut loss = g.add(s1, s2);
        loss = g.add(loss, s3);
        loss = g.add(loss, s4);
        loss = g.add(loss, s5);
        let grads = g.backward(loss);
        for (name, tid) in p.iter() {
            let grad = grads.get(tid).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(grad.iter().all(|v| v.is_finite()), "non-finite grad in {name}");
        }
    }
}
