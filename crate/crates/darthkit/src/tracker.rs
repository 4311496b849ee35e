//! Tracking-by-detection inference: per-frame detections are associated into
//! identities by appearance-embedding similarity alone (no motion model).
//!
//! Association scores are a bidirectional softmax over cosine similarities:
//! for each detection a softmax over tracks, for each track a softmax over
//! detections, averaged. Matching is best-pair-first greedy by default, with
//! optimal assignment available in config since both satisfy the same
//! invariants. Matched tracks update their embedding by exponential moving
//! average; tracks unseen for more than `max_age` frames are retired, and
//! confident unmatched detections start new tracks with dense ids assigned in
//! birth order.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::assignment::{greedy_assignment, max_score_assignment};
use crate::error::Result;
use crate::geometry::{BoundingBox, Detection};
use crate::model::{detect_with_embeddings, DetectConfig, ModelConfig, ModelWeights};
use crate::motio::{TrackedBox, TrackingResult};
use crate::video::VideoSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    #[default]
    Greedy,
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Similarity floor below which a pairing is rejected.
    pub match_score_thr: f64,
    /// Confidence floor for an unmatched detection to start a track.
    pub init_conf_thr: f64,
    /// Frames a track may go unseen before it is retired.
    pub max_age: usize,
    /// Weight of the previous embedding in the running average.
    pub embed_momentum: f64,
    /// Softmax temperature on cosine similarities. Cosines live in [-1, 1],
    /// so without sharpening a clear winner among several candidates cannot
    /// dominate the softmax enough to clear `match_score_thr`.
    pub similarity_temperature: f64,
    pub assignment: AssignmentKind,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            match_score_thr: 0.5,
            init_conf_thr: 0.7,
            max_age: 10,
            embed_momentum: 0.8,
            similarity_temperature: 0.1,
            assignment: AssignmentKind::Greedy,
        }
    }
}

/// One live identity.
#[derive(Debug, Clone)]
pub struct Track {
    pub track_id: u64,
    pub last_box: BoundingBox,
    pub class: u32,
    pub conf: f64,
    /// Running appearance representation, updated by EMA on every match.
    pub embedding: Array1<f64>,
    pub last_seen_frame: usize,
}

/// Outcome of associating one frame's detections against the live tracks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Associations {
    /// `(track index, detection index)` pairs, each side used at most once.
    pub matches: Vec<(usize, usize)>,
    /// Detection indices that start new tracks.
    pub births: Vec<usize>,
    /// Track indices to retire (unseen longer than `max_age`).
    pub deaths: Vec<usize>,
}

fn cosine(a: &Array1<f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(&b).sqrt();
    // Inference-side guard: a dead (all-zero) embedding scores 0 everywhere
    // rather than poisoning the softmax with NaN.
    a.dot(&b) / (na * nb).max(1e-12)
}

/// Bidirectional softmax similarity between track and detection embeddings:
/// the mean of a per-detection softmax over tracks and a per-track softmax
/// over detections, both on temperature-scaled cosine similarity.
pub fn bisoftmax_similarity(
    tracks: &[Track],
    det_embeds: &Array2<f64>,
    temperature: f64,
) -> Array2<f64> {
    let t = tracks.len();
    let m = det_embeds.nrows();
    let inv = 1.0 / temperature.max(1e-12);
    let cos = Array2::from_shape_fn((t, m), |(i, j)| {
        inv * cosine(&tracks[i].embedding, det_embeds.row(j))
    });
    let mut sim = Array2::zeros((t, m));
    if t == 0 || m == 0 {
        return sim;
    }
    for j in 0..m {
        let col: Vec<f64> = (0..t).map(|i| cos[[i, j]]).collect();
        let s = softmax(&col);
        for i in 0..t {
            sim[[i, j]] += 0.5 * s[i];
        }
    }
    for i in 0..t {
        let row: Vec<f64> = (0..m).map(|j| cos[[i, j]]).collect();
        let s = softmax(&row);
        for j in 0..m {
            sim[[i, j]] += 0.5 * s[j];
        }
    }
    sim
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Match detections to tracks for the frame `frame`. Tracks already unseen
/// for more than `max_age` frames are excluded from matching and reported as
/// deaths; unmatched detections with confidence at least `init_conf_thr` are
/// reported as births.
pub fn associate(
    tracks: &[Track],
    dets: &[Detection],
    det_embeds: &Array2<f64>,
    frame: usize,
    cfg: &TrackerConfig,
) -> Associations {
    assert_eq!(det_embeds.nrows(), dets.len(), "embedding rows must align with detections");
    let mut out = Associations::default();
    let mut active = Vec::new();
    for (i, tr) in tracks.iter().enumerate() {
        if frame - tr.last_seen_frame > cfg.max_age {
            out.deaths.push(i);
        } else {
            active.push(i);
        }
    }

    let active_tracks: Vec<Track> = active.iter().map(|&i| tracks[i].clone()).collect();
    let sim = bisoftmax_similarity(&active_tracks, det_embeds, cfg.similarity_temperature);
    let pairs = match cfg.assignment {
        AssignmentKind::Greedy => greedy_assignment(&sim, cfg.match_score_thr),
        AssignmentKind::Optimal => max_score_assignment(&sim)
            .into_iter()
            .filter(|&(i, j)| sim[[i, j]] >= cfg.match_score_thr)
            .collect(),
    };

    let mut det_taken = vec![false; dets.len()];
    for (ai, j) in pairs {
        out.matches.push((active[ai], j));
        det_taken[j] = true;
    }
    out.matches.sort_unstable();
    for (j, det) in dets.iter().enumerate() {
        if !det_taken[j] && det.score >= cfg.init_conf_thr {
            out.births.push(j);
        }
    }
    out
}

/// Sequential tracker state over one sequence.
#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    pub tracks: Vec<Track>,
    next_id: u64,
}

impl TrackerState {
    pub fn new() -> Self {
        TrackerState { tracks: Vec::new(), next_id: 1 }
    }

    /// Consume one frame's detections; returns the rows emitted for this
    /// frame (matched tracks and births, with their current track ids).
    pub fn step(
        &mut self,
        frame: usize,
        dets: &[Detection],
        det_embeds: &Array2<f64>,
        cfg: &TrackerConfig,
    ) -> Vec<TrackedBox> {
        let assoc = associate(&self.tracks, dets, det_embeds, frame, cfg);
        let mut rows = Vec::new();

        for &(ti, j) in &assoc.matches {
            let det = &dets[j];
            let tr = &mut self.tracks[ti];
            tr.last_box = det.bbox;
            tr.class = det.class;
            tr.conf = det.score;
            tr.last_seen_frame = frame;
            let fresh = det_embeds.row(j).to_owned();
            tr.embedding = cfg.embed_momentum * &tr.embedding + (1.0 - cfg.embed_momentum) * &fresh;
            rows.push(track_row(tr, frame));
        }
        for &j in &assoc.births {
            let det = &dets[j];
            let tr = Track {
                track_id: self.next_id,
                last_box: det.bbox,
                class: det.class,
                conf: det.score,
                embedding: det_embeds.row(j).to_owned(),
                last_seen_frame: frame,
            };
            self.next_id += 1;
            rows.push(track_row(&tr, frame));
            self.tracks.push(tr);
        }
        // Retire after matching so deaths computed for this frame apply now.
        let dead: std::collections::HashSet<usize> = assoc.deaths.into_iter().collect();
        let mut idx = 0;
        self.tracks.retain(|_| {
            let keep = !dead.contains(&idx);
            idx += 1;
            keep
        });
        rows
    }
}

fn track_row(tr: &Track, frame: usize) -> TrackedBox {
    TrackedBox {
        frame,
        id: tr.track_id,
        bbox: tr.last_box,
        conf: tr.conf,
        class: tr.class,
        vis: 1.0,
    }
}

/// Run detector plus association over an ordered frame sequence.
pub fn track_sequence(
    weights: &ModelWeights,
    model_cfg: &ModelConfig,
    det_cfg: &DetectConfig,
    video: &VideoSet,
    cfg: &TrackerConfig,
) -> Result<TrackingResult> {
    let mut state = TrackerState::new();
    let mut rows = Vec::new();
    for (i, frame) in video.frames.iter().enumerate() {
        let (dets, embeds) = detect_with_embeddings(weights, model_cfg, det_cfg, frame)?;
        rows.extend(state.step(i + 1, &dets, &embeds, cfg));
    }
    Ok(TrackingResult::new(rows))
}
