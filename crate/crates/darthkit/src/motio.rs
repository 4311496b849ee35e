//! MOTChallenge-format tracking results: the in-memory form shared by the
//! tracker, the synthetic ground truth and the evaluator, plus CSV round-trip.
//!
//! The file layout is one `frame,id,x,y,w,h,conf,class,vis` row per box with a
//! header line, 1-based frame indices, and `(x, y)` the top-left corner. In
//! ground-truth files `conf` doubles as the evaluation flag: rows with
//! `conf == 0` mark ignore regions and are dropped before scoring. Floats are
//! written with the shortest exact representation so a parse-write cycle and a
//! rerun of the producer are both byte-identical.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// One tracked box on one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    /// 1-based frame index.
    pub frame: usize,
    /// Identity label, stable across the sequence.
    pub id: u64,
    pub bbox: BoundingBox,
    /// Detection confidence; as ground truth, 0 means "ignore this box".
    pub conf: f64,
    /// Class label matching the detector's class indices (1-based).
    pub class: u32,
    /// Visibility fraction; emitted as 1 by the tracker.
    pub vis: f64,
}

/// A whole sequence of tracked boxes in canonical order (frame, then id).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingResult {
    pub entries: Vec<TrackedBox>,
}

impl TrackingResult {
    /// Canonicalize ordering so logically equal results serialize identically.
    pub fn new(mut entries: Vec<TrackedBox>) -> Self {
        entries.sort_by(|a, b| {
            (a.frame, a.id)
                .cmp(&(b.frame, b.id))
                .then(a.bbox.x1.total_cmp(&b.bbox.x1))
                .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        });
        TrackingResult { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest frame index present, or 0 for an empty result.
    pub fn max_frame(&self) -> usize {
        self.entries.iter().map(|e| e.frame).max().unwrap_or(0)
    }

    /// Distinct class labels present, ascending.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.class).collect()
    }

    /// Rows of one class only.
    pub fn filter_class(&self, class: u32) -> TrackingResult {
        TrackingResult {
            entries: self.entries.iter().copied().filter(|e| e.class == class).collect(),
        }
    }

    /// Drop ground-truth ignore rows (`conf == 0`).
    pub fn without_ignored(&self) -> TrackingResult {
        TrackingResult {
            entries: self.entries.iter().copied().filter(|e| e.conf != 0.0).collect(),
        }
    }

    /// Per-frame `(ids, boxes)` for frames `1..=max_frame`; frames without
    /// rows yield empty vectors.
    pub fn by_frame(&self) -> Vec<(Vec<u64>, Vec<BoundingBox>)> {
        let mut frames = vec![(Vec::new(), Vec::new()); self.max_frame()];
        for e in &self.entries {
            let slot = &mut frames[e.frame - 1];
            slot.0.push(e.id);
            slot.1.push(e.bbox);
        }
        frames
    }
}

pub const MOT_CSV_HEADER: &str = "frame,id,x,y,w,h,conf,class,vis";

/// Serialize to MOTChallenge CSV text, header included.
pub fn format_mot_csv(result: &TrackingResult) -> String {
    let mut out = String::with_capacity(32 * (result.entries.len() + 1));
    out.push_str(MOT_CSV_HEADER);
    out.push('\n');
    for e in &result.entries {
        let (x, y, w, h) = e.bbox.to_xywh();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.frame, e.id, x, y, w, h, e.conf, e.class, e.vis
        );
    }
    out
}

/// Parse MOTChallenge CSV text; the header line is optional.
pub fn parse_mot_csv(text: &str) -> Result<TrackingResult> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("frame")) {
            continue;
        }
        let bad = |detail: String| Error::Parse {
            what: "mot csv".into(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("field {} is not a number: {:?}", i + 1, fields[i])))
        };
        let int = |i: usize| -> Result<u64> {
            let v = num(i)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(bad(format!("field {} is not a non-negative integer: {v}", i + 1)));
            }
            Ok(v as u64)
        };
        let frame = int(0)?;
        if frame == 0 {
            return Err(bad("frame indices are 1-based".into()));
        }
        entries.push(TrackedBox {
            frame: frame as usize,
            id: int(1)?,
            bbox: BoundingBox::from_xywh(num(2)?, num(3)?, num(4)?, num(5)?),
            conf: num(6)?,
            class: int(7)? as u32,
            vis: num(8)?,
        });
    }
    Ok(TrackingResult::new(entries))
}

/// Write atomically: to a sibling temp file first, then rename into place.
pub fn write_mot_csv(path: &Path, result: &TrackingResult) -> Result<()> {
    let text = format_mot_csv(result);
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, &text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_mot_csv(path: &Path) -> Result<TrackingResult> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse_mot_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrackingResult {
        TrackingResult::new(vec![
            TrackedBox {
                frame: 2,
                id: 7,
                bbox: BoundingBox::from_xywh(10.5, 20.25, 30.0, 40.0),
                conf: 0.875,
                class: 1,
                vis: 1.0,
            },
            TrackedBox {
                frame: 1,
                id: 3,
                bbox: BoundingBox::from_xywh(0.0, 0.0, 5.0, 5.0),
                conf: 1.0,
                class: 2,
                vis: 1.0,
            },
        ])
    }

    #[test]
    fn canonical_order_is_frame_then_id() {
        let r = sample();
        assert_eq!(r.entries[0].frame, 1);
        assert_eq!(r.entries[1].frame, 2);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let text = format_mot_csv(&r);
        assert!(text.starts_with(MOT_CSV_HEADER));
        let back = parse_mot_csv(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(format_mot_csv(&back), text);
    }

    #[test]
    fn header_is_optional_on_parse() {
        let with = "frame,id,x,y,w,h,conf,class,vis\n1,1,0,0,2,2,1,1,1\n";
        let without = "1,1,0,0,2,2,1,1,1\n";
        assert_eq!(parse_mot_csv(with).unwrap(), parse_mot_csv(without).unwrap());
    }

    #[test]
    fn empty_result_is_header_only() {
        let text = format_mot_csv(&TrackingResult::default());
        assert_eq!(text, format!("{MOT_CSV_HEADER}\n"));
        assert!(parse_mot_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn malformed_rows_are_rejected_with_line_numbers() {
        for bad in ["1,2,3", "0,1,0,0,2,2,1,1,1", "1,x,0,0,2,2,1,1,1", "1,1.5,0,0,2,2,1,1,1"] {
            let err = parse_mot_csv(bad).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("line 1"), "missing location in: {msg}");
        }
    }

    #[test]
    fn ignore_rows_and_class_filters() {
        let mut r = sample();
        r.entries[0].conf = 0.0;
        let kept = r.without_ignored();
        assert_eq!(kept.entries.len(), 1);
        assert_eq!(kept.entries[0].id, 7);

        assert_eq!(r.filter_class(2).entries.len(), 1);
        assert_eq!(r.classes().into_iter().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn by_frame_covers_gaps() {
        let r = TrackingResult::new(vec![TrackedBox {
            frame: 3,
            id: 1,
            bbox: BoundingBox::from_xywh(0.0, 0.0, 1.0, 1.0),
            conf: 1.0,
            class: 1,
            vis: 1.0,
        }]);
        let frames = r.by_frame();
        assert_eq!(frames.len(), 3);
        assert!(frames[0].0.is_empty() && frames[1].0.is_empty());
        assert_eq!(frames[2].0, vec![1]);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let r = sample();
        write_mot_csv(&path, &r).unwrap();
        assert_eq!(read_mot_csv(&path).unwrap(), r);

        let missing = dir.path().join("absent.csv");
        let err = read_mot_csv(&missing).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "got {err}");
    }
}
