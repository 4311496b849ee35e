//! Video containers shared by the generator, the adaptation loop and the
//! tracker.
//!
//! [`VideoSet`] deliberately carries no annotation fields: code that adapts on
//! a target domain takes a `VideoSet` and therefore cannot read labels that do
//! not exist. Labeled data exists only as [`LabeledVideoSet`], used for source
//! pretraining and for evaluation.

use crate::image_data::ImageArray;
use crate::motio::TrackingResult;

/// An ordered, unlabeled frame sequence.
#[derive(Debug, Clone)]
pub struct VideoSet {
    pub name: String,
    pub frames: Vec<ImageArray>,
}

impl VideoSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frames plus per-frame ground-truth identities and boxes.
#[derive(Debug, Clone)]
pub struct LabeledVideoSet {
    pub video: VideoSet,
    pub gt: TrackingResult,
}
