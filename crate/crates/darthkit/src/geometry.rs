//! Boxes, detections and the geometric warps applied to views.
//!
//! Boxes live in continuous image coordinates with half-open extents
//! `[x1, x2) x [y1, y2)`: a box covering one pixel at the origin is
//! `(0, 0, 1, 1)`. Boxes that touch only along an edge do not intersect.
//! Degenerate boxes (non-positive width or height) are filtered by callers,
//! never treated as errors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    /// From MOTChallenge-style `(x, y, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (self.x1, self.y1, self.width(), self.height())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.x2 <= self.x1 || self.y2 <= self.y1
    }

    /// Intersection box; may be degenerate when the inputs do not overlap.
    pub fn intersection(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
    }

    /// Clip to the frame `[0, w) x [0, h)`. The result may be degenerate.
    pub fn clip(&self, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }
}

/// Intersection over union. Degenerate inputs score 0 against everything.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).area();
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored, classified box. `class` indexes the model's class list where 0 is
/// background, so detections always carry `class >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class: u32,
}

/// A sampled geometric transform: scale, then horizontal flip, then crop.
///
/// `scaled_w`/`scaled_h` are the integral dimensions the image is resized to,
/// so box math uses the effective scale `scaled_w / src_w` and agrees with the
/// pixel-level warp. The crop keeps the window
/// `[crop_x, crop_x + out_w) x [crop_y, crop_y + out_h)` of the scaled,
/// possibly flipped image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    pub src_w: usize,
    pub src_h: usize,
    pub scaled_w: usize,
    pub scaled_h: usize,
    pub flip: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub out_w: usize,
    pub out_h: usize,
}

impl WarpRecord {
    pub fn identity(w: usize, h: usize) -> Self {
        WarpRecord {
            src_w: w,
            src_h: h,
            scaled_w: w,
            scaled_h: h,
            flip: false,
            crop_x: 0,
            crop_y: 0,
            out_w: w,
            out_h: h,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == WarpRecord::identity(self.src_w, self.src_h)
    }

    pub fn scale_x(&self) -> f64 {
        self.scaled_w as f64 / self.src_w as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.scaled_h as f64 / self.src_h as f64
    }
}

/// Map a box from source coordinates into the warped view's coordinates.
/// No clipping: callers clip to the output window and drop degenerates.
pub fn warp_box(b: &BoundingBox, w: &WarpRecord) -> BoundingBox {
    let (sx, sy) = (w.scale_x(), w.scale_y());
    let (mut x1, mut x2) = (b.x1 * sx, b.x2 * sx);
    let (y1, y2) = (b.y1 * sy, b.y2 * sy);
    if w.flip {
        let sw = w.scaled_w as f64;
        (x1, x2) = (sw - x2, sw - x1);
    }
    BoundingBox::new(
        x1 - w.crop_x as f64,
        y1 - w.crop_y as f64,
        x2 - w.crop_x as f64,
        y2 - w.crop_y as f64,
    )
}

/// Inverse of [`warp_box`]: map a box from the warped view back to source
/// coordinates.
pub fn unwarp_box(b: &BoundingBox, w: &WarpRecord) -> BoundingBox {
    let (sx, sy) = (w.scale_x(), w.scale_y());
    let (mut x1, mut x2) = (b.x1 + w.crop_x as f64, b.x2 + w.crop_x as f64);
    let y1 = b.y1 + w.crop_y as f64;
    let y2 = b.y2 + w.crop_y as f64;
    if w.flip {
        let sw = w.scaled_w as f64;
        (x1, x2) = (sw - x2, sw - x1);
    }
    BoundingBox::new(x1 / sx, y1 / sy, x2 / sx, y2 / sy)
}
