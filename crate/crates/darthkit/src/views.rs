//! Augmented view construction for teacher-student adaptation.
//!
//! From one frame `x` the sampler builds three views:
//! - teacher `x_T`: geometric transform only (scale, flip, crop),
//! - student `x_S`: photometric transform of `x_T`, so it stays geometrically
//!   aligned with the teacher view (same dimensions, same box coordinates),
//! - contrastive `x_C`: independent geometric and photometric transform of
//!   the original frame.
//!
//! The photometric pipeline runs fixed stages in a fixed order, each gated by
//! a sampled flag: brightness shift, contrast (early slot), HSV conversion,
//! saturation scale, hue rotation, conversion back, contrast (late slot),
//! channel permutation. The early/late contrast slots are mutually exclusive;
//! the HSV conversions happen exactly when a stage needing them fired. Pixels
//! stay float through the pipeline and each emitted view is quantized once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{unwarp_box, warp_box, Detection, WarpRecord};
use crate::image_data::{crop, hflip, hsv_to_rgb, quantize, resize_bilinear, rgb_to_hsv, ImageArray};
use crate::rng::{stream, StreamRole};

/// Channel permutations in lexicographic order; sampled uniformly.
const CHANNEL_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Crop target width; the crop height follows the source aspect ratio.
    pub base_width: usize,
    /// Uniform rescale factor range.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Probability that each photometric stage fires.
    pub stage_prob: f64,
    /// Brightness shift sampled from `[-delta, delta]` (pixel units).
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Hue rotation sampled from `[-delta, delta]` degrees.
    pub hue_delta: f64,
    pub teacher_geometric: bool,
    pub student_photometric: bool,
    pub contrastive_geometric: bool,
    pub contrastive_photometric: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            base_width: 128,
            scale_range: (0.8, 1.2),
            flip_prob: 0.5,
            stage_prob: 0.5,
            brightness_delta: 32.0,
            contrast_range: (0.5, 1.5),
            saturation_range: (0.5, 1.5),
            hue_delta: 18.0,
            teacher_geometric: true,
            student_photometric: true,
            contrastive_geometric: true,
            contrastive_photometric: true,
        }
    }
}

/// Sampled parameters of one photometric pipeline pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub apply_brightness: bool,
    pub brightness_delta: f64,
    pub apply_contrast: bool,
    /// True: contrast runs in the early slot (before HSV); false: late slot.
    pub contrast_early: bool,
    pub contrast_factor: f64,
    pub apply_saturation: bool,
    pub saturation_factor: f64,
    pub apply_hue: bool,
    pub hue_delta: f64,
    pub apply_channel_swap: bool,
    pub channel_perm: [usize; 3],
}

impl PhotometricParams {
    pub fn identity() -> Self {
        PhotometricParams {
            apply_brightness: false,
            brightness_delta: 0.0,
            apply_contrast: false,
            contrast_early: true,
            contrast_factor: 1.0,
            apply_saturation: false,
            saturation_factor: 1.0,
            apply_hue: false,
            hue_delta: 0.0,
            apply_channel_swap: false,
            channel_perm: [0, 1, 2],
        }
    }

    fn needs_hsv(&self) -> bool {
        self.apply_saturation || self.apply_hue
    }
}

/// The three views of one frame plus everything needed to relate their
/// coordinate systems and to reproduce them.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub teacher: ImageArray,
    pub student: ImageArray,
    pub contrastive: ImageArray,
    pub warp_teacher: WarpRecord,
    pub warp_contrastive: WarpRecord,
    pub photo_student: PhotometricParams,
    pub photo_contrastive: PhotometricParams,
    pub seed: u64,
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Round to the nearest positive multiple of `step`.
fn round_to_multiple(v: f64, step: usize) -> usize {
    let k = (v / step as f64).round() as usize;
    k.max(1) * step
}

/// Sample a scale/flip/crop warp whose output dimensions are multiples of
/// `stride` (the detector's encoder stride) and whose crop caps the output at
/// `base_width` wide, aspect-matched height.
pub fn sample_geometric(
    rng: &mut impl Rng,
    src_w: usize,
    src_h: usize,
    cfg: &AugConfig,
    stride: usize,
) -> WarpRecord {
    let s = uniform(rng, cfg.scale_range);
    let scaled_w = round_to_multiple(src_w as f64 * s, stride);
    let scaled_h = round_to_multiple(src_h as f64 * s, stride);
    let flip = rng.random_range(0.0..1.0) < cfg.flip_prob;
    let cap_w = round_to_multiple(cfg.base_width as f64, stride);
    let cap_h = round_to_multiple(cfg.base_width as f64 * src_h as f64 / src_w as f64, stride);
    let out_w = scaled_w.min(cap_w);
    let out_h = scaled_h.min(cap_h);
    let crop_x = rng.random_range(0..=(scaled_w - out_w));
    let crop_y = rng.random_range(0..=(scaled_h - out_h));
    WarpRecord {
        src_w,
        src_h,
        scaled_w,
        scaled_h,
        flip,
        crop_x,
        crop_y,
        out_w,
        out_h,
    }
}

/// Sample one photometric pass. Draw order is fixed; every branch draws the
/// same number of values so flag outcomes never shift later parameters.
pub fn sample_photometric(rng: &mut impl Rng, cfg: &AugConfig) -> PhotometricParams {
    let apply_brightness = rng.random_range(0.0..1.0) < cfg.stage_prob;
    let brightness_delta = uniform(rng, (-cfg.brightness_delta, cfg.brightness_delta));
    let apply_contrast = rng.random_range(0.0..1.0) < cfg.stage_prob;
    let contrast_early = rng.random_range(0.0..1.0) < 0.5;
    let contrast_factor = uniform(rng, cfg.contrast_range);
    let apply_saturation = rng.random_range(0.0..1.0) < cfg.stage_prob;
    let saturation_factor = uniform(rng, cfg.saturation_range);
    let apply_hue = rng.random_range(0.0..1.0) < cfg.stage_prob;
    let hue_delta = uniform(rng, (-cfg.hue_delta, cfg.hue_delta));
    let apply_channel_swap = rng.random_range(0.0..1.0) < cfg.stage_prob;
    let channel_perm = CHANNEL_PERMS[rng.random_range(0..CHANNEL_PERMS.len())];
    PhotometricParams {
        apply_brightness,
        brightness_delta,
        apply_contrast,
        contrast_early,
        contrast_factor,
        apply_saturation,
        saturation_factor,
        apply_hue,
        hue_delta,
        apply_channel_swap,
        channel_perm,
    }
}

/// Run the photometric pipeline. Float in, float out; the caller quantizes.
pub fn apply_photometric(img: &ImageArray, p: &PhotometricParams) -> ImageArray {
    let (h, w, _) = img.dim();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut px = [out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]];
            if p.apply_brightness {
                for v in &mut px {
                    *v += p.brightness_delta;
                }
            }
            if p.apply_contrast && p.contrast_early {
                for v in &mut px {
                    *v *= p.contrast_factor;
                }
            }
            if p.needs_hsv() {
                let (mut hh, mut ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
                if p.apply_saturation {
                    ss *= p.saturation_factor;
                }
                if p.apply_hue {
                    hh += p.hue_delta;
                }
                let (r, g, b) = hsv_to_rgb(hh, ss, vv);
                px = [r, g, b];
            }
            if p.apply_contrast && !p.contrast_early {
                for v in &mut px {
                    *v *= p.contrast_factor;
                }
            }
            if p.apply_channel_swap {
                px = [px[p.channel_perm[0]], px[p.channel_perm[1]], px[p.channel_perm[2]]];
            }
            for c in 0..3 {
                out[[y, x, c]] = px[c];
            }
        }
    }
    out
}

/// Apply a geometric warp to pixels: bilinear rescale, optional horizontal
/// flip, then crop. Float in, float out.
pub fn warp_image(img: &ImageArray, w: &WarpRecord) -> Result<ImageArray> {
    let mut out = resize_bilinear(img, w.scaled_h, w.scaled_w);
    if w.flip {
        out = hflip(&out);
    }
    crop(&out, w.crop_x, w.crop_y, w.out_w, w.out_h)
}

/// Build the three views of `img` for one frame. `seed` should already
/// encode the frame index (see [`crate::rng::derive_seed`]); within the
/// bundle, streams are separated by role.
pub fn make_views(img: &ImageArray, seed: u64, cfg: &AugConfig, stride: usize) -> Result<ViewBundle> {
    let (h, w, _) = img.dim();
    let warp_teacher = if cfg.teacher_geometric {
        let mut rng = stream(seed, 0, StreamRole::TeacherGeometry);
        sample_geometric(&mut rng, w, h, cfg, stride)
    } else {
        WarpRecord::identity(w, h)
    };
    let warp_contrastive = if cfg.contrastive_geometric {
        let mut rng = stream(seed, 0, StreamRole::ContrastiveGeometry);
        sample_geometric(&mut rng, w, h, cfg, stride)
    } else {
        WarpRecord::identity(w, h)
    };
    let photo_student = if cfg.student_photometric {
        let mut rng = stream(seed, 0, StreamRole::StudentPhotometric);
        sample_photometric(&mut rng, cfg)
    } else {
        PhotometricParams::identity()
    };
    let photo_contrastive = if cfg.contrastive_photometric {
        let mut rng = stream(seed, 0, StreamRole::ContrastivePhotometric);
        sample_photometric(&mut rng, cfg)
    } else {
        PhotometricParams::identity()
    };

    let teacher = quantize(&warp_image(img, &warp_teacher)?);
    let student = quantize(&apply_photometric(&teacher, &photo_student));
    let contrastive = quantize(&apply_photometric(
        &warp_image(img, &warp_contrastive)?,
        &photo_contrastive,
    ));
    Ok(ViewBundle {
        teacher,
        student,
        contrastive,
        warp_teacher,
        warp_contrastive,
        photo_student,
        photo_contrastive,
        seed,
    })
}

/// Re-express detections given in `from` view coordinates in `to` view
/// coordinates. Boxes are clipped to the target window; degenerate results
/// are dropped.
pub fn map_detections(dets: &[Detection], from: &WarpRecord, to: &WarpRecord) -> Vec<Detection> {
    dets.iter()
        .filter_map(|d| {
            let src = unwarp_box(&d.bbox, from);
            let mapped = warp_box(&src, to).clip(to.out_w as f64, to.out_h as f64);
            if mapped.is_degenerate() {
                None
            } else {
                Some(Detection { bbox: mapped, ..*d })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use ndarray::Array3;

    fn test_image(h: usize, w: usize) -> ImageArray {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            ((y * 37 + x * 11 + c * 71) % 256) as f64
        })
    }

    fn disabled() -> AugConfig {
        AugConfig {
            teacher_geometric: false,
            student_photometric: false,
            contrastive_geometric: false,
            contrastive_photometric: false,
            ..AugConfig::default()
        }
    }

    #[test]
    fn disabled_config_returns_input_unchanged() {
        let img = test_image(48, 64);
        let b = make_views(&img, 9, &disabled(), 8).unwrap();
        assert_eq!(b.teacher, img);
        assert_eq!(b.student, img);
        assert_eq!(b.contrastive, img);
        assert!(b.warp_teacher.is_identity());
        assert!(b.warp_contrastive.is_identity());
    }

    #[test]
    fn same_seed_reproduces_bundle() {
        let img = test_image(96, 128);
        let cfg = AugConfig::default();
        let a = make_views(&img, 1234, &cfg, 8).unwrap();
        let b = make_views(&img, 1234, &cfg, 8).unwrap();
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.student, b.student);
        assert_eq!(a.contrastive, b.contrastive);
        assert_eq!(a.warp_teacher, b.warp_teacher);
        assert_eq!(a.warp_contrastive, b.warp_contrastive);
        assert_eq!(a.photo_student, b.photo_student);
        assert_eq!(a.photo_contrastive, b.photo_contrastive);
    }

    #[test]
    fn student_shares_teacher_geometry() {
        let img = test_image(96, 128);
        let cfg = AugConfig::default();
        for seed in 0..20 {
            let b = make_views(&img, seed, &cfg, 8).unwrap();
            assert_eq!(b.teacher.dim(), b.student.dim());
        }
    }

    #[test]
    fn nearby_seeds_give_distinct_contrastive_warps() {
        let img = test_image(96, 128);
        let cfg = AugConfig::default();
        let mut differing = 0;
        for seed in 0..100u64 {
            let a = make_views(&img, seed, &cfg, 8).unwrap();
            let b = make_views(&img, seed + 1, &cfg, 8).unwrap();
            if a.warp_contrastive != b.warp_contrastive {
                differing += 1;
            }
        }
        assert!(differing >= 50, "only {differing}/100 seed pairs differed");
    }

    #[test]
    fn warp_outputs_multiple_of_stride() {
        let img = test_image(96, 128);
        let cfg = AugConfig::default();
        for seed in 0..50 {
            let b = make_views(&img, seed, &cfg, 8).unwrap();
            for w in [&b.warp_teacher, &b.warp_contrastive] {
                assert_eq!(w.out_w % 8, 0);
                assert_eq!(w.out_h % 8, 0);
                assert!(w.out_w <= 128);
                assert_eq!(b.teacher.dim().0, b.warp_teacher.out_h);
            }
        }
    }

    #[test]
    fn hue_rotation_moves_red_toward_green() {
        let mut img = Array3::zeros((2, 2, 3));
        for y in 0..2 {
            for x in 0..2 {
                img[[y, x, 0]] = 200.0;
            }
        }
        let p = PhotometricParams {
            apply_hue: true,
            hue_delta: 120.0,
            ..PhotometricParams::identity()
        };
        let out = quantize(&apply_photometric(&img, &p));
        assert_eq!(out[[0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 1]], 200.0);
        assert_eq!(out[[0, 0, 2]], 0.0);
    }

    #[test]
    fn contrast_slot_changes_composition_with_brightness() {
        let img = test_image(4, 4);
        let base = PhotometricParams {
            apply_brightness: true,
            brightness_delta: 20.0,
            apply_contrast: true,
            contrast_factor: 1.5,
            apply_saturation: true,
            saturation_factor: 0.7,
            ..PhotometricParams::identity()
        };
        let early = apply_photometric(&img, &PhotometricParams { contrast_early: true, ..base });
        let late = apply_photometric(&img, &PhotometricParams { contrast_early: false, ..base });
        assert_ne!(early, late);
    }

    #[test]
    fn channel_swap_permutes_exactly() {
        let img = test_image(3, 3);
        let p = PhotometricParams {
            apply_channel_swap: true,
            channel_perm: [2, 0, 1],
            ..PhotometricParams::identity()
        };
        let out = apply_photometric(&img, &p);
        assert_eq!(out[[1, 2, 0]], img[[1, 2, 2]]);
        assert_eq!(out[[1, 2, 1]], img[[1, 2, 0]]);
        assert_eq!(out[[1, 2, 2]], img[[1, 2, 1]]);
    }

    #[test]
    fn map_detections_round_trips_between_views() {
        let img = test_image(96, 128);
        let cfg = AugConfig::default();
        let b = make_views(&img, 77, &cfg, 8).unwrap();
        let det = Detection {
            bbox: BoundingBox::new(40.0, 30.0, 60.0, 50.0),
            score: 0.9,
            class: 1,
        };
        // Teacher -> contrastive -> teacher is identity when no clipping bites.
        let in_c = map_detections(&[det], &b.warp_teacher, &b.warp_contrastive);
        if in_c.len() == 1 {
            let back = map_detections(&in_c, &b.warp_contrastive, &b.warp_teacher);
            if back.len() == 1 {
                let r = back[0].bbox;
                let clipped = det
                    .bbox
                    .clip(b.warp_teacher.out_w as f64, b.warp_teacher.out_h as f64);
                assert!((r.x1 - clipped.x1).abs() < 1e-6 || r.x1 == 0.0);
                assert!((r.y1 - clipped.y1).abs() < 1e-6 || r.y1 == 0.0);
            }
        }
    }
}
