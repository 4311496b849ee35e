//! Synthetic benchmark generator: labeled videos of colored shapes moving
//! over a flat background, with a parametric photometric "domain".
//!
//! A scene is a set of objects, each a circle, square or triangle whose
//! center follows a linear-plus-sinusoidal trajectory reflected at the frame
//! walls so that at least half of every shape stays in frame at all times.
//! Shape type doubles as the class label. A [`DomainStyle`] controls only
//! photometric appearance (background brightness, palette, hue rotation,
//! blur, sensor noise), so two datasets rendered from the same [`SceneSpec`]
//! differ purely by covariate shift: the label space and geometry are shared.
//!
//! Ground-truth boxes are the tight pixel extents of each shape's own raster,
//! so evaluating the ground truth against itself scores perfectly. Identities
//! are stable for the whole sequence, including frames where a later-drawn
//! object paints over an earlier one; the `vis` column records the fraction
//! of a shape's pixels that survived overpainting.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image_data::{hsv_to_rgb, load_png, quantize, rgb_to_hsv, save_png, ImageArray};
use crate::motio::{read_mot_csv, write_mot_csv, TrackedBox, TrackingResult};
use crate::rng::{stream, StreamRole};
use crate::video::VideoSet;

/// Photometric rendering parameters; everything that differs between a
/// "source" and a "target" domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainStyle {
    /// Flat background gray level in `[0, 255]`.
    pub background_intensity: f64,
    /// Standard deviation of per-pixel Gaussian sensor noise, in intensity
    /// units; 0 disables noise.
    pub noise_sigma: f64,
    /// Hue rotation applied to the whole frame, in degrees.
    pub global_hue_shift: f64,
    /// Object fill colors as RGB triples in `[0, 255]`; objects cycle
    /// through the palette. Must be nonempty.
    pub object_palette: Vec<[f64; 3]>,
    /// Box-blur radius in pixels; values below 1 disable blur.
    pub blur_radius: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        DomainStyle::source()
    }
}

impl DomainStyle {
    /// Bright, clean imaging conditions: the pretraining domain.
    pub fn source() -> Self {
        DomainStyle {
            background_intensity: 215.0,
            noise_sigma: 0.0,
            global_hue_shift: 0.0,
            object_palette: default_palette(),
            blur_radius: 0.0,
        }
    }

    /// Dark, noisy, hue-rotated conditions: the default adaptation target.
    /// Severe enough that an unadapted source model degrades hard, while a
    /// teacher still finds an occasional confident detection to boot from.
    pub fn target() -> Self {
        DomainStyle {
            background_intensity: 125.0,
            noise_sigma: 20.0,
            global_hue_shift: 60.0,
            object_palette: default_palette(),
            blur_radius: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=255.0).contains(&self.background_intensity) {
            return Err(Error::InvalidConfig(format!(
                "background_intensity {} outside [0, 255]",
                self.background_intensity
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        if self.object_palette.is_empty() {
            return Err(Error::InvalidConfig("object_palette must be nonempty".into()));
        }
        Ok(())
    }
}

fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [205.0, 55.0, 45.0],
        [55.0, 170.0, 70.0],
        [55.0, 90.0, 205.0],
        [215.0, 185.0, 40.0],
        [170.0, 60.0, 185.0],
    ]
}

/// The three shape types; the discriminant is the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn class(self) -> u32 {
        match self {
            Shape::Circle => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
        }
    }
}

/// Per-axis trajectory `base + velocity·t + amplitude·sin(2π·frequency·t + phase)`,
/// folded back into the frame by reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub base: [f64; 2],
    pub velocity: [f64; 2],
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Half-extent in pixels: circle radius, half square side, half triangle
    /// base and height.
    pub half_extent: f64,
    /// Index into the style palette (reduced modulo palette length).
    pub palette_index: usize,
    pub motion: MotionParams,
}

/// Geometry of one video: everything except photometric style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    /// Sample a random scene. Object sizes are chosen so trajectories can be
    /// folded into a margin that keeps at least half of every shape in frame.
    pub fn sample(
        num_objects: usize,
        num_frames: usize,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, 0, StreamRole::SceneLayout);
        let min_side = width.min(height) as f64;
        let h_max = (min_side / 6.0).max(5.0);
        let h_min = (min_side / 7.0).clamp(5.0, h_max);
        let objects = (0..num_objects)
            .map(|i| {
                let shape = match i % 3 {
                    0 => Shape::Circle,
                    1 => Shape::Square,
                    _ => Shape::Triangle,
                };
                let half_extent = rng.random_range(h_min..=h_max);
                let lo_x = margin(half_extent);
                let hi_x = (width as f64 - 1.0) - margin(half_extent);
                let lo_y = margin(half_extent);
                let hi_y = (height as f64 - 1.0) - margin(half_extent);
                ObjectSpec {
                    shape,
                    half_extent,
                    palette_index: rng.random_range(0..5),
                    motion: MotionParams {
                        base: [rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y)],
                        velocity: [rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0)],
                        amplitude: [rng.random_range(0.0..=6.0), rng.random_range(0.0..=6.0)],
                        frequency: [
                            rng.random_range(0.02..=0.15),
                            rng.random_range(0.02..=0.15),
                        ],
                        phase: [
                            rng.random_range(0.0..std::f64::consts::TAU),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ],
                    },
                }
            })
            .collect();
        SceneSpec { width, height, num_frames, seed, objects }
    }
}

/// Minimum distance from a shape center to each frame edge. At 0.75 of the
/// half-extent, at most a quarter of the extent can overhang an edge, which
/// keeps well over half of every shape's pixels in frame even when clipped at
/// a corner.
fn margin(half_extent: f64) -> f64 {
    0.75 * half_extent
}

/// Reflect `x` into `[lo, hi]` (triangle-wave fold), modelling a bounce off
/// the frame walls.
fn fold_into(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return 0.5 * (lo + hi);
    }
    let period = 2.0 * span;
    let mut y = (x - lo).rem_euclid(period);
    if y > span {
        y = period - y;
    }
    lo + y
}

/// Shape center at frame `t`, guaranteed inside the folding margin.
pub fn center_at(obj: &ObjectSpec, t: usize, width: usize, height: usize) -> (f64, f64) {
    let m = &obj.motion;
    let tt = t as f64;
    let raw = |axis: usize| {
        m.base[axis]
            + m.velocity[axis] * tt
            + m.amplitude[axis] * (std::f64::consts::TAU * m.frequency[axis] * tt + m.phase[axis]).sin()
    };
    let mg = margin(obj.half_extent);
    (
        fold_into(raw(0), mg, (width as f64 - 1.0) - mg),
        fold_into(raw(1), mg, (height as f64 - 1.0) - mg),
    )
}

/// Pixel-center membership test for a shape centered at `(cx, cy)`.
fn inside(shape: Shape, h: f64, cx: f64, cy: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= h * h,
        Shape::Square => dx.abs() <= h && dy.abs() <= h,
        // Apex-up isoceles triangle: apex at cy - h, base at cy + h, the
        // half-width grows linearly from 0 at the apex to h at the base.
        Shape::Triangle => {
            dy.abs() <= h && dx.abs() <= h * ((dy + h) / (2.0 * h))
        }
    }
}

struct RenderedObject {
    /// Pixels of this shape's own raster, regardless of later overpainting.
    own_pixels: Vec<(usize, usize)>,
}

/// Render one frame: paint objects in index order (later objects occlude
/// earlier ones), then apply hue shift, blur and noise, then quantize.
/// Returns the frame and its ground-truth rows.
pub fn render_frame(spec: &SceneSpec, style: &DomainStyle, t: usize) -> (ImageArray, Vec<TrackedBox>) {
    let (w, hgt) = (spec.width, spec.height);
    let bg = style.background_intensity;
    let mut img = Array3::from_elem((hgt, w, 3), bg);
    // Owner of each painted pixel; usize::MAX marks background.
    let mut owner = vec![usize::MAX; hgt * w];
    let mut rendered = Vec::with_capacity(spec.objects.len());

    for (i, obj) in spec.objects.iter().enumerate() {
        let (cx, cy) = center_at(obj, t, w, hgt);
        let color = style.object_palette[obj.palette_index % style.object_palette.len()];
        let h = obj.half_extent;
        let x_lo = ((cx - h).floor().max(0.0)) as usize;
        let x_hi = ((cx + h).ceil() as usize).min(w.saturating_sub(1));
        let y_lo = ((cy - h).floor().max(0.0)) as usize;
        let y_hi = ((cy + h).ceil() as usize).min(hgt.saturating_sub(1));
        let mut own_pixels = Vec::new();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if inside(obj.shape, h, cx, cy, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img[[y, x, c]] = color[c];
                    }
                    owner[y * w + x] = i;
                    own_pixels.push((x, y));
                }
            }
        }
        rendered.push(RenderedObject { own_pixels });
    }

    let mut rows = Vec::new();
    for (i, ro) in rendered.iter().enumerate() {
        if ro.own_pixels.is_empty() {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut visible = 0usize;
        for &(x, y) in &ro.own_pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            if owner[y * w + x] == i {
                visible += 1;
            }
        }
        rows.push(TrackedBox {
            frame: t + 1,
            id: i as u64 + 1,
            bbox: BoundingBox {
                x1: x0 as f64,
                y1: y0 as f64,
                x2: (x1 + 1) as f64,
                y2: (y1 + 1) as f64,
            },
            conf: 1.0,
            class: spec.objects[i].shape.class(),
            vis: visible as f64 / ro.own_pixels.len() as f64,
        });
    }

    if style.global_hue_shift != 0.0 {
        for y in 0..hgt {
            for x in 0..w {
                let (hh, s, v) =
                    rgb_to_hsv(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
                let (r, g, b) = hsv_to_rgb(hh + style.global_hue_shift, s, v);
                img[[y, x, 0]] = r;
                img[[y, x, 1]] = g;
                img[[y, x, 2]] = b;
            }
        }
    }
    let radius = style.blur_radius.floor() as usize;
    if radius >= 1 {
        img = box_blur(&img, radius);
    }
    if style.noise_sigma > 0.0 {
        let mut rng = stream(spec.seed, t as u64, StreamRole::FrameNoise);
        let normal = Normal::new(0.0, style.noise_sigma).expect("sigma validated nonnegative");
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    (quantize(&img), rows)
}

/// Separable box blur with edge clamping.
fn box_blur(img: &ImageArray, radius: usize) -> ImageArray {
    let (h, w, _) = img.dim();
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xs = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += img[[y, xs, c]];
                }
                tmp[[y, x, c]] = acc * norm;
            }
        }
    }
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for d in -r..=r {
                    let ys = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += tmp[[ys, x, c]];
                }
                out[[y, x, c]] = acc * norm;
            }
        }
    }
    out
}

/// Render the full sequence. Frames are independent given the per-frame
/// noise stream, so they render in parallel; output order is by frame index.
pub fn generate(spec: &SceneSpec, style: &DomainStyle) -> Result<(VideoSet, TrackingResult)> {
    style.validate()?;
    crate::init_parallelism();
    let per_frame: Vec<(ImageArray, Vec<TrackedBox>)> = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| render_frame(spec, style, t))
        .collect();
    let mut frames = Vec::with_capacity(per_frame.len());
    let mut rows = Vec::new();
    for (img, r) in per_frame {
        frames.push(img);
        rows.extend(r);
    }
    let video = VideoSet { name: format!("scene-{:08x}", spec.seed), frames };
    Ok((video, TrackingResult::new(rows)))
}

/// Severity of the photometric gap between two styles: a weighted L1
/// distance over the style parameters. Zero exactly when the styles are
/// identical; symmetric; grows with every coordinate gap. Hue distance is
/// circular (359° and 1° are 2° apart).
pub fn shift_magnitude(a: &DomainStyle, b: &DomainStyle) -> f64 {
    let hue_gap = {
        let d = (a.global_hue_shift - b.global_hue_shift).rem_euclid(360.0);
        d.min(360.0 - d)
    };
    let (la, lb) = (a.object_palette.len(), b.object_palette.len());
    let max_len = la.max(lb).max(1);
    let mut palette_gap = 0.0;
    if la > 0 && lb > 0 {
        for i in 0..max_len {
            let ca = a.object_palette[i % la];
            let cb = b.object_palette[i % lb];
            palette_gap += (0..3).map(|c| (ca[c] - cb[c]).abs()).sum::<f64>();
        }
        palette_gap /= (max_len * 3) as f64;
    }
    (a.background_intensity - b.background_intensity).abs() / 255.0
        + (a.noise_sigma - b.noise_sigma).abs() / 50.0
        + hue_gap / 180.0
        + palette_gap / 255.0
        + (a.blur_radius - b.blur_radius).abs() / 4.0
        + 0.5 * (la.abs_diff(lb) as f64)
}

/// Everything needed to regenerate or interpret a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub spec: SceneSpec,
    pub style: DomainStyle,
}

/// Layout: `dir/frames/000001.png …`, `dir/gt.csv`, `dir/manifest.json`.
pub fn write_dataset(
    dir: &Path,
    video: &VideoSet,
    gt: &TrackingResult,
    manifest: &DatasetManifest,
) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (i, frame) in video.frames.iter().enumerate() {
        save_png(&frames_dir.join(format!("{:06}.png", i + 1)), frame)?;
    }
    write_mot_csv(&dir.join("gt.csv"), gt)?;
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, &text)?;
    std::fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(VideoSet, TrackingResult, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let frames_dir = dir.join("frames");
    let mut paths: Vec<_> = std::fs::read_dir(&frames_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    let frames = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
    let gt = read_mot_csv(&dir.join("gt.csv"))?;
    Ok((VideoSet { name: manifest.name.clone(), frames }, gt, manifest))
}
