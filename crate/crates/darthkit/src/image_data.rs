//! Image container and pixel-level primitives.
//!
//! Images are `Array3<f64>` of shape `(height, width, 3)` holding RGB values
//! in the continuous range `[0, 255]`. Augmentation pipelines stay in float
//! the whole way through and quantize (round, clamp) exactly once when an
//! image leaves the pipeline; [`save_png`] quantizes implicitly.

use ndarray::Array3;
use std::path::Path;

use crate::error::{Error, Result};

pub type ImageArray = Array3<f64>;

pub fn load_png(path: &Path) -> Result<ImageArray> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = p.0[c] as f64;
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &ImageArray) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::shape("save_png", "(h, w, 3)", format!("({h}, {w}, {c})")));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| img[[y as usize, x as usize, ch]].round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Round and clamp every channel to `[0, 255]`, still as f64.
pub fn quantize(img: &ImageArray) -> ImageArray {
    img.mapv(|v| v.round().clamp(0.0, 255.0))
}

/// Bilinear resample with pixel-center alignment: output pixel `i` samples
/// source coordinate `(i + 0.5) * src / out - 0.5`, clamped to the frame.
pub fn resize_bilinear(img: &ImageArray, out_h: usize, out_w: usize) -> ImageArray {
    let (src_h, src_w, _) = img.dim();
    if (out_h, out_w) == (src_h, src_w) {
        return img.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, 3));
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * src_h as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * src_w as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
                let bot = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
                out[[oy, ox, c]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn hflip(img: &ImageArray) -> ImageArray {
    let (h, w, _) = img.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = img[[y, w - 1 - x, c]];
            }
        }
    }
    out
}

/// Extract the window `[y, y + out_h) x [x, x + out_w)`. The window must lie
/// inside the image.
pub fn crop(img: &ImageArray, x: usize, y: usize, out_w: usize, out_h: usize) -> Result<ImageArray> {
    let (h, w, _) = img.dim();
    if x + out_w > w || y + out_h > h {
        return Err(Error::shape(
            "crop",
            format!("window inside ({h}, {w})"),
            format!("origin ({y}, {x}), size ({out_h}, {out_w})"),
        ));
    }
    Ok(img
        .slice(ndarray::s![y..y + out_h, x..x + out_w, ..])
        .to_owned())
}

/// RGB in `[0, 255]` to HSV with hue in degrees `[0, 360)` and s, v in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

/// Inverse of [`rgb_to_hsv`]; returns RGB in `[0, 255]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    ((r1 + m) * 255.0, (g1 + m) * 255.0, (b1 + m) * 255.0)
}
