use std::sync::OnceLock;

use bicap_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;

use crate::error::{param, Result};

fn dims(image: &Tensor<f32>) -> (usize, usize) {
    (image.shape()[1], image.shape()[2])
}

/// Bilinear resample of the `[y0, y0+h) × [x0, x0+w)` window to `out_h × out_w`,
/// with half-pixel centers and edge clamping.
pub fn resize_window(
    image: &Tensor<f32>,
    (y0, x0, h, w): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Tensor<f32> {
    let (ih, iw) = dims(image);
    let src = image.data();
    let axis = |out: usize, len: usize, start: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (start + lo, start + hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h, y0);
    let xs = axis(out_w, w, x0);
    let mut out = vec![0f32; 3 * out_h * out_w];
    for c in 0..3 {
        let plane = &src[c * ih * iw..(c + 1) * ih * iw];
        for (oy, &(y_lo, y_hi, fy)) in ys.iter().enumerate() {
            for (ox, &(x_lo, x_hi, fx)) in xs.iter().enumerate() {
                let top = plane[y_lo * iw + x_lo] * (1.0 - fx) + plane[y_lo * iw + x_hi] * fx;
                let bot = plane[y_hi * iw + x_lo] * (1.0 - fx) + plane[y_hi * iw + x_hi] * fx;
                out[c * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[3, out_h, out_w], out).expect("resize shape")
}

pub fn resize(image: &Tensor<f32>, out: usize) -> Tensor<f32> {
    let (h, w) = dims(image);
    resize_window(image, (0, 0, h, w), out, out)
}

/// The crop window actually used, for inspection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

const MIN_ASPECT: f64 = 3.0 / 4.0;
const MAX_ASPECT: f64 = 4.0 / 3.0;

pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale_min: f64,
    scale_max: f64,
    rng: &mut R,
) -> Result<CropWindow> {
    if height * width < 2 {
        return Err(param("random_resized_crop", "image must be larger than 1x1"));
    }
    if !(0.0 < scale_min && scale_min <= scale_max && scale_max <= 1.0) {
        return Err(param("random_resized_crop", format!("scale range [{scale_min}, {scale_max}]")));
    }
    let (hf, wf) = (height as f64, width as f64);
    let area = hf * wf;
    for _ in 0..10 {
        let s = if scale_min == scale_max { scale_min } else { rng.gen_range(scale_min..=scale_max) };
        // aspect range that keeps a crop of area s·A inside the image
        let lo = (s * wf / hf).max(MIN_ASPECT);
        let hi = (wf / (s * hf)).min(MAX_ASPECT);
        if lo > hi {
            continue;
        }
        let r = if lo == hi { lo } else { rng.gen_range(lo.ln()..=hi.ln()).exp() };
        let w = ((s * area * r).sqrt().round() as usize).clamp(1, width);
        let h = ((s * area / r).sqrt().round() as usize).clamp(1, height);
        let y = rng.gen_range(0..=height - h);
        let x = rng.gen_range(0..=width - w);
        return Ok(CropWindow { y, x, h, w });
    }
    // center crop at the nearest admissible aspect ratio
    let aspect = (wf / hf).clamp(MIN_ASPECT, MAX_ASPECT);
    let (h, w) = if wf / hf > aspect {
        (height, ((hf * aspect).round() as usize).clamp(1, width))
    } else {
        (((wf / aspect).round() as usize).clamp(1, height), width)
    };
    Ok(CropWindow { y: (height - h) / 2, x: (width - w) / 2, h, w })
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    scale_min: f64,
    scale_max: f64,
    out: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (h, w) = dims(image);
    let c = sample_crop(h, w, scale_min, scale_max, rng)?;
    Ok(resize_window(image, (c.y, c.x, c.h, c.w), out, out))
}

fn clamp01(v: &mut [f32]) {
    v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(image: &mut Tensor<f32>, factor: f32) {
    let d = image.data_mut();
    d.iter_mut().for_each(|x| *x *= factor);
    clamp01(d);
}

/// Blends with the mean gray level of the image.
pub fn adjust_contrast(image: &mut Tensor<f32>, factor: f32) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    let mean = (0..n).map(|i| gray(d[i], d[n + i], d[2 * n + i])).sum::<f32>() / n as f32;
    d.iter_mut().for_each(|x| *x = factor * *x + (1.0 - factor) * mean);
    clamp01(d);
}

/// Blends each pixel with its own gray level.
pub fn adjust_saturation(image: &mut Tensor<f32>, factor: f32) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    for i in 0..n {
        let g = gray(d[i], d[n + i], d[2 * n + i]);
        for c in 0..3 {
            d[c * n + i] = factor * d[c * n + i] + (1.0 - factor) * g;
        }
    }
    clamp01(d);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(image: &mut Tensor<f32>, shift: f32) {
    let n = image.numel() / 3;
    let d = image.data_mut();
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[i] = r;
        d[n + i] = g;
        d[2 * n + i] = b;
    }
    clamp01(d);
}

pub fn color_jitter<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue: f64,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || !(0.0..=0.5).contains(&hue) {
        return Err(param(
            "color_jitter",
            format!("ranges must be non-negative (hue at most 0.5): {brightness} {contrast} {saturation} {hue}"),
        ));
    }
    let factor = |m: f64, rng: &mut R| -> f32 {
        if m == 0.0 {
            1.0
        } else {
            rng.gen_range((1.0 - m).max(0.0)..=1.0 + m) as f32
        }
    };
    let b = factor(brightness, rng);
    let c = factor(contrast, rng);
    let s = factor(saturation, rng);
    let h = if hue == 0.0 { 0.0 } else { rng.gen_range(-hue..=hue) as f32 };
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    let mut out = image.clone();
    for op in order {
        match op {
            0 if b != 1.0 => adjust_brightness(&mut out, b),
            1 if c != 1.0 => adjust_contrast(&mut out, c),
            2 if s != 1.0 => adjust_saturation(&mut out, s),
            3 if h != 0.0 => adjust_hue(&mut out, h),
            _ => {}
        }
    }
    Ok(out)
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks(w) {
        out.extend(row.iter().rev());
    }
    debug_assert_eq!(out.len(), 3 * h * w);
    Tensor::new(image.shape(), out).expect("same shape")
}

fn left_right() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(left|right)\b").expect("valid regex"))
}

/// Exchanges whole-word "left" and "right", keeping the letter case pattern.
pub fn swap_left_right(text: &str) -> String {
    left_right()
        .replace_all(text, |caps: &regex::Captures| {
            let word = &caps[0];
            let target = if word.eq_ignore_ascii_case("left") { "right" } else { "left" };
            if word.chars().all(|c| c.is_uppercase()) {
                target.to_uppercase()
            } else if word.chars().next().is_some_and(char::is_uppercase) {
                let mut s = target.to_string();
                s[..1].make_ascii_uppercase();
                s
            } else {
                target.to_string()
            }
        })
        .into_owned()
}

pub fn hflip_with_caption_swap<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    caption: &str,
    rng: &mut R,
    p: f64,
) -> (Tensor<f32>, String) {
    if p > 0.0 && rng.gen_bool(p.min(1.0)) {
        (hflip(image), swap_left_right(caption))
    } else {
        (image.clone(), caption.to_string())
    }
}

pub fn normalize_image(image: &Tensor<f32>, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<f32>> {
    if std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(param("normalize_image", format!("std {std:?} must be non-zero")));
    }
    let plane = image.numel() / 3;
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        chunk.iter_mut().for_each(|x| *x = (*x - m) / s);
    }
    Ok(out)
}
