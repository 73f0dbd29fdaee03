//! Per-token cross-attention maps and their image overlays.

use std::path::{Path, PathBuf};

use bicap_tensor::{Element, Tensor};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::ImageEncoder;

use crate::decode::{encode, forward_logits};
use crate::error::{io, param, Error, Result};
use crate::model::Model;
use crate::tokenizer::{Vocabulary, MARKER, SOS};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// 0-based index of the emitted token.
    pub step: usize,
    pub token: usize,
    pub grid: usize,
    /// `[A][G·G]`.
    pub heads: Vec<Vec<f64>>,
    /// Head average, `[G·G]`.
    pub mean: Vec<f64>,
    pub side: usize,
    /// Upsampled and min-max normalized, `[S·S]` in `[0, 1]`.
    pub overlay: Vec<f64>,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resize of a square `g × g` map to `s × s`, half-pixel centers,
/// edges clamped.
pub fn bicubic_upsample(map: &[f64], g: usize, s: usize) -> Vec<f64> {
    assert_eq!(map.len(), g * g, "map is not g × g");
    let scale = g as f64 / s as f64;
    let taps: Vec<[(usize, f64); 4]> = (0..s)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let mut t = [(0, 0.0); 4];
            for (j, tap) in t.iter_mut().enumerate() {
                let i = base as i64 - 1 + j as i64;
                *tap = (i.clamp(0, g as i64 - 1) as usize, cubic(src - i as f64));
            }
            t
        })
        .collect();
    let mut out = vec![0.0; s * s];
    for (y, ty) in taps.iter().enumerate() {
        for (x, tx) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(iy, wy) in ty {
                for &(ix, wx) in tx {
                    acc += wy * wx * map[iy * g + ix];
                }
            }
            out[y * s + x] = acc;
        }
    }
    out
}

/// Maps to `[0, 1]`; a constant map (up to rounding) becomes all zeros.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// One map per emitted token of `ids` (which start at [SOS]), taken from a
/// teacher-forced forward pass; `layer` defaults to the last.
pub fn extract_attention<T: Element>(
    model: &mut Model<T>,
    image: &Tensor<f32>,
    ids: &[usize],
    layer: Option<usize>,
) -> Result<Vec<AttentionMap>> {
    if ids.first() != Some(&SOS) {
        return Err(param("extract_attention", "token ids must start at [SOS]"));
    }
    let steps = model.net.head()?.config.max_positions;
    if ids.len() > steps + 1 {
        return Err(param("extract_attention", format!("{} tokens exceed {steps} decode steps", ids.len() - 1)));
    }
    let g = model.net.config.backbone.grid_side;
    let side = image.shape()[1];
    let features = encode(model, image)?;
    // the last token is never fed back, so the pass stops one short
    let inputs = &ids[..ids.len() - 1];
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let (_, records) = forward_logits(model, &features, inputs, Some(layer))?;
    let rec = records.last().ok_or_else(|| Error::Numeric("no attention was recorded".into()))?;
    let [_, a, t, n] = rec.shape;
    if n != g * g {
        return Err(Error::Mismatch(format!("attention over {n} positions, grid is {g}×{g}")));
    }
    let mut maps = Vec::with_capacity(t);
    for step in 0..t {
        let heads: Vec<Vec<f64>> =
            (0..a).map(|h| rec.weights[(h * t + step) * n..(h * t + step + 1) * n].to_vec()).collect();
        let mean: Vec<f64> = (0..n).map(|i| heads.iter().map(|w| w[i]).sum::<f64>() / a as f64).collect();
        let overlay = minmax_normalize(&bicubic_upsample(&mean, g, side));
        maps.push(AttentionMap { step, token: ids[step + 1], grid: g, heads, mean, side, overlay });
    }
    Ok(maps)
}

/// File-name-safe rendering of a token.
pub fn token_label(vocab: &Vocabulary, id: usize) -> String {
    let text = vocab.token(id).unwrap_or("unk").replace(MARKER, "");
    let clean: String = text.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect();
    let clean = clean.trim_matches('_');
    if clean.is_empty() {
        format!("tok{id}")
    } else {
        clean.to_string()
    }
}

/// Writes `image` (`[3, S, S]`, values in `[0, 1]`) darkened away from the
/// attended region as a binary PPM.
pub fn write_overlay(path: &Path, image: &Tensor<f32>, overlay: &[f64]) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if overlay.len() != h * w {
        return Err(Error::Mismatch(format!("overlay of {} values for a {h}×{w} image", overlay.len())));
    }
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let k = 0.2 + 0.8 * overlay[i];
        for c in 0..3 {
            let v = f64::from(d[c * h * w + i].clamp(0.0, 1.0)) * k;
            rgb.push((v * 255.0).round() as u8);
        }
    }
    let file = std::fs::File::create(path).map_err(io(path))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
}

/// Writes one overlay per map as `<id>_<step>_<token>.ppm`.
pub fn write_overlays(
    dir: &Path,
    image_id: &str,
    image: &Tensor<f32>,
    maps: &[AttentionMap],
    vocab: &Vocabulary,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    maps.iter()
        .map(|m| {
            let path = dir.join(format!("{image_id}_{}_{}.ppm", m.step, token_label(vocab, m.token)));
            write_overlay(&path, image, &m.overlay)?;
            Ok(path)
        })
        .collect()
}
