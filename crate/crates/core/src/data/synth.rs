//! Procedural scenes: one colored shape on the left or right half.

use std::io::Write;
use std::path::{Path, PathBuf};

use bicap_tensor::Tensor;
use rand::Rng;

use super::{save_png, CaptionRecord, LabeledRecord};
use crate::error::{io, Result};
use crate::rng::{derive, Stream};

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub color: usize,
    pub shape: usize,
    pub right: bool,
    /// Center and radius as fractions of the image side.
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub background: f32,
}

impl Scene {
    pub fn canonical(color: usize, shape: usize, right: bool) -> Self {
        Scene { color, shape, right, cx: if right { 0.75 } else { 0.25 }, cy: 0.5, radius: 0.18, background: 0.85 }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let right = rng.gen_bool(0.5);
        let radius = rng.gen_range(0.12..0.2);
        let cx = rng.gen_range(radius..0.5 - radius) + if right { 0.5 } else { 0.0 };
        Scene {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            right,
            cx,
            cy: rng.gen_range(radius..1.0 - radius),
            radius,
            background: rng.gen_range(0.7..0.95),
        }
    }

    fn covers(&self, dx: f32, dy: f32) -> bool {
        let r = self.radius;
        match self.shape {
            0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            1 => dx * dx + dy * dy <= r * r,
            2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= (dy + r) / 1.8,
            _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        }
    }

    pub fn render(&self, side: usize) -> Tensor<f32> {
        let mut data = vec![self.background; 3 * side * side];
        let rgb = COLORS[self.color].1;
        let s = side as f32;
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f32 + 0.5) / s - self.cx;
                let dy = (y as f32 + 0.5) / s - self.cy;
                if self.covers(dx, dy) {
                    for c in 0..3 {
                        data[c * side * side + y * side + x] = rgb[c];
                    }
                }
            }
        }
        Tensor::new(&[3, side, side], data).expect("scene shape")
    }

    pub fn caption(&self) -> String {
        format!("a {} {} on the {}", COLORS[self.color].0, SHAPES[self.shape], self.side_word())
    }

    /// Terse form, "red circle left".
    pub fn short_caption(&self) -> String {
        format!("{} {} {}", COLORS[self.color].0, SHAPES[self.shape], self.side_word())
    }

    fn side_word(&self) -> &'static str {
        if self.right {
            "right"
        } else {
            "left"
        }
    }

    /// Five wordings of the same scene.
    pub fn captions(&self) -> Vec<String> {
        let (c, s, side) = (COLORS[self.color].0, SHAPES[self.shape], self.side_word());
        vec![
            self.caption(),
            format!("the {c} {s} is on the {side}"),
            format!("a {s} in {c} at the {side}"),
            format!("{c} {s} to the {side} of the image"),
            format!("on the {side} there is a {c} {s}"),
        ]
    }
}

/// All 32 color × shape × side combinations in canonical placement, each
/// with its terse caption.
pub fn overfit_corpus(side: usize) -> Vec<CaptionRecord> {
    let mut out = Vec::new();
    for color in 0..COLORS.len() {
        for shape in 0..SHAPES.len() {
            for right in [false, true] {
                let s = Scene::canonical(color, shape, right);
                out.push(CaptionRecord {
                    id: format!("{}-{}-{}", COLORS[color].0, SHAPES[shape], s.side_word()),
                    image: s.render(side),
                    captions: vec![s.short_caption()],
                });
            }
        }
    }
    out
}

fn add_noise<R: Rng + ?Sized>(img: &mut Tensor<f32>, amount: f32, rng: &mut R) {
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
    }
}

/// Randomly placed scenes with five captions each.
pub fn scene_corpus(n: usize, side: usize, seed: u64) -> Vec<CaptionRecord> {
    (0..n)
        .map(|i| {
            let mut rng = derive(seed, Stream::Synth, i as u64, 0);
            let s = Scene::random(&mut rng);
            let mut image = s.render(side);
            add_noise(&mut image, 0.03, &mut rng);
            CaptionRecord { id: format!("scene{i:05}"), image, captions: s.captions() }
        })
        .collect()
}

/// Randomly placed scenes labeled by shape.
pub fn shape_labeled(n: usize, side: usize, seed: u64) -> Vec<LabeledRecord> {
    (0..n)
        .map(|i| {
            let mut rng = derive(seed, Stream::Synth, i as u64, 1);
            let s = Scene::random(&mut rng);
            let mut image = s.render(side);
            add_noise(&mut image, 0.03, &mut rng);
            LabeledRecord { id: format!("probe{i:05}"), image, label: s.shape }
        })
        .collect()
}

/// Canonical scenes with small placement and size jitter, labeled by shape.
pub fn canonical_labeled(n: usize, side: usize, seed: u64) -> Vec<LabeledRecord> {
    (0..n)
        .map(|i| {
            let mut rng = derive(seed, Stream::Synth, i as u64, 2);
            let mut s = Scene::canonical(
                rng.gen_range(0..COLORS.len()),
                rng.gen_range(0..SHAPES.len()),
                rng.gen_bool(0.5),
            );
            s.cx += rng.gen_range(-0.04..=0.04);
            s.cy += rng.gen_range(-0.04..=0.04);
            s.radius = rng.gen_range(0.16..=0.2);
            let mut image = s.render(side);
            add_noise(&mut image, 0.03, &mut rng);
            LabeledRecord { id: format!("canon{i:05}"), image, label: s.shape }
        })
        .collect()
}

/// Writes PNGs and a caption manifest; returns the manifest path.
pub fn write_caption_manifest(dir: &Path, records: &[CaptionRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("captions.jsonl");
    let mut f = std::fs::File::create(&path).map_err(io(&path))?;
    for r in records {
        let name = format!("{}.png", r.id);
        save_png(&r.image, &dir.join(&name))?;
        let line = serde_json::json!({"id": r.id, "image": name, "captions": r.captions});
        writeln!(f, "{line}").map_err(io(&path))?;
    }
    Ok(path)
}

pub fn write_labeled_manifest(dir: &Path, records: &[LabeledRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("labels.jsonl");
    let mut f = std::fs::File::create(&path).map_err(io(&path))?;
    for r in records {
        let name = format!("{}.png", r.id);
        save_png(&r.image, &dir.join(&name))?;
        let line = serde_json::json!({"id": r.id, "image": name, "label": r.label});
        writeln!(f, "{line}").map_err(io(&path))?;
    }
    Ok(path)
}
