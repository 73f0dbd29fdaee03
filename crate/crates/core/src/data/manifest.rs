use std::path::{Path, PathBuf};

use bicap_tensor::Tensor;
use serde::Deserialize;

use crate::error::{io, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCaption {
    id: String,
    image: String,
    captions: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabeled {
    id: String,
    image: String,
    label: usize,
}

/// Reads a PNG, or a serialized `[3, H, W]` tensor for any other extension.
pub fn load_image(path: &Path) -> std::result::Result<Tensor<f32>, String> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let t = if is_png {
        let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = f32::from(px.0[c]) / 255.0;
            }
        }
        Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())?
    } else {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        Tensor::<f32>::from_bytes(&bytes).map_err(|e| e.to_string())?
    };
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(format!("expected a [3, H, W] image, got {:?}", s));
    }
    Ok(t)
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save(path).map_err(|e| Error::Ingest { id: path.display().to_string(), detail: e.to_string() })
}

fn resolve(base: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Parses and validates a caption manifest, decoding every image.
pub fn load_manifest(path: &Path) -> Result<Vec<CaptionRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let raw: RawCaption = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{line_no}: {e}", path.display())))?;
        if raw.captions.is_empty() {
            return Err(Error::Schema(format!("record {} has no captions", raw.id)));
        }
        let image = load_image(&resolve(base, &raw.image))
            .map_err(|detail| Error::Ingest { id: raw.id.clone(), detail: format!("{}: {detail}", raw.image) })?;
        out.push(CaptionRecord { id: raw.id, image, captions: raw.captions });
    }
    Ok(out)
}

pub fn load_labeled_manifest(path: &Path) -> Result<Vec<LabeledRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let raw: RawLabeled = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{line_no}: {e}", path.display())))?;
        let image = load_image(&resolve(base, &raw.image))
            .map_err(|detail| Error::Ingest { id: raw.id.clone(), detail: format!("{}: {detail}", raw.image) })?;
        out.push(LabeledRecord { id: raw.id, image, label: raw.label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_png(dir: &Path, name: &str) {
        let img = Tensor::full(&[3, 4, 5], 0.5f32);
        save_png(&img, &dir.join(name)).unwrap();
    }

    #[test]
    fn two_line_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let raw = Tensor::full(&[3, 2, 2], 0.25f32);
        std::fs::write(dir.path().join("b.bin"), raw.to_bytes()).unwrap();
        let mut f = std::fs::File::create(dir.path().join("m.jsonl")).unwrap();
        writeln!(f, r#"{{"id":"a","image":"a.png","captions":["x","y"]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","image":"b.bin","captions":["z"]}}"#).unwrap();
        let ds = load_manifest(&dir.path().join("m.jsonl")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].image.shape(), &[3, 4, 5]);
        assert!((ds[0].image.data()[0] - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(ds[1].image, raw);
    }

    #[test]
    fn empty_captions_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        std::fs::write(dir.path().join("m.jsonl"), r#"{"id":"a","image":"a.png","captions":[]}"#).unwrap();
        assert!(matches!(load_manifest(&dir.path().join("m.jsonl")), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_image_names_record() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.jsonl"), r#"{"id":"rec7","image":"nope.png","captions":["a"]}"#).unwrap();
        match load_manifest(&dir.path().join("m.jsonl")) {
            Err(Error::Ingest { id, .. }) => assert_eq!(id, "rec7"),
            other => panic!("{other:?}"),
        }
    }
}
