//! Dataset ingestion, augmentation and batching.

pub mod augment;
pub mod manifest;
pub mod synth;

use bicap_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{param, Result};
use crate::rng::{derive, Stream};
use crate::tokenizer::{Vocabulary, EOS, PAD};

pub use augment::{
    color_jitter, hflip, hflip_with_caption_swap, normalize_image, random_resized_crop, resize, swap_left_right,
};
pub use manifest::{load_image, load_labeled_manifest, load_manifest, save_png, CaptionRecord, LabeledRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    OneRandom,
    All,
}

/// One image with one caption, ready for tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub record_ids: Vec<String>,
    /// `[B, 3, S, S]`.
    pub images: Tensor<f32>,
    /// Row-major `[B, len]`, padded with [PAD].
    pub tokens: Vec<usize>,
    pub len: usize,
    /// Unpadded length of each row, boundaries included.
    pub lengths: Vec<usize>,
    /// False exactly at [PAD].
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.len..(b + 1) * self.len]
    }
}

/// Keeps at most `max_len − 2` interior tokens; the sequence still ends in [EOS].
pub fn truncate(mut ids: Vec<usize>, max_len: usize) -> Vec<usize> {
    if ids.len() > max_len {
        ids.truncate(max_len.max(2) - 1);
        ids.push(EOS);
    }
    ids
}

pub fn collate(samples: &[Sample], vocab: &Vocabulary, max_len: usize) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| param("collate", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let rows: Vec<Vec<usize>> = samples.iter().map(|s| truncate(vocab.encode(&s.caption), max_len)).collect();
    let len = rows.iter().map(Vec::len).max().unwrap_or(2);
    let mut tokens = Vec::with_capacity(rows.len() * len);
    let mut mask = Vec::with_capacity(rows.len() * len);
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    for (s, r) in samples.iter().zip(&rows) {
        if s.image.shape() != shape.as_slice() {
            return Err(param("collate", format!("image {} is {:?}, batch is {:?}", s.id, s.image.shape(), shape)));
        }
        images.extend_from_slice(s.image.data());
        tokens.extend_from_slice(r);
        tokens.resize(tokens.len() + len - r.len(), PAD);
        mask.extend((0..len).map(|i| i < r.len()));
    }
    let mut bshape = vec![samples.len()];
    bshape.extend_from_slice(&shape);
    Ok(Batch {
        record_ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(&bshape, images)?,
        tokens,
        len,
        lengths: rows.iter().map(Vec::len).collect(),
        mask,
    })
}

pub fn select_captions<R: Rng + ?Sized>(record: &CaptionRecord, mode: CaptionMode, rng: &mut R) -> Vec<String> {
    match mode {
        CaptionMode::OneRandom => vec![record.captions[rng.gen_range(0..record.captions.len())].clone()],
        CaptionMode::All => record.captions.clone(),
    }
}

/// Evaluation-time view: resize and normalize.
pub fn eval_view(image: &Tensor<f32>, cfg: &DataConfig) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let img = if h == cfg.image_side && w == cfg.image_side { image.clone() } else { resize(image, cfg.image_side) };
    normalize_image(&img, cfg.mean, cfg.std)
}

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, Stream::Order, epoch, 0));
    order
}

/// Deterministic batch stream: batch `i` is a pure function of `(seed, i)`.
pub struct Loader<'a> {
    pub records: &'a [CaptionRecord],
    pub cfg: &'a DataConfig,
    pub vocab: &'a Vocabulary,
    pub batch_size: usize,
    pub seed: u64,
}

impl Loader<'_> {
    /// Record indices of batch `iter`, walking consecutive epoch permutations.
    pub fn indices(&self, iter: usize) -> Vec<usize> {
        let n = self.records.len();
        let start = iter * self.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + self.batch_size)
            .map(|g| {
                let epoch = g / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, epoch_order(n, self.seed, epoch as u64)));
                }
                cached.as_ref().expect("filled").1[g % n]
            })
            .collect()
    }

    fn samples_for(&self, iter: usize, slot: usize, record: usize) -> Result<Vec<Sample>> {
        let rec = &self.records[record];
        let global = (iter * self.batch_size + slot) as u64;
        let captions = select_captions(rec, self.cfg.caption_mode, &mut derive(self.seed, Stream::Caption, global, 0));
        let mut rng = derive(self.seed, Stream::Augment, global, 0);
        let mut out = Vec::with_capacity(captions.len());
        if self.cfg.augment {
            // one geometric/color draw per image, applied to every caption
            let img = random_resized_crop(
                &rec.image,
                self.cfg.crop_scale_min,
                self.cfg.crop_scale_max,
                self.cfg.image_side,
                &mut rng,
            )?;
            let img = color_jitter(&img, self.cfg.brightness, self.cfg.contrast, self.cfg.saturation, self.cfg.hue, &mut rng)?;
            let flip = self.cfg.flip_prob > 0.0 && rng.gen_bool(self.cfg.flip_prob.min(1.0));
            let img = if flip { hflip(&img) } else { img };
            let img = normalize_image(&img, self.cfg.mean, self.cfg.std)?;
            for c in captions {
                let caption = if flip { swap_left_right(&c) } else { c };
                out.push(Sample { id: rec.id.clone(), image: img.clone(), caption });
            }
        } else {
            let img = eval_view(&rec.image, self.cfg)?;
            for c in captions {
                out.push(Sample { id: rec.id.clone(), image: img.clone(), caption: c });
            }
        }
        Ok(out)
    }

    pub fn batch(&self, iter: usize) -> Result<Batch> {
        if self.records.is_empty() || self.batch_size == 0 {
            return Err(param("loader", "empty dataset or batch"));
        }
        let idx = self.indices(iter);
        let workers = self.cfg.workers.max(1).min(idx.len());
        let per_slot: Vec<Result<Vec<Sample>>> = if workers == 1 {
            idx.iter().enumerate().map(|(slot, &r)| self.samples_for(iter, slot, r)).collect()
        } else {
            let chunk = idx.len().div_ceil(workers);
            std::thread::scope(|s| {
                let handles: Vec<_> = idx
                    .chunks(chunk)
                    .enumerate()
                    .map(|(ci, part)| {
                        s.spawn(move || {
                            part.iter()
                                .enumerate()
                                .map(|(k, &r)| self.samples_for(iter, ci * chunk + k, r))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut samples = Vec::new();
        for s in per_slot {
            samples.extend(s?);
        }
        collate(&samples, self.vocab, self.cfg.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, SOS};

    fn vocab() -> Vocabulary {
        train_bpe(&["a b c d e f g h"], 200).unwrap()
    }

    fn sample(caption: &str) -> Sample {
        Sample { id: caption.into(), image: Tensor::zeros(&[3, 2, 2]), caption: caption.into() }
    }

    #[test]
    fn padding_arithmetic() {
        let v = vocab();
        // single-letter words segment as [marker, letter]
        let b = collate(&[sample("a"), sample("a b")], &v, 32).unwrap();
        assert_eq!(b.len, 6);
        assert_eq!(b.lengths, vec![4, 6]);
        assert_eq!(&b.row(0)[4..], &[PAD, PAD]);
        assert_eq!(&b.mask[..6], &[true, true, true, true, false, false]);
        for (t, m) in b.tokens.iter().zip(&b.mask) {
            assert_eq!(*t == PAD, !m);
        }
        assert_eq!(b.images.shape(), &[2, 3, 2, 2]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = vocab();
        let b = collate(&[sample("a b c d")], &v, 4).unwrap();
        assert_eq!(b.row(0).len(), 4);
        assert_eq!(b.row(0)[0], SOS);
        assert_eq!(b.row(0)[3], EOS);
        assert_eq!(truncate(vec![SOS, 7, EOS], 4), vec![SOS, 7, EOS]);
    }

    #[test]
    fn empty_batch_fails() {
        assert!(collate(&[], &vocab(), 8).is_err());
    }

    #[test]
    fn one_random_selection_is_uniform() {
        let rec = CaptionRecord {
            id: "r".into(),
            image: Tensor::zeros(&[3, 1, 2]),
            captions: (0..5).map(|i| format!("c{i}")).collect(),
        };
        let mut counts = [0usize; 5];
        let mut rng = derive(9, Stream::Caption, 0, 0);
        for _ in 0..10_000 {
            let c = select_captions(&rec, CaptionMode::OneRandom, &mut rng);
            counts[c[0][1..].parse::<usize>().unwrap()] += 1;
        }
        for c in counts {
            assert!((1850..=2150).contains(&c), "{counts:?}");
        }
        assert_eq!(select_captions(&rec, CaptionMode::All, &mut rng).len(), 5);
    }
}
