//! Pretraining objectives: bicaptioning, forward captioning, token
//! classification, masked language modeling.

use bicap_tensor::{Element, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::head::{Direction, SelfMask};
use crate::model::Net;
use crate::params::Ctx;
use crate::tokenizer::{MASK, PAD, RESERVED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Bicap,
    Forward,
    Tokclf,
    Mlm,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicap" => Ok(TaskKind::Bicap),
            "forward" => Ok(TaskKind::Forward),
            "tokclf" => Ok(TaskKind::Tokclf),
            "mlm" => Ok(TaskKind::Mlm),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Positions contributing to the loss.
    pub supervised: usize,
    /// Non-[PAD] token positions in the batch; for MLM, the maskable ones.
    pub positions: usize,
}

fn positions(batch: &Batch) -> usize {
    batch.lengths.iter().sum()
}

/// Per-position targets of one direction, [PAD] where nothing is predicted.
///
/// Forward: position `t` targets token `t + 1`; backward: token `t − 1`.
pub fn captioning_targets(batch: &Batch, direction: Direction) -> Vec<usize> {
    let t = batch.len;
    let mut out = vec![PAD; batch.size() * t];
    for (b, &n) in batch.lengths.iter().enumerate() {
        let row = batch.row(b);
        for p in 0..n {
            let target = match direction {
                Direction::Forward if p + 1 < n => row[p + 1],
                Direction::Backward if p >= 1 => row[p - 1],
                _ => PAD,
            };
            out[b * t + p] = target;
        }
    }
    out
}

fn image_input<T: Element>(ctx: &mut Ctx<'_, T>, batch: &Batch) -> Var {
    ctx.tape.input(batch.images.cast::<T>())
}

/// Mean cross-entropy of one direction given projected image features.
pub fn direction_loss<T: Element>(
    ctx: &mut Ctx<'_, T>,
    net: &Net,
    batch: &Batch,
    image: Var,
    direction: Direction,
) -> Result<(Var, usize)> {
    let head = net.head()?;
    let logits = head.decode_logits(ctx, direction, &batch.tokens, &batch.lengths, batch.len, image)?;
    let v = head.config.vocab;
    let flat = ctx.tape.reshape(logits, &[batch.size() * batch.len, v])?;
    let targets = captioning_targets(batch, direction);
    let count = targets.iter().filter(|&&t| t != PAD).count();
    Ok((ctx.tape.cross_entropy(flat, &targets, Some(PAD))?, count))
}

pub fn bicaptioning_loss<T: Element>(ctx: &mut Ctx<'_, T>, net: &Net, batch: &Batch) -> Result<LossOutput> {
    let images = image_input(ctx, batch);
    let feats = net.image_features(ctx, images)?;
    let (f, nf) = direction_loss(ctx, net, batch, feats, Direction::Forward)?;
    let (b, nb) = direction_loss(ctx, net, batch, feats, Direction::Backward)?;
    Ok(LossOutput { loss: ctx.tape.add(f, b)?, supervised: nf + nb, positions: positions(batch) })
}

pub fn forward_captioning_loss<T: Element>(ctx: &mut Ctx<'_, T>, net: &Net, batch: &Batch) -> Result<LossOutput> {
    let images = image_input(ctx, batch);
    let feats = net.image_features(ctx, images)?;
    let (f, nf) = direction_loss(ctx, net, batch, feats, Direction::Forward)?;
    Ok(LossOutput { loss: f, supervised: nf, positions: positions(batch) })
}

/// K-hot target with mass 1/K on each distinct non-reserved token.
pub fn khot_target(row: &[usize], vocab: usize) -> Option<Vec<f64>> {
    let mut ids: Vec<usize> = row.iter().copied().filter(|&id| id >= RESERVED.len()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return None;
    }
    let mut q = vec![0.0; vocab];
    for &i in &ids {
        q[i] = 1.0 / ids.len() as f64;
    }
    Some(q)
}

/// KL(q ‖ softmax(logits)) averaged over kept rows.
pub fn token_classification_loss<T: Element>(ctx: &mut Ctx<'_, T>, net: &Net, batch: &Batch) -> Result<LossOutput> {
    let (w, bias) = net.classifier.ok_or_else(|| Error::Config("model has no token classifier".into()))?;
    let vocab = net.config.head.vocab;
    let mut keep = Vec::new();
    let mut q = Vec::new();
    let mut entropy = 0.0;
    for b in 0..batch.size() {
        match khot_target(batch.row(b), vocab) {
            Some(t) => {
                entropy += t.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>();
                q.extend(t.into_iter().map(T::cst));
                keep.push(b);
            }
            None => log::warn!("skipping record {}: caption has no content tokens", batch.record_ids[b]),
        }
    }
    if keep.is_empty() {
        return Err(Error::Numeric("no record in the batch has content tokens".into()));
    }
    let images = image_input(ctx, batch);
    let pooled = net.backbone.pooled_features(ctx, images)?;
    let pooled = if keep.len() == batch.size() { pooled } else { ctx.tape.gather_rows(pooled, &keep)? };
    let logits = ctx.linear(pooled, w, Some(bias))?;
    let ce = ctx.tape.soft_cross_entropy(logits, &q)?;
    let h = ctx.tape.constant(&[], vec![T::cst(-entropy / keep.len() as f64)])?;
    Ok(LossOutput { loss: ctx.tape.add(ce, h)?, supervised: keep.len(), positions: positions(batch) })
}

/// Exactly `round(rate · n)` (at least one) of the `n` interior positions of
/// the batch, drawn without replacement; row-major `[B, len]`.
pub fn mlm_selection<R: Rng + ?Sized>(batch: &Batch, rate: f64, rng: &mut R) -> Vec<bool> {
    let t = batch.len;
    let mut sel = vec![false; batch.size() * t];
    let candidates: Vec<usize> = batch
        .lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (1..n.saturating_sub(1)).map(move |p| b * t + p))
        .collect();
    if candidates.is_empty() {
        return sel;
    }
    let k = ((rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    for i in rand::seq::index::sample(rng, candidates.len(), k) {
        sel[candidates[i]] = true;
    }
    sel
}

/// Positions [`mlm_selection`] draws from.
pub fn maskable_positions(batch: &Batch) -> usize {
    batch.lengths.iter().map(|&n| n.saturating_sub(2)).sum()
}

pub fn masked_lm_loss<T: Element, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T>,
    net: &Net,
    batch: &Batch,
    rate: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} outside (0, 1)")));
    }
    let head = net.head()?;
    let sel = mlm_selection(batch, rate, rng);
    let inputs: Vec<usize> = batch.tokens.iter().zip(&sel).map(|(&id, &s)| if s { MASK } else { id }).collect();
    let targets: Vec<usize> = batch.tokens.iter().zip(&sel).map(|(&id, &s)| if s { id } else { PAD }).collect();
    let images = image_input(ctx, batch);
    let feats = net.image_features(ctx, images)?;
    let hidden = head.run_stack(ctx, Direction::Forward, &inputs, batch.size(), batch.len, feats, SelfMask::Bidirectional)?;
    let logits = head.output_logits(ctx, hidden)?;
    let flat = ctx.tape.reshape(logits, &[batch.size() * batch.len, head.config.vocab])?;
    let loss = ctx.tape.cross_entropy(flat, &targets, Some(PAD))?;
    Ok(LossOutput { loss, supervised: sel.iter().filter(|&&s| s).count(), positions: maskable_positions(batch) })
}

/// The objective selected by `task`.
pub fn task_loss<T: Element, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T>,
    net: &Net,
    batch: &Batch,
    task: TaskKind,
    mask_rate: f64,
    rng: &mut R,
) -> Result<LossOutput> {
    match task {
        TaskKind::Bicap => bicaptioning_loss(ctx, net, batch),
        TaskKind::Forward => forward_captioning_loss(ctx, net, batch),
        TaskKind::Tokclf => token_classification_loss(ctx, net, batch),
        TaskKind::Mlm => masked_lm_loss(ctx, net, batch, mask_rate, rng),
    }
}
