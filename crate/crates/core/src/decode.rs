//! Greedy and beam-search decoding with the forward decoder.

use std::cmp::Ordering;

use bicap_tensor::{Element, Mode, Tensor};

use crate::error::{param, Error, Result};
use crate::head::{Direction, SelfMask};
use crate::model::Model;
use crate::params::{AttentionRecord, Ctx};
use crate::rng::{derive, Stream};
use crate::tokenizer::{MASK, PAD, SOS, UNK};

/// Log-probabilities of the next token given a prefix that starts at [SOS].
pub trait NextTokenScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

fn argmax(v: &[f64]) -> usize {
    // first maximum, so ties go to the lowest id
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until `eos` or `max_len` generated tokens.
pub fn greedy<S: NextTokenScorer + ?Sized>(scorer: &mut S, start: usize, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis { tokens: vec![start], score: 0.0 };
    for _ in 0..max_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let next = argmax(&lp);
        h.tokens.push(next);
        h.score += lp[next];
        if next == eos {
            break;
        }
    }
    Ok(h)
}

/// Beam search over summed log-probabilities, no length normalization.
///
/// Each step keeps the `beams` best unfinished extensions; every extension
/// ending in `eos` is retired to the finished pool, as is every hypothesis
/// reaching `max_len` generated tokens. Returns at most `beams` finished
/// hypotheses, best first, ties broken by token order.
pub fn beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &mut S,
    start: usize,
    eos: usize,
    beams: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beams < 1 {
        return Err(param("beam_search", "beams must be at least 1"));
    }
    let mut live = vec![Hypothesis { tokens: vec![start], score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis { tokens, score: h.score + l });
            }
        }
        candidates.sort_by(rank);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&eos) || step + 1 == max_len {
                finished.push(c);
            } else if live.len() < beams {
                live.push(c);
            }
        }
        finished.sort_by(rank);
        finished.truncate(beams);
        // scores only fall as hypotheses grow
        let done = live.is_empty()
            || (finished.len() == beams && live[0].score < finished[beams - 1].score);
        if done {
            break;
        }
    }
    if max_len == 0 {
        finished = live;
    }
    Ok(finished)
}

/// Forward-decoder scorer for one image; reserved non-boundary tokens are
/// never proposed.
pub struct ModelScorer<'m, T: Element> {
    model: &'m mut Model<T>,
    features: Tensor<T>,
}

impl<'m, T: Element> ModelScorer<'m, T> {
    /// `image` is one normalized `[3, S, S]` view.
    pub fn new(model: &'m mut Model<T>, image: &Tensor<f32>) -> Result<Self> {
        let features = encode(model, image)?;
        Ok(ModelScorer { model, features })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

impl<T: Element> NextTokenScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let (logits, _) = forward_logits(self.model, &self.features, prefix, None)?;
        let v = logits.shape()[2];
        let last = &logits.data()[(prefix.len() - 1) * v..];
        let mut x: Vec<f64> = last.iter().map(|l| l.to_f64_lossy()).collect();
        for r in [SOS, UNK, PAD, MASK] {
            if r < v {
                x[r] = f64::NEG_INFINITY;
            }
        }
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        Ok(x.into_iter().map(|l| l - lse).collect())
    }
}

fn eval_ctx<T: Element>(model: &mut Model<T>) -> Ctx<'_, T> {
    Ctx::new(&mut model.store, Mode::Eval, derive(0, Stream::Dropout, 0, 0)).frozen()
}

/// Projected image features `[1, N, H]` of one `[3, S, S]` image.
pub fn encode<T: Element>(model: &mut Model<T>, image: &Tensor<f32>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Mismatch(format!("expected one [3, S, S] image, got {s:?}")));
    }
    let batched = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let net = model.net.clone();
    let mut ctx = eval_ctx(model);
    let x = ctx.tape.input(batched.cast::<T>());
    let f = net.image_features(&mut ctx, x)?;
    Ok(ctx.tape.tensor(f))
}

/// Forward-decoder logits `[1, T, V]` for `ids`, optionally recording the
/// cross-attention of the configured layer.
pub fn forward_logits<T: Element>(
    model: &mut Model<T>,
    features: &Tensor<T>,
    ids: &[usize],
    record: Option<Option<usize>>,
) -> Result<(Tensor<T>, Vec<AttentionRecord>)> {
    let net = model.net.clone();
    let head = net.head()?;
    let mut ctx = eval_ctx(model);
    if let Some(layer) = record {
        ctx.record_attention = true;
        ctx.attention_layer = layer;
    }
    let f = ctx.tape.input(features.clone());
    let h = head.run_stack(&mut ctx, Direction::Forward, ids, 1, ids.len(), f, SelfMask::Causal)?;
    let logits = head.output_logits(&mut ctx, h)?;
    Ok((ctx.tape.tensor(logits), std::mem::take(&mut ctx.attention)))
}
