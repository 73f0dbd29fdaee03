//! Transformer caption decoders over projected image features.

use bicap_tensor::{Element, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AttentionRecord, Ctx, Kind, ParamId, ParamStore, Part};
use crate::tokenizer::PAD;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub allow_nonstandard: bool,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 || self.max_positions == 0 {
            return bad("head sizes must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if !self.allow_nonstandard && (self.hidden != 64 * self.heads || self.feedforward != 4 * self.hidden) {
            return bad(format!(
                "expected heads = hidden/64 and feedforward = 4·hidden, got H={} A={} F={} (set allow_nonstandard to override)",
                self.hidden, self.heads, self.feedforward
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub ln: [LayerNormParams; 3],
}

fn linear_params<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = store.add_normal(&format!("{name}.weight"), &[fan_in, fan_out], INIT_STD, Part::Head, Kind::Weight, rng)?;
    let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), Part::Head, Kind::Bias)?;
    Ok((w, b))
}

fn layer_norm_params<T: Element>(store: &mut ParamStore<T>, name: &str, h: usize) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gain: store.add(&format!("{name}.gain"), Tensor::ones(&[h]), Part::Head, Kind::NormGain)?,
        bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[h]), Part::Head, Kind::NormBias)?,
    })
}

impl AttentionParams {
    fn build<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, h: usize, rng: &mut R) -> Result<Self> {
        let (wq, bq) = linear_params(store, &format!("{name}.q"), h, h, rng)?;
        let (wk, bk) = linear_params(store, &format!("{name}.k"), h, h, rng)?;
        let (wv, bv) = linear_params(store, &format!("{name}.v"), h, h, rng)?;
        let (wo, bo) = linear_params(store, &format!("{name}.o"), h, h, rng)?;
        Ok(AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo })
    }
}

impl DecoderLayer {
    fn build<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden;
        Ok(DecoderLayer {
            self_attn: AttentionParams::build(store, &format!("{name}.self"), h, rng)?,
            cross_attn: AttentionParams::build(store, &format!("{name}.cross"), h, rng)?,
            ff1: linear_params(store, &format!("{name}.ff1"), h, cfg.feedforward, rng)?,
            ff2: linear_params(store, &format!("{name}.ff2"), cfg.feedforward, h, rng)?,
            ln: [
                layer_norm_params(store, &format!("{name}.ln1"), h)?,
                layer_norm_params(store, &format!("{name}.ln2"), h)?,
                layer_norm_params(store, &format!("{name}.ln3"), h)?,
            ],
        })
    }
}

/// Additive causal bias `[T, T]`: 0 where `j ≤ i`, −∞ elsewhere.
pub fn causal_mask<T: Element>(t: usize) -> Tensor<T> {
    let data = (0..t * t)
        .map(|k| if k % t <= k / t { T::zero() } else { T::neg_infinity() })
        .collect();
    Tensor::new(&[t, t], data).expect("mask shape")
}

/// Additive key bias `[B, 1, 1, T]` hiding [PAD] keys.
pub fn key_padding_mask<T: Element>(tokens: &[usize], b: usize, t: usize) -> Tensor<T> {
    let data = tokens.iter().map(|&id| if id == PAD { T::neg_infinity() } else { T::zero() }).collect();
    Tensor::new(&[b, 1, 1, t], data).expect("mask shape")
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q_in: [B, T, H]`, `kv_in: [B, N, H]`; `mask` is broadcast against the
/// `[B, A, T, N]` scores. Returns the output and the attention weights.
pub fn multihead_attention<T: Element>(
    ctx: &mut Ctx<'_, T>,
    q_in: Var,
    kv_in: Var,
    p: &AttentionParams,
    mask: Option<Var>,
    heads: usize,
) -> Result<(Var, Var)> {
    let qs = ctx.tape.shape(q_in).to_vec();
    let ks = ctx.tape.shape(kv_in).to_vec();
    let (b, t, h) = (qs[0], qs[1], qs[2]);
    let n = ks[1];
    if h % heads != 0 {
        return Err(Error::Config(format!("hidden {h} not divisible by {heads} heads")));
    }
    let dh = h / heads;
    let split = |ctx: &mut Ctx<'_, T>, x: Var, len: usize| -> Result<Var> {
        let r = ctx.tape.reshape(x, &[b, len, heads, dh])?;
        Ok(ctx.tape.permute(r, &[0, 2, 1, 3])?)
    };
    let q = ctx.linear(q_in, p.wq, Some(p.bq))?;
    let k = ctx.linear(kv_in, p.wk, Some(p.bk))?;
    let v = ctx.linear(kv_in, p.wv, Some(p.bv))?;
    let (q, k, v) = (split(ctx, q, t)?, split(ctx, k, n)?, split(ctx, v, n)?);
    let scores = ctx.tape.matmul_nt(q, k)?;
    let mut scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = ctx.tape.add(scores, m)?;
    }
    let weights = ctx.tape.softmax(scores, 3)?;
    let mixed = ctx.tape.matmul(weights, v)?;
    let merged = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
    let merged = ctx.tape.reshape(merged, &[b, t, h])?;
    Ok((ctx.linear(merged, p.wo, Some(p.bo))?, weights))
}

fn layer_norm<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, p: &LayerNormParams) -> Result<Var> {
    let (g, b) = (ctx.p(p.gain), ctx.p(p.bias));
    Ok(ctx.tape.layer_norm(x, g, b, LN_EPS)?)
}

/// Post-norm residual sublayer: `LN(x + dropout(y))`.
fn residual<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, y: Var, ln: &LayerNormParams, p: f64) -> Result<Var> {
    let y = ctx.dropout(y, p)?;
    let s = ctx.tape.add(x, y)?;
    layer_norm(ctx, s, ln)
}

/// One decoder layer; returns the output and the cross-attention weights.
pub fn decoder_layer<T: Element>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    image: Var,
    layer: &DecoderLayer,
    self_mask: Option<Var>,
    cfg: &HeadConfig,
) -> Result<(Var, Var)> {
    let (sa, _) = multihead_attention(ctx, x, x, &layer.self_attn, self_mask, cfg.heads)?;
    let x = residual(ctx, x, sa, &layer.ln[0], cfg.dropout)?;
    let (ca, weights) = multihead_attention(ctx, x, image, &layer.cross_attn, None, cfg.heads)?;
    let x = residual(ctx, x, ca, &layer.ln[1], cfg.dropout)?;
    let hdn = ctx.linear(x, layer.ff1.0, Some(layer.ff1.1))?;
    let hdn = ctx.tape.gelu(hdn);
    let ff = ctx.linear(hdn, layer.ff2.0, Some(layer.ff2.1))?;
    let x = residual(ctx, x, ff, &layer.ln[2], cfg.dropout)?;
    Ok((x, weights))
}

/// How token positions may attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfMask {
    Causal,
    /// Full attention over non-[PAD] keys.
    Bidirectional,
}

#[derive(Clone, Debug)]
pub struct TextualHead {
    pub config: HeadConfig,
    pub embedding: ParamId,
    pub positions: ParamId,
    pub embed_ln: LayerNormParams,
    pub forward: Vec<DecoderLayer>,
    pub backward: Option<Vec<DecoderLayer>>,
}

/// Reversal of each row over its first `lengths[b]` entries; pads stay put.
/// Returned as flat source indices into `[B·T]`.
pub fn reversal_index(lengths: &[usize], t: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(lengths.len() * t);
    for (b, &n) in lengths.iter().enumerate() {
        for j in 0..t {
            idx.push(b * t + if j < n { n - 1 - j } else { j });
        }
    }
    idx
}

impl TextualHead {
    pub fn build<T: Element, R: Rng + ?Sized>(
        config: &HeadConfig,
        bidirectional_captioning: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let embedding = store.add_normal("head.embedding", &[config.vocab, h], INIT_STD, Part::Head, Kind::Embedding, rng)?;
        let positions = store.add_normal("head.positions", &[config.max_positions, h], INIT_STD, Part::Head, Kind::Embedding, rng)?;
        let embed_ln = layer_norm_params(store, "head.embed_ln", h)?;
        let forward = (0..config.layers)
            .map(|l| DecoderLayer::build(store, &format!("head.fwd.{l}"), config, rng))
            .collect::<Result<Vec<_>>>()?;
        let backward = if bidirectional_captioning {
            Some(
                (0..config.layers)
                    .map(|l| DecoderLayer::build(store, &format!("head.bwd.{l}"), config, rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(TextualHead { config: config.clone(), embedding, positions, embed_ln, forward, backward })
    }

    /// `E[ids] + Pos[0..T]` → layer norm → dropout, as `[B, T, H]`.
    pub fn embed<T: Element>(&self, ctx: &mut Ctx<'_, T>, ids: &[usize], b: usize, t: usize) -> Result<Var> {
        if t > self.config.max_positions {
            return Err(Error::Config(format!("sequence length {t} exceeds {} positions", self.config.max_positions)));
        }
        if ids.len() != b * t {
            return Err(Error::Mismatch(format!("{} ids for a [{b}, {t}] batch", ids.len())));
        }
        let e = ctx.p(self.embedding);
        let tok = ctx.tape.gather_rows(e, ids)?;
        let tok = ctx.tape.reshape(tok, &[b, t, self.config.hidden])?;
        let pos = ctx.p(self.positions);
        let pos = ctx.tape.gather_rows(pos, &(0..t).collect::<Vec<_>>())?;
        let x = ctx.tape.add(tok, pos)?;
        let x = layer_norm(ctx, x, &self.embed_ln)?;
        ctx.dropout(x, self.config.dropout)
    }

    fn layers(&self, direction: Direction) -> Result<&[DecoderLayer]> {
        match direction {
            Direction::Forward => Ok(&self.forward),
            Direction::Backward => self
                .backward
                .as_deref()
                .ok_or_else(|| Error::Config("this head has no backward decoder".into())),
        }
    }

    /// Runs a stack over `[B, T]` ids and returns hidden states `[B, T, H]`.
    ///
    /// With `ctx.record_attention` set, the cross-attention weights of the
    /// chosen layer are stored in the context.
    #[allow(clippy::too_many_arguments)]
    pub fn run_stack<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        direction: Direction,
        ids: &[usize],
        b: usize,
        t: usize,
        image: Var,
        mask: SelfMask,
    ) -> Result<Var> {
        let is = ctx.tape.shape(image).to_vec();
        if is.len() != 3 || is[0] != b || is[2] != self.config.hidden {
            return Err(Error::Mismatch(format!(
                "image features {is:?} do not match batch {b} and width {}",
                self.config.hidden
            )));
        }
        let layers = self.layers(direction)?;
        let mut x = self.embed(ctx, ids, b, t)?;
        let m = match mask {
            SelfMask::Causal => causal_mask::<T>(t),
            SelfMask::Bidirectional => key_padding_mask::<T>(ids, b, t),
        };
        let m = ctx.tape.input(m);
        let record_layer = ctx.attention_layer.unwrap_or(layers.len() - 1);
        if ctx.record_attention && record_layer >= layers.len() {
            return Err(Error::Config(format!("attention layer {record_layer} of {} layers", layers.len())));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (y, weights) = decoder_layer(ctx, x, image, layer, Some(m), &self.config)?;
            if ctx.record_attention && l == record_layer {
                let s = ctx.tape.shape(weights);
                let shape = [s[0], s[1], s[2], s[3]];
                let w = ctx.tape.value(weights).iter().map(|v| v.to_f64_lossy()).collect();
                ctx.attention.push(AttentionRecord { layer: l, shape, weights: w });
            }
            x = y;
        }
        Ok(x)
    }

    /// Tied output projection `h · Eᵀ`.
    pub fn output_logits<T: Element>(&self, ctx: &mut Ctx<'_, T>, hidden: Var) -> Result<Var> {
        let e = ctx.p(self.embedding);
        Ok(ctx.tape.matmul_nt(hidden, e)?)
    }

    /// Logits `[B, T, V]`.
    ///
    /// Forward: position `t` predicts token `t + 1`. Backward: each row is
    /// reversed over its valid length, run through the backward stack, and
    /// the logits un-reversed, so position `t` predicts token `t − 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        direction: Direction,
        ids: &[usize],
        lengths: &[usize],
        t: usize,
        image: Var,
    ) -> Result<Var> {
        let b = lengths.len();
        match direction {
            Direction::Forward => {
                let hdn = self.run_stack(ctx, direction, ids, b, t, image, SelfMask::Causal)?;
                self.output_logits(ctx, hdn)
            }
            Direction::Backward => {
                let rev = reversal_index(lengths, t);
                let rev_ids: Vec<usize> = rev.iter().map(|&i| ids[i]).collect();
                let hdn = self.run_stack(ctx, direction, &rev_ids, b, t, image, SelfMask::Causal)?;
                let logits = self.output_logits(ctx, hdn)?;
                let v = self.config.vocab;
                let flat = ctx.tape.reshape(logits, &[b * t, v])?;
                // the reversal is an involution, so the same index undoes it
                let back = ctx.tape.gather_rows(flat, &rev)?;
                Ok(ctx.tape.reshape(back, &[b, t, v])?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bicap_tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> HeadConfig {
        HeadConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            feedforward: 16,
            vocab: 11,
            max_positions: 6,
            dropout: 0.0,
            allow_nonstandard: true,
        }
    }

    #[test]
    fn config_law() {
        let mut c = cfg();
        c.allow_nonstandard = false;
        assert!(c.validate().is_err());
        c.hidden = 128;
        c.heads = 2;
        c.feedforward = 512;
        assert!(c.validate().is_ok());
        c.heads = 3;
        c.allow_nonstandard = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn causal_mask_pattern() {
        let m = causal_mask::<f64>(3);
        let inf = f64::NEG_INFINITY;
        assert_eq!(m.data(), &[0.0, inf, inf, 0.0, 0.0, inf, 0.0, 0.0, 0.0]);
        assert_eq!(causal_mask::<f64>(1).data(), &[0.0]);
    }

    #[test]
    fn reversal_is_an_involution() {
        let idx = reversal_index(&[3, 5, 1], 5);
        assert_eq!(&idx[..5], &[2, 1, 0, 3, 4]);
        for (i, &j) in idx.iter().enumerate() {
            assert_eq!(idx[j], i);
        }
    }

    #[test]
    fn single_key_attention_returns_value_path() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::build(&mut store, "a", 4, &mut rng).unwrap();
        let q = Tensor::<f64>::randn(&[1, 1, 4], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[1, 1, 4], 1.0, &mut rng);
        let mut ctx = Ctx::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let (qv, kvv) = (ctx.tape.input(q), ctx.tape.input(kv));
        let (out, w) = multihead_attention(&mut ctx, qv, kvv, &p, None, 1).unwrap();
        assert_eq!(ctx.tape.value(w), &[1.0]);
        let v = ctx.linear(kvv, p.wv, Some(p.bv)).unwrap();
        let expect = ctx.linear(v, p.wo, Some(p.bo)).unwrap();
        let diff: f64 = ctx.tape.value(out).iter().zip(ctx.tape.value(expect)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn embed_rejects_overlong_sequences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = TextualHead::build(&cfg(), true, &mut store, &mut rng).unwrap();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        assert!(head.embed(&mut ctx, &[5; 7], 1, 7).is_err());
        let e = head.embed(&mut ctx, &[5, 6, 5, 6], 2, 2).unwrap();
        let v = ctx.tape.value(e);
        assert_eq!(&v[..16], &v[16..]);
    }
}
