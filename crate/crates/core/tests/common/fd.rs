//! Finite-difference cases, each returning its largest relative error.

use bicap_core::backbone::{BlockKind, StemKind};
use bicap_core::head::{causal_mask, decoder_layer, multihead_attention, Direction, SelfMask, TextualHead};
use bicap_core::model::Model;
use bicap_core::params::{Ctx, Kind, Part};
use bicap_core::rng::{derive, Stream};
use bicap_core::tasks::{bicaptioning_loss, forward_captioning_loss, masked_lm_loss, token_classification_loss, TaskKind};
use bicap_core::tokenizer::PAD;
use bicap_tensor::{Tensor, Var};

use super::{fd_check, random_batch, toy_config};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn weighted_sum(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> bicap_core::Result<Var> {
    let shape = ctx.tape.shape(y).to_vec();
    let w = Tensor::<f64>::randn(&shape, 1.0, &mut derive(seed, Stream::Synth, 9, 9));
    let w = ctx.tape.input(w);
    let p = ctx.tape.mul(y, w)?;
    Ok(ctx.tape.sum(p))
}

fn images(b: usize, side: usize) -> Tensor<f64> {
    Tensor::randn(&[b, 3, side, side], 1.0, &mut derive(3, Stream::Synth, 0, 1))
}

pub fn basic_backbone_grid() -> f64 {
    let cfg = toy_config(TaskKind::Bicap, 32, 0.0);
    let mut model = Model::<f64>::new(&cfg, 1).unwrap();
    let x = images(2, 8);
    fd_check(
        &mut model,
        |ctx, net| {
            let x = ctx.tape.input(x.clone());
            let g = net.backbone.forward_features(ctx, x)?;
            weighted_sum(ctx, g, 1)
        },
        EPS,
    )
}

pub fn bottleneck_backbone_pooled() -> f64 {
    let mut cfg = toy_config(TaskKind::Tokclf, 32, 0.0);
    cfg.backbone.block = BlockKind::Bottleneck;
    cfg.backbone.stem = StemKind::Conv7x7;
    cfg.backbone.image_side = 16;
    let mut model = Model::<f64>::new(&cfg, 2).unwrap();
    let x = images(2, 16);
    fd_check(
        &mut model,
        |ctx, net| {
            let x = ctx.tape.input(x.clone());
            let p = net.backbone.pooled_features(ctx, x)?;
            weighted_sum(ctx, p, 2)
        },
        EPS,
    )
}

/// A head plus two free inputs stored as parameters, so that differences are
/// taken with respect to the layer inputs too.
fn head_with_inputs() -> (Model<f64>, TextualHead) {
    let cfg = toy_config(TaskKind::Forward, 32, 0.0);
    let mut model = Model::<f64>::new(&cfg, 4).unwrap();
    let head = model.net.head.clone().unwrap();
    let mut rng = derive(4, Stream::Synth, 0, 0);
    let s = &mut model.store;
    s.add_normal("x", &[2, 5, 16], 1.0, Part::Head, Kind::Weight, &mut rng).unwrap();
    s.add_normal("kv", &[2, 4, 16], 1.0, Part::Head, Kind::Weight, &mut rng).unwrap();
    (model, head)
}

fn stored(ctx: &mut Ctx<'_, f64>, store_name: &str) -> Var {
    let id = ctx.store().find(store_name).unwrap();
    ctx.p(id)
}

pub fn causal_self_attention() -> f64 {
    let (mut model, head) = head_with_inputs();
    fd_check(
        &mut model,
        |ctx, _| {
            let x = stored(ctx, "x");
            let m = ctx.tape.input(causal_mask::<f64>(5));
            let (y, w) = multihead_attention(ctx, x, x, &head.forward[0].self_attn, Some(m), 2)?;
            let a = weighted_sum(ctx, y, 5)?;
            let b = weighted_sum(ctx, w, 6)?;
            Ok(ctx.tape.add(a, b)?)
        },
        EPS,
    )
}

pub fn cross_attention() -> f64 {
    let (mut model, head) = head_with_inputs();
    fd_check(
        &mut model,
        |ctx, _| {
            let x = stored(ctx, "x");
            let kv = stored(ctx, "kv");
            let (y, _) = multihead_attention(ctx, x, kv, &head.forward[0].cross_attn, None, 2)?;
            weighted_sum(ctx, y, 7)
        },
        EPS,
    )
}

pub fn decoder_layer_with_dropout() -> f64 {
    let (mut model, mut head) = head_with_inputs();
    head.config.dropout = 0.2;
    fd_check(
        &mut model,
        |ctx, _| {
            let x = stored(ctx, "x");
            let kv = stored(ctx, "kv");
            let m = ctx.tape.input(causal_mask::<f64>(5));
            let (y, _) = decoder_layer(ctx, x, kv, &head.forward[0], Some(m), &head.config)?;
            weighted_sum(ctx, y, 8)
        },
        EPS,
    )
}

pub fn embedding_and_tied_output() -> f64 {
    let (mut model, head) = head_with_inputs();
    let ids = [0, 7, 9, 31, 1, 0, 12, 12, 1, PAD];
    let targets = [7, 9, 31, 1, PAD, 12, 12, 1, PAD, PAD];
    fd_check(
        &mut model,
        |ctx, _| {
            let x = head.embed(ctx, &ids, 2, 5)?;
            let logits = head.output_logits(ctx, x)?;
            let flat = ctx.tape.reshape(logits, &[10, 32])?;
            Ok(ctx.tape.cross_entropy(flat, &targets, Some(PAD))?)
        },
        EPS,
    )
}

pub fn bidirectional_stack() -> f64 {
    let (mut model, head) = head_with_inputs();
    let ids = [0, 7, 9, 31, 1, 0, 12, 1, PAD, PAD];
    fd_check(
        &mut model,
        |ctx, _| {
            let kv = stored(ctx, "kv");
            let h = head.run_stack(ctx, Direction::Forward, &ids, 2, 5, kv, SelfMask::Bidirectional)?;
            weighted_sum(ctx, h, 10)
        },
        EPS,
    )
}

pub fn full_bicaptioning_graph() -> f64 {
    let cfg = toy_config(TaskKind::Bicap, 32, 0.1);
    let mut model = Model::<f64>::new(&cfg, 6).unwrap();
    let batch = random_batch(&[6, 4, 3], 32, 8, 6);
    fd_check(&mut model, |ctx, net| Ok(bicaptioning_loss(ctx, net, &batch)?.loss), EPS)
}

pub fn forward_objective() -> f64 {
    let batch = random_batch(&[6, 4], 32, 8, 7);
    let mut m = Model::<f64>::new(&toy_config(TaskKind::Forward, 32, 0.0), 7).unwrap();
    fd_check(&mut m, |ctx, net| Ok(forward_captioning_loss(ctx, net, &batch)?.loss), EPS)
}

pub fn token_classification_objective() -> f64 {
    let batch = random_batch(&[6, 4], 32, 8, 7);
    let mut m = Model::<f64>::new(&toy_config(TaskKind::Tokclf, 32, 0.0), 7).unwrap();
    fd_check(&mut m, |ctx, net| Ok(token_classification_loss(ctx, net, &batch)?.loss), EPS)
}

pub fn masked_lm_objective() -> f64 {
    let batch = random_batch(&[6, 4], 32, 8, 7);
    let mut m = Model::<f64>::new(&toy_config(TaskKind::Mlm, 32, 0.0), 7).unwrap();
    fd_check(
        &mut m,
        |ctx, net| {
            let mut rng = derive(7, Stream::Mask, 0, 0);
            Ok(masked_lm_loss(ctx, net, &batch, 0.3, &mut rng)?.loss)
        },
        EPS,
    )
}

pub const CASES: &[(&str, fn() -> f64)] = &[
    ("basic backbone grid", basic_backbone_grid),
    ("bottleneck backbone pooled", bottleneck_backbone_pooled),
    ("causal self-attention", causal_self_attention),
    ("cross-attention", cross_attention),
    ("decoder layer with dropout", decoder_layer_with_dropout),
    ("embedding and tied output", embedding_and_tied_output),
    ("bidirectional stack", bidirectional_stack),
    ("full bicaptioning graph", full_bicaptioning_graph),
    ("forward objective", forward_objective),
    ("token classification objective", token_classification_objective),
    ("masked LM objective", masked_lm_objective),
];
