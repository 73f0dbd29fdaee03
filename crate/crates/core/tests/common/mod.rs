#![allow(dead_code)]

use bicap_core::backbone::{BackboneConfig, BlockKind, StemKind};
use bicap_core::config::RunConfig;
use bicap_core::data::{Batch, CaptionRecord};
use bicap_core::head::{Direction, HeadConfig};
use bicap_core::model::{Model, ModelConfig, Net};
use bicap_core::params::Ctx;
use bicap_core::rng::{derive, Stream};
use bicap_core::tasks::TaskKind;
use bicap_core::tokenizer::{train_bpe, Vocabulary, EOS, PAD, RESERVED, SOS};
use bicap_tensor::{Mode, Tensor, Var};
use rand::Rng;

pub mod fd;

pub const OVERFIT_TOML: &str = include_str!("../../../../configs/overfit.toml");

/// Widths (4, 8), one layer, H = 16, V = 32, 8 px images on a 2 × 2 grid.
pub fn toy_config(task: TaskKind, vocab: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            widths: vec![4, 8],
            blocks: vec![1, 1],
            block: BlockKind::Basic,
            stem: StemKind::Conv3x3,
            image_side: 8,
            grid_side: 2,
        },
        head: HeadConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            feedforward: 64,
            vocab,
            max_positions: 8,
            dropout,
            allow_nonstandard: true,
        },
        task,
    }
}

/// Random images and captions; rows have distinct lengths and end in [PAD].
pub fn random_batch(sizes: &[usize], vocab: usize, side: usize, seed: u64) -> Batch {
    let mut rng = derive(seed, Stream::Synth, 0, 0);
    let len = *sizes.iter().max().unwrap();
    let mut tokens = Vec::new();
    for &n in sizes {
        tokens.push(SOS);
        for _ in 1..n - 1 {
            tokens.push(rng.gen_range(RESERVED.len()..vocab));
        }
        tokens.push(EOS);
        tokens.extend(std::iter::repeat(PAD).take(len - n));
    }
    let b = sizes.len();
    let images: Vec<f32> = (0..b * 3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Batch {
        record_ids: (0..b).map(|i| format!("r{i}")).collect(),
        images: Tensor::new(&[b, 3, side, side], images).unwrap(),
        mask: tokens.iter().map(|&t| t != PAD).collect(),
        tokens,
        len,
        lengths: sizes.to_vec(),
    }
}

/// Denominator floor of the relative error, per unit of loss: a gradient
/// below a millionth of the loss is within f64 difference noise at the step
/// used here, so coordinates whose true gradient is zero (a key bias under
/// softmax, a shift cancelled by batch norm) are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn fd_relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR * loss.abs().max(1.0))
}

/// Moves every parameter by N(0, std²) so the check runs away from the
/// near-symmetric initialization, where most gradients are tiny.
pub fn jitter_params(model: &mut Model<f64>, std: f64, seed: u64) {
    let mut rng = derive(seed, Stream::Synth, 1, 1);
    for p in model.store.params_mut() {
        let noise = Tensor::<f64>::randn(p.value.shape(), std, &mut rng);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Largest elementwise relative error between the recorded gradient of
/// every stored parameter and its central difference.
pub fn fd_check<F>(model: &mut Model<f64>, loss: F, eps: f64) -> f64
where
    F: Fn(&mut Ctx<'_, f64>, &Net) -> bicap_core::Result<Var>,
{
    jitter_params(model, 0.5, 17);
    let net = model.net.clone();
    let run = |model: &mut Model<f64>, grad: bool| -> f64 {
        // identical dropout masks on every evaluation
        let mut ctx = Ctx::new(&mut model.store, Mode::Train, derive(5, Stream::Dropout, 0, 0));
        let v = loss(&mut ctx, &net).unwrap();
        if grad {
            ctx.backward(v).unwrap()
        } else {
            ctx.tape.item(v)
        }
    };
    model.store.clear_grads();
    let loss_value = run(model, true);
    let analytic: Vec<Vec<f64>> = model
        .store
        .params()
        .iter()
        .map(|p| p.value.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect();
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.store.params()[i].value.data()[j];
            model.store.params_mut()[i].value.data_mut()[j] = orig + eps;
            let plus = run(model, false);
            model.store.params_mut()[i].value.data_mut()[j] = orig - eps;
            let minus = run(model, false);
            model.store.params_mut()[i].value.data_mut()[j] = orig;
            let r = fd_relative_error(a, (plus - minus) / (2.0 * eps), loss_value);
            worst = worst.max(r);
        }
    }
    worst
}

/// Evaluation-mode logits `[B, T, V]` of one direction, flattened.
pub fn direction_logits(model: &mut Model<f64>, batch: &Batch, direction: Direction) -> Vec<f64> {
    let net = model.net.clone();
    let mut ctx = Ctx::new(&mut model.store, Mode::Eval, derive(0, Stream::Dropout, 0, 0)).frozen();
    let images = ctx.tape.input(batch.images.cast::<f64>());
    let feats = net.image_features(&mut ctx, images).unwrap();
    let logits = net
        .head()
        .unwrap()
        .decode_logits(&mut ctx, direction, &batch.tokens, &batch.lengths, batch.len, feats)
        .unwrap();
    ctx.tape.value(logits).to_vec()
}

pub fn overfit_config(task: TaskKind) -> RunConfig {
    let mut cfg = RunConfig::from_toml(OVERFIT_TOML).unwrap();
    cfg.train.task = task;
    cfg
}

pub fn overfit_vocab(records: &[CaptionRecord], size: usize) -> Vocabulary {
    let captions: Vec<&String> = records.iter().flat_map(|r| &r.captions).collect();
    train_bpe(&captions, size).unwrap()
}

/// Largest logit change at protected positions over `trials` random
/// perturbations of unprotected tokens.
///
/// Forward: positions `≤ c` are protected and tokens after `c` perturbed;
/// backward: positions `≥ c` are protected and tokens before `c` perturbed.
pub fn causality_trial_max(model: &mut Model<f64>, direction: Direction, trials: usize, seed: u64) -> f64 {
    let vocab = model.net.config.head.vocab;
    let max_t = model.net.config.head.max_positions;
    let side = model.net.config.backbone.image_side;
    let mut rng = derive(seed, Stream::Synth, 3, 0);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let n0 = rng.gen_range(2..=max_t);
        let n1 = rng.gen_range(2..=max_t);
        let batch = random_batch(&[n0, n1], vocab, side, seed * 1000 + trial as u64);
        // at least one token on each side of the cut
        let (c, range) = match direction {
            Direction::Forward => {
                let c = rng.gen_range(0..n0 - 1);
                (c, c + 1..n0)
            }
            Direction::Backward => {
                let c = rng.gen_range(1..n0);
                (c, 0..c)
            }
        };
        let mut changed = batch.clone();
        for p in range {
            changed.tokens[p] = rng.gen_range(0..vocab);
        }
        let a = direction_logits(model, &batch, direction);
        let b = direction_logits(model, &changed, direction);
        let protected: Vec<usize> = match direction {
            Direction::Forward => (0..=c).collect(),
            Direction::Backward => (c..n0).collect(),
        };
        for p in protected {
            for v in 0..vocab {
                let i = p * vocab + v;
                worst = worst.max((a[i] - b[i]).abs());
            }
        }
        // row 1 is untouched
        let t = batch.len;
        for i in t * vocab..2 * t * vocab {
            worst = worst.max((a[i] - b[i]).abs());
        }
    }
    worst
}

/// Per-token negative log-likelihoods of one direction, excluding [PAD] targets.
pub fn token_losses(model: &mut Model<f64>, batch: &Batch, direction: Direction) -> Vec<f64> {
    let v = model.net.config.head.vocab;
    let logits = direction_logits(model, batch, direction);
    let targets = bicap_core::tasks::captioning_targets(batch, direction);
    targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| {
            let row = &logits[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}
