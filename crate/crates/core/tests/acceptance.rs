//! One PASS/FAIL line per acceptance criterion; exits non-zero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bicap_core::attention::{extract_attention, write_overlays};
use bicap_core::checkpoint::Checkpoint;
use bicap_core::config::{DataConfig, OptimConfig, ProbeConfig};
use bicap_core::data::synth::{canonical_labeled, overfit_corpus};
use bicap_core::data::{eval_view, CaptionRecord, LabeledRecord};
use bicap_core::decode::{beam_search, greedy, Hypothesis, ModelScorer, NextTokenScorer};
use bicap_core::head::Direction;
use bicap_core::model::Model;
use bicap_core::optim::{build_param_groups, LookAhead, Optimizer, Schedule, Sgd};
use bicap_core::probe::{probe_backbone, run_probe, ProbeProtocol};
use bicap_core::rng::{derive, Stream};
use bicap_core::tasks::TaskKind;
use bicap_core::tokenizer::{train_bpe, Vocabulary, EOS, MARKER, RESERVED, SOS};
use bicap_core::train::{train, Outputs, TrainReport};
use bicap_tensor::Tensor;
use common::{causality_trial_max, jitter_params, overfit_config, overfit_vocab, random_batch, token_losses, toy_config};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn report(failures: &mut usize, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("PASS  {n:>2} {name}: {detail} [{secs:.1}s]"),
        Err(detail) => {
            *failures += 1;
            println!("FAIL  {n:>2} {name}: {detail} [{secs:.1}s]");
        }
    }
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    for &(name, case) in common::fd::CASES {
        let e = case();
        ensure(e <= common::fd::TOL, format!("{name}: max relative error {e:.3e}"))?;
        if e >= worst.0 {
            worst = (e, name);
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("{} graphs, worst {:.2e} ({}) in {:.1}s", common::fd::CASES.len(), worst.0, worst.1, elapsed.as_secs_f64()))
}

fn causality() -> Outcome {
    let mut model = Model::<f64>::new(&toy_config(TaskKind::Bicap, 32, 0.1), 31).unwrap();
    jitter_params(&mut model, 0.5, 31);
    let mut parts = Vec::new();
    for dir in [Direction::Forward, Direction::Backward] {
        let worst = causality_trial_max(&mut model, dir, 100, 31);
        ensure(worst <= 1e-6, format!("{dir:?} change {worst:e}"))?;
        parts.push(format!("{dir:?} max change {worst:.1e}"));
    }
    Ok(format!("100 trials per direction, {}", parts.join(", ")))
}

fn uniform_logits() -> Outcome {
    let v = 10_000;
    let mut model = Model::<f64>::new(&toy_config(TaskKind::Bicap, v, 0.0), 32).unwrap();
    let e = model.net.head.as_ref().unwrap().embedding;
    model.store.get_mut(e).value.data_mut().fill(0.0);
    let batch = random_batch(&[8, 5, 3], v, 8, 32);
    let mut means = Vec::new();
    for dir in [Direction::Forward, Direction::Backward] {
        let losses = token_losses(&mut model, &batch, dir);
        for l in &losses {
            ensure((l - 9.21034).abs() <= 1e-3, format!("{dir:?} token loss {l}"))?;
        }
        means.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(format!("per-token loss forward {:.5}, backward {:.5}", means[0], means[1]))
}

struct OverfitRun {
    records: Vec<CaptionRecord>,
    probe: Vec<LabeledRecord>,
    vocab: Vocabulary,
    run: Checkpoint<f32>,
    report: TrainReport,
    best: Vec<u8>,
    elapsed: Duration,
}

fn overfit_run(task: TaskKind, records: &[CaptionRecord], probe: &[LabeledRecord], vocab: &Vocabulary) -> OverfitRun {
    let cfg = overfit_config(task);
    let total = cfg.optim.total_iters;
    let dir = tempfile::tempdir().unwrap();
    let mut run = Checkpoint::<f32>::fresh(cfg, vocab.clone()).unwrap();
    let t = Instant::now();
    let report = train(&mut run, records, Some(probe), total, &Outputs::to(dir.path())).unwrap();
    let elapsed = t.elapsed();
    let best = std::fs::read(dir.path().join("best.ckpt")).unwrap();
    OverfitRun { records: records.to_vec(), probe: probe.to_vec(), vocab: vocab.clone(), run, report, best, elapsed }
}

fn greedy_caption(model: &mut Model<f32>, image: &Tensor<f32>, data: &DataConfig) -> Hypothesis {
    let view = eval_view(image, data).unwrap();
    let mut scorer = ModelScorer::new(model, &view).unwrap();
    greedy(&mut scorer, SOS, EOS, data.max_len - 1).unwrap()
}

fn overfit(a: &mut OverfitRun) -> Outcome {
    let cfg = &a.run.config;
    ensure(a.records.len() == 32 && cfg.data.image_side == 64, "corpus is 32 pairs at 64×64")?;
    ensure(a.vocab.len() <= 64, format!("vocabulary of {}", a.vocab.len()))?;
    let longest = a.records.iter().map(|r| a.vocab.encode(&r.captions[0]).len() - 2).max().unwrap();
    ensure(longest <= 8, format!("caption of {longest} tokens"))?;
    let o = &cfg.optim;
    ensure(o.lookahead_alpha == 0.5 && o.lookahead_k == 5 && o.warmup_iters > 0, "optimizer settings")?;
    ensure(o.total_iters <= 3000, format!("{} iterations", o.total_iters))?;
    let first_below = a.report.rows.iter().find(|r| r.loss < 0.05).map(|r| r.iter);
    let last = a.report.rows.last().unwrap().loss;
    ensure(first_below.is_some(), format!("loss never below 0.05, final {last}"))?;
    ensure(a.elapsed < Duration::from_secs(600), format!("took {:?}", a.elapsed))?;
    let data = cfg.data.clone();
    let mut hits = 0;
    for r in &a.records {
        let h = greedy_caption(&mut a.run.model, &r.image, &data);
        if h.tokens == a.vocab.encode(&r.captions[0]) {
            hits += 1;
        }
    }
    ensure(hits >= 30, format!("greedy reproduces {hits}/32"))?;
    Ok(format!(
        "loss < 0.05 from iteration {}, final {last:.4}; greedy {hits}/32; {:.0}s",
        first_below.unwrap(),
        a.elapsed.as_secs_f64()
    ))
}

/// Next-token log-probabilities that depend on the position only.
struct TableScorer {
    table: Vec<Vec<f64>>,
}

impl NextTokenScorer for TableScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> bicap_core::Result<Vec<f64>> {
        Ok(self.table[prefix.len() - 1].clone())
    }
}

/// Every finished sequence, best first: only the last token may be `eos`,
/// and a sequence is finished at `eos` or at `max_len` tokens.
fn exhaustive(table: &[Vec<f64>], start: usize, eos: usize, max_len: usize) -> Vec<Hypothesis> {
    let v = table[0].len();
    let mut done = Vec::new();
    let mut stack = vec![Hypothesis { tokens: vec![start], score: 0.0 }];
    while let Some(h) = stack.pop() {
        let step = h.tokens.len() - 1;
        for tok in 0..v {
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            let next = Hypothesis { tokens, score: h.score + table[step][tok] };
            if tok == eos || step + 1 == max_len {
                done.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    done.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| a.tokens.cmp(&b.tokens)));
    done
}

fn beam_oracle() -> Outcome {
    let (v, max_len, start, eos) = (3, 3, 0, 2);
    let mut rng = derive(5, Stream::Synth, 5, 5);
    let trials = 500;
    for trial in 0..trials {
        let table: Vec<Vec<f64>> = (0..max_len)
            .map(|_| {
                let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
                logits.iter().map(|x| x - lse).collect()
            })
            .collect();
        let all = exhaustive(&table, start, eos, max_len);
        for beams in [2, 3] {
            let got = beam_search(&mut TableScorer { table: table.clone() }, start, eos, beams, max_len).unwrap();
            ensure(got == all[..beams], format!("trial {trial}, beam {beams}: {got:?} vs {:?}", &all[..beams]))?;
        }
    }
    Ok(format!("beams 2 and 3 equal exhaustive top-k on {trials} random tables"))
}

fn bpe() -> Outcome {
    // words ▁low ×2, ▁lower, ▁lowest. (▁,l) (l,o) (o,w) tie at 4; the
    // smallest pair wins, then (lo,w), (▁,low) at 4, (▁low,e) at 2; every
    // remaining pair occurs once.
    let m = MARKER.to_string();
    let want: Vec<(String, String)> = [("l", "o"), ("lo", "w"), (m.as_str(), "low"), (&format!("{m}low"), "e")]
        .iter()
        .map(|&(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let vocab = train_bpe(&["low low lower lowest"], 100).unwrap();
    ensure(vocab.merges() == want.as_slice(), format!("merges {:?}", vocab.merges()))?;
    ensure(vocab.len() == RESERVED.len() + 8 + 4, format!("vocabulary of {}", vocab.len()))?;

    // a token is admissible when its characters, ignoring the marker, are
    // all letters, all digits, or all punctuation
    let class = |c: char| {
        if c.is_alphabetic() {
            0
        } else if c.is_numeric() {
            1
        } else {
            2
        }
    };
    let corpus = ["dog? dog! end.", "dog? dog! end. 42 dogs, 7 ends! dog?? end..", "dog! dog? 99 end."];
    let vocab = train_bpe(&corpus, 200).unwrap();
    let mut learned = 0;
    for tok in vocab.tokens().iter().skip(RESERVED.len()) {
        let classes: std::collections::BTreeSet<i32> = tok.chars().filter(|&c| c != MARKER).map(class).collect();
        ensure(classes.len() <= 1, format!("token {tok:?} mixes classes"))?;
        learned += 1;
    }
    ensure(vocab.id("dog").is_some() || vocab.id(&format!("{m}dog")).is_some(), "no word token learned")?;
    Ok(format!("merge list {:?}; {learned} tokens respect the class restriction", want.iter().map(|(a, b)| format!("{a}+{b}")).collect::<Vec<_>>()))
}

fn optim_cfg(alpha: f64) -> OptimConfig {
    OptimConfig {
        momentum: 0.9,
        weight_decay: 1e-4,
        lr_backbone: 0.02,
        lr_head: 0.05,
        lookahead_alpha: alpha,
        lookahead_k: 5,
        warmup_iters: 4,
        total_iters: 40,
    }
}

fn set_random_grads(model: &mut Model<f64>, seed: u64) {
    let mut rng = derive(seed, Stream::Synth, 7, 7);
    for p in model.store.params_mut() {
        let n = p.value.numel();
        p.value.grad = Some((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
}

fn optimizer_laws() -> Outcome {
    let cfg = toy_config(TaskKind::Bicap, 32, 0.0);
    let steps = 23;

    // α = 1: identical to the inner optimizer at every step
    let mut a = Model::<f64>::new(&cfg, 41).unwrap();
    let mut b = Model::<f64>::new(&cfg, 41).unwrap();
    let oc = optim_cfg(1.0);
    let mut opt = Optimizer::new(&a.store, &oc).unwrap();
    let groups = build_param_groups(&b.store, &oc).unwrap();
    let mut sgd = Sgd::new(oc.momentum, b.store.len());
    let schedule = Schedule::new(oc.warmup_iters, oc.total_iters).unwrap();
    for it in 0..steps {
        set_random_grads(&mut a, it as u64);
        set_random_grads(&mut b, it as u64);
        opt.step(&mut a.store, it).unwrap();
        for g in &groups {
            sgd.step(&mut b.store, g, schedule.lr_at(g.base_lr, it).unwrap()).unwrap();
        }
        for (p, q) in a.store.params().iter().zip(b.store.params()) {
            ensure(p.value.data() == q.value.data(), format!("α=1 differs at step {it} in {}", p.name))?;
        }
    }

    // α = 0: slow weights never move and every sync resets the fast ones
    let mut m = Model::<f64>::new(&cfg, 42).unwrap();
    let initial: Vec<Vec<f64>> = m.store.params().iter().map(|p| p.value.data().to_vec()).collect();
    let mut opt = Optimizer::new(&m.store, &optim_cfg(0.0)).unwrap();
    for it in 0..steps {
        set_random_grads(&mut m, 100 + it as u64);
        opt.step(&mut m.store, it).unwrap();
        ensure(opt.lookahead.slow == initial, format!("α=0 slow weights moved at step {it}"))?;
        if (it + 1) % 5 == 0 {
            let now: Vec<Vec<f64>> = m.store.params().iter().map(|p| p.value.data().to_vec()).collect();
            ensure(now == initial, format!("α=0 fast weights not reset at step {it}"))?;
        }
    }
    ensure(LookAhead::new(&m.store, 1.5, 5).is_err(), "α outside [0, 1] accepted")?;

    // schedule against closed forms
    let (max, warmup, total) = (0.3, 7, 50);
    let s = Schedule::new(warmup, total).unwrap();
    ensure(s.lr_at(max, 0).unwrap() == 0.0, "lr_at(0) ≠ 0")?;
    ensure(s.lr_at(max, warmup).unwrap() == max, "lr_at(warmup) ≠ max")?;
    ensure(s.lr_at(max, total).unwrap().abs() <= 1e-12, "lr_at(total) ≠ 0")?;
    let ramp_end = max * warmup as f64 / warmup as f64;
    ensure((ramp_end - s.lr_at(max, warmup).unwrap()).abs() <= 1e-12, "warmup discontinuity")?;
    for it in 0..=total {
        let want = if it < warmup {
            max * it as f64 / warmup as f64
        } else {
            let p = (it - warmup) as f64 / (total - warmup) as f64;
            max * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
        };
        ensure((s.lr_at(max, it).unwrap() - want).abs() <= 1e-12, format!("lr_at({it})"))?;
    }
    ensure(s.lr_at(max, total + 1).is_err(), "iteration past the schedule accepted")?;

    // decay exclusion by name, then by behavior under zero gradients
    let mut checked = 0;
    for task in [TaskKind::Bicap, TaskKind::Forward, TaskKind::Mlm, TaskKind::Tokclf] {
        let mut m = Model::<f64>::new(&toy_config(task, 32, 0.0), 43).unwrap();
        let oc = optim_cfg(0.5);
        let groups = build_param_groups(&m.store, &oc).unwrap();
        for (i, p) in m.store.params().iter().enumerate() {
            let plain = p.name.ends_with(".bias") || p.name.ends_with(".gain");
            let g = groups.iter().find(|g| g.params.iter().any(|id| id.0 == i)).unwrap();
            ensure(g.decayed != plain && (g.weight_decay == 0.0) == plain, format!("{} decay group", p.name))?;
            if plain {
                checked += 1;
            }
        }
        for p in m.store.params_mut() {
            p.value.data_mut().fill(1.0);
            p.value.grad = Some(vec![0.0; p.value.numel()]);
        }
        let mut opt = Optimizer::new(&m.store, &oc).unwrap();
        opt.step(&mut m.store, oc.warmup_iters).unwrap();
        for p in m.store.params() {
            let plain = p.name.ends_with(".bias") || p.name.ends_with(".gain");
            let moved = p.value.data().iter().any(|&x| x != 1.0);
            ensure(moved != plain, format!("{} moved={moved} under zero gradient", p.name))?;
        }
    }
    Ok(format!(
        "α=1 exact over {steps} steps, α=0 slow constant, schedule within 1e-12, {checked} norm/bias tensors undecayed"
    ))
}

fn mlm_vs_bicap(a: &OverfitRun) -> Outcome {
    let m = overfit_run(TaskKind::Mlm, &a.records, &a.probe, &a.vocab);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for r in &m.report.rows {
        let frac = r.supervised as f64 / r.positions as f64;
        ensure((0.13..=0.17).contains(&frac), format!("iteration {}: {}/{}", r.iter, r.supervised, r.positions))?;
        lo = lo.min(frac);
        hi = hi.max(frac);
    }
    let warmup = a.run.config.optim.warmup_iters;
    let mut pairs = Vec::new();
    for (rb, rm) in a.report.rows.iter().zip(&m.report.rows) {
        assert_eq!(rb.iter, rm.iter);
        if let (Some(b), Some(mm)) = (rb.probe_metric, rm.probe_metric) {
            if rb.iter >= warmup {
                ensure(mm < b, format!("iteration {}: mlm {mm:.4} ≥ bicap {b:.4}", rb.iter))?;
                pairs.push(format!("{}: {mm:.3}<{b:.3}", rb.iter + 1));
            }
        }
    }
    ensure(!pairs.is_empty(), "no checkpoints after warmup")?;
    Ok(format!("masked fraction {lo:.3}..{hi:.3}; probe mAP {}", pairs.join(", ")))
}

fn probe_laws() -> Outcome {
    let mut rng = derive(9, Stream::Synth, 9, 9);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut sample = |n: usize| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let centre = if label == 0 { -1.5 } else { 1.5 };
            x.push((0..6).map(|d| if d < 2 { centre } else { 0.0 } + noise.sample(&mut rng)).collect::<Vec<f64>>());
            y.push(label);
        }
        (x, y)
    };
    let (xtr, ytr) = sample(90);
    let (xte, yte) = sample(45);
    let mut parts = Vec::new();
    for protocol in [ProbeProtocol::Svm, ProbeProtocol::Softmax] {
        let cfg = ProbeConfig { protocol, ..ProbeConfig::default() };
        let r = run_probe(xtr.clone(), &ytr, xte.clone(), &yte, &cfg).unwrap();
        ensure(r.accuracy == 1.0, format!("{protocol:?} accuracy {}", r.accuracy))?;
        if protocol == ProbeProtocol::Svm {
            ensure(cfg.folds == 3, "fold count")?;
            let costs: Vec<f64> = r.fold_scores.iter().map(|&(c, _)| c).collect();
            ensure(costs == [0.01, 0.1, 1.0, 10.0], format!("swept {costs:?}"))?;
            let c = r.chosen_cost.unwrap();
            ensure(costs.contains(&c), format!("chose {c}"))?;
            parts.push(format!("svm 100% (C={c})"));
        } else {
            parts.push("softmax 100%".into());
        }
    }

    let cfg = toy_config(TaskKind::Bicap, 32, 0.0);
    let mut model = Model::<f64>::new(&cfg, 44).unwrap();
    let data = DataConfig { image_side: 8, ..DataConfig::default() };
    let records = canonical_labeled(30, 8, 3);
    let before = model.store.checksum();
    for protocol in [ProbeProtocol::Svm, ProbeProtocol::Softmax] {
        probe_backbone(&mut model, &records, &data, &ProbeConfig { protocol, ..ProbeConfig::default() }).unwrap();
    }
    ensure(model.store.checksum() == before, "probing changed the backbone")?;
    parts.push(format!("backbone checksum {before:016x} unchanged"));
    Ok(parts.join(", "))
}

fn determinism(a: &OverfitRun) -> Outcome {
    let b = overfit_run(TaskKind::Bicap, &a.records, &a.probe, &a.vocab);
    ensure(a.best == b.best, "best.ckpt differs between runs")?;
    let loaded = Checkpoint::<f32>::from_bytes(&a.best).unwrap();
    ensure(loaded.to_bytes() == a.best, "load/save round trip differs")?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("again.ckpt");
    loaded.save(&path).unwrap();
    ensure(Checkpoint::<f32>::load(&path).unwrap().to_bytes() == a.best, "file round trip differs")?;
    Ok(format!("best.ckpt of two runs identical ({} bytes); round trip bit-exact", a.best.len()))
}

fn ppm_dims(path: &Path) -> (u32, u32) {
    image::image_dimensions(path).unwrap()
}

fn attention_export(a: &mut OverfitRun) -> Outcome {
    let data = a.run.config.data.clone();
    let dir = tempfile::tempdir().unwrap();
    let (mut files, mut maps_seen, mut worst) = (0, 0, 0.0f64);
    for r in a.records.iter().step_by(4) {
        let h = greedy_caption(&mut a.run.model, &r.image, &data);
        let view = eval_view(&r.image, &data).unwrap();
        let maps = extract_attention(&mut a.run.model, &view, &h.tokens, None).unwrap();
        ensure(maps.len() == h.tokens.len() - 1, format!("{} maps for {} tokens", maps.len(), h.tokens.len() - 1))?;
        for m in &maps {
            worst = worst.max((m.mean.iter().sum::<f64>() - 1.0).abs());
            for head in &m.heads {
                worst = worst.max((head.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let sub = dir.path().join(&r.id);
        let written = write_overlays(&sub, &r.id, &r.image, &maps, &a.vocab).unwrap();
        let on_disk = std::fs::read_dir(&sub).unwrap().count();
        ensure(written.len() == maps.len() && on_disk == maps.len(), format!("{on_disk} files for {} tokens", maps.len()))?;
        for p in &written {
            ensure(ppm_dims(p) == (64, 64), format!("{} is {:?}", p.display(), ppm_dims(p)))?;
        }
        files += on_disk;
        maps_seen += maps.len();
    }
    ensure(worst <= 1e-5, format!("map sums off by {worst:e}"))?;
    Ok(format!("{files} overlays at 64×64 for {maps_seen} emitted tokens; map sums within {worst:.1e} of 1"))
}

fn main() {
    let mut failures = 0;
    report(&mut failures, 1, "finite-difference gradients", gradient_check);
    report(&mut failures, 2, "decoder causality", causality);
    report(&mut failures, 3, "uniform-logit loss", uniform_logits);

    let records = overfit_corpus(64);
    let probe = canonical_labeled(300, 64, 7);
    let vocab = overfit_vocab(&records, 64);
    let mut run_a = catch_unwind(AssertUnwindSafe(|| overfit_run(TaskKind::Bicap, &records, &probe, &vocab))).ok();
    let missing = || Err::<String, String>("overfit run failed".into());

    report(&mut failures, 4, "overfit 32 pairs", || run_a.as_mut().map_or_else(missing, overfit));
    report(&mut failures, 5, "beam search oracle", beam_oracle);
    report(&mut failures, 6, "BPE", bpe);
    report(&mut failures, 7, "optimizer laws", optimizer_laws);
    report(&mut failures, 8, "bicap vs masked LM", || run_a.as_ref().map_or_else(missing, mlm_vs_bicap));
    report(&mut failures, 9, "linear probe", probe_laws);
    report(&mut failures, 10, "determinism and checkpoints", || run_a.as_ref().map_or_else(missing, determinism));
    report(&mut failures, 11, "attention export", || run_a.as_mut().map_or_else(missing, attention_export));

    println!("{} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
