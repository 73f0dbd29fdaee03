//! Linear probes on frozen pooled features.

use bicap_tensor::{Element, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ProbeConfig};
use crate::data::{eval_view, LabeledRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeProtocol {
    /// One-vs-rest squared-hinge classifiers, cost chosen by cross-validation; mAP.
    Svm,
    /// One softmax layer; top-1 accuracy.
    Softmax,
}

impl std::str::FromStr for ProbeProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(ProbeProtocol::Svm),
            "softmax" => Ok(ProbeProtocol::Softmax),
            other => Err(Error::Config(format!("unknown probe protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub protocol: ProbeProtocol,
    /// mAP for `svm`, top-1 accuracy for `softmax`.
    pub metric: f64,
    pub accuracy: f64,
    /// Per-class AP (`svm`) or per-class accuracy (`softmax`); NaN for a
    /// class absent from the test split.
    pub per_class: Vec<f64>,
    pub chosen_cost: Option<f64>,
    /// `(cost, mean validation mAP)` for every swept cost.
    pub fold_scores: Vec<(f64, f64)>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Train-set mean and standard deviation applied to both splits.
pub fn standardize(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let Some(d) = train.first().map(Vec::len) else { return };
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = train.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        for x in train.iter_mut().chain(test.iter_mut()) {
            x[j] = (x[j] - mean) / std;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1]` by power iteration.
fn gram_norm(x: &[Vec<f64>]) -> f64 {
    let d = x[0].len() + 1;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut next = vec![0.0; d];
        for row in x {
            let s = dot(row, &v[..d - 1]) + v[d - 1];
            for (j, r) in row.iter().enumerate() {
                next[j] += s * r;
            }
            next[d - 1] += s;
        }
        lambda = dot(&next, &next).sqrt();
        if lambda == 0.0 {
            break;
        }
        v = next.into_iter().map(|e| e / lambda).collect();
    }
    lambda
}

/// Minimizes `‖w‖²/(2Cn) + (1/n) Σ max(0, 1 − yᵢ(w·xᵢ + b))²` by gradient
/// descent with step `1/L`. Labels are ±1.
pub fn fit_svm(x: &[Vec<f64>], y: &[f64], cost: f64, steps: usize) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let d = x[0].len();
    let reg = 1.0 / (cost * n);
    // 1.05 covers the power-iteration shortfall
    let lipschitz = 1.05 * 2.0 * gram_norm(x) / n + reg;
    let step = 1.0 / lipschitz;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..steps {
        let mut gw: Vec<f64> = w.iter().map(|wj| reg * wj).collect();
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let slack = 1.0 - yi * (dot(&w, xi) + b);
            if slack > 0.0 {
                let c = -2.0 * slack * yi / n;
                for (g, xij) in gw.iter_mut().zip(xi) {
                    *g += c * xij;
                }
                gb += c;
            }
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= step * g;
        }
        b -= step * gb;
    }
    (w, b)
}

/// All-points interpolated average precision; `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut tp = 0.0;
    let mut points = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1.0;
        }
        points.push((tp / total as f64, tp / (rank + 1) as f64));
    }
    // precision envelope, then area under the recall steps
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

fn class_count(train: &[usize], test: &[usize]) -> usize {
    train.iter().chain(test).max().map_or(0, |m| m + 1)
}

fn svm_scores(
    xtr: &[Vec<f64>],
    ytr: &[usize],
    xev: &[Vec<f64>],
    classes: usize,
    cost: f64,
    steps: usize,
) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let y: Vec<f64> = ytr.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let (w, b) = fit_svm(xtr, &y, cost, steps);
            xev.iter().map(|x| dot(&w, x) + b).collect()
        })
        .collect()
}

fn map_and_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> (f64, f64, Vec<f64>) {
    let per_class: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(s, &pos).unwrap_or(f64::NAN)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().copied().filter(|a| !a.is_nan()).collect();
    let map = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let mut best = 0;
            for c in 1..scores.len() {
                if scores[c][i] > scores[best][i] {
                    best = c;
                }
            }
            best == l
        })
        .count();
    (map, correct as f64 / labels.len().max(1) as f64, per_class)
}

fn check_split(xtr: &[Vec<f64>], ytr: &[usize], xte: &[Vec<f64>], yte: &[usize]) -> Result<usize> {
    if xtr.len() != ytr.len() || xte.len() != yte.len() {
        return Err(Error::Mismatch("feature and label counts differ".into()));
    }
    if xtr.is_empty() || xte.is_empty() {
        return Err(Error::Protocol("probe needs non-empty train and test splits".into()));
    }
    let d = xtr[0].len();
    if xtr.iter().chain(xte).any(|x| x.len() != d) {
        return Err(Error::Mismatch("feature rows differ in width".into()));
    }
    Ok(class_count(ytr, yte))
}

pub fn svm_probe(
    mut xtr: Vec<Vec<f64>>,
    ytr: &[usize],
    mut xte: Vec<Vec<f64>>,
    yte: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let classes = check_split(&xtr, ytr, &xte, yte)?;
    let mut present = vec![false; classes];
    for &l in ytr {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Protocol("svm probe needs at least two classes in the training split".into()));
    }
    if cfg.costs.is_empty() || cfg.folds < 2 || cfg.folds > xtr.len() {
        return Err(Error::Protocol(format!("{} costs and {} folds for {} examples", cfg.costs.len(), cfg.folds, xtr.len())));
    }
    standardize(&mut xtr, &mut xte);
    let mut fold_scores = Vec::new();
    for &cost in &cfg.costs {
        let mut total = 0.0;
        for f in 0..cfg.folds {
            let (mut a, mut la, mut v, mut lv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (i, (x, &l)) in xtr.iter().zip(ytr).enumerate() {
                if i % cfg.folds == f {
                    v.push(x.clone());
                    lv.push(l);
                } else {
                    a.push(x.clone());
                    la.push(l);
                }
            }
            let s = svm_scores(&a, &la, &v, classes, cost, cfg.svm_steps);
            total += map_and_accuracy(&s, &lv).0;
        }
        fold_scores.push((cost, total / cfg.folds as f64));
    }
    // strict improvement only, so ties keep the smaller cost
    let mut sorted = fold_scores.clone();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut chosen = sorted[0];
    for &c in &sorted[1..] {
        if c.1 > chosen.1 {
            chosen = c;
        }
    }
    let scores = svm_scores(&xtr, ytr, &xte, classes, chosen.0, cfg.svm_steps);
    let (map, accuracy, per_class) = map_and_accuracy(&scores, yte);
    Ok(ProbeReport {
        protocol: ProbeProtocol::Svm,
        metric: map,
        accuracy,
        per_class,
        chosen_cost: Some(chosen.0),
        fold_scores,
        train_size: xtr.len(),
        test_size: xte.len(),
    })
}

pub fn softmax_probe(
    mut xtr: Vec<Vec<f64>>,
    ytr: &[usize],
    mut xte: Vec<Vec<f64>>,
    yte: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let classes = check_split(&xtr, ytr, &xte, yte)?;
    if classes < 2 {
        return Err(Error::Protocol("softmax probe needs at least two classes".into()));
    }
    standardize(&mut xtr, &mut xte);
    let d = xtr[0].len();
    let k = classes;
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut rng = derive(cfg.seed, Stream::Probe, 0, 0);
    let mut w: Vec<f64> = (0..d * k).map(|_| normal.sample(&mut rng)).collect();
    let mut b = vec![0.0; k];
    let (mut vw, mut vb) = (vec![0.0; d * k], vec![0.0; k]);
    let n = xtr.len() as f64;
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>()).collect()
    };
    let epochs = cfg.softmax_epochs.max(1);
    for e in 0..epochs {
        let lr = cfg.softmax_lr * 0.5 * (1.0 + (std::f64::consts::PI * e as f64 / epochs as f64).cos());
        let (mut gw, mut gb) = (vec![0.0; d * k], vec![0.0; k]);
        for (x, &l) in xtr.iter().zip(ytr) {
            let z = logits(&w, &b, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ez: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = ez.iter().sum();
            for c in 0..k {
                let g = (ez[c] / s - if c == l { 1.0 } else { 0.0 }) / n;
                gb[c] += g;
                for j in 0..d {
                    gw[j * k + c] += g * x[j];
                }
            }
        }
        for (p, (v, g)) in w.iter_mut().zip(vw.iter_mut().zip(&gw)).chain(b.iter_mut().zip(vb.iter_mut().zip(&gb))) {
            *v = 0.9 * *v + g;
            *p -= lr * *v;
        }
    }
    let mut hits = vec![(0usize, 0usize); k];
    for (x, &l) in xte.iter().zip(yte) {
        let z = logits(&w, &b, x);
        let mut best = 0;
        for c in 1..k {
            if z[c] > z[best] {
                best = c;
            }
        }
        hits[l].1 += 1;
        if best == l {
            hits[l].0 += 1;
        }
    }
    let correct: usize = hits.iter().map(|h| h.0).sum();
    let accuracy = correct as f64 / xte.len() as f64;
    Ok(ProbeReport {
        protocol: ProbeProtocol::Softmax,
        metric: accuracy,
        accuracy,
        per_class: hits.iter().map(|&(c, t)| if t == 0 { f64::NAN } else { c as f64 / t as f64 }).collect(),
        chosen_cost: None,
        fold_scores: Vec::new(),
        train_size: xtr.len(),
        test_size: xte.len(),
    })
}

pub fn run_probe(
    xtr: Vec<Vec<f64>>,
    ytr: &[usize],
    xte: Vec<Vec<f64>>,
    yte: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    match cfg.protocol {
        ProbeProtocol::Svm => svm_probe(xtr, ytr, xte, yte, cfg),
        ProbeProtocol::Softmax => softmax_probe(xtr, ytr, xte, yte, cfg),
    }
}

/// Pooled backbone features of every record, evaluation view, batches of 32.
pub fn extract_features<T: Element>(
    model: &mut Model<T>,
    records: &[LabeledRecord],
    data: &DataConfig,
) -> Result<Vec<Vec<f64>>> {
    let s = data.image_side;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let mut pixels = Vec::with_capacity(chunk.len() * 3 * s * s);
        for r in chunk {
            pixels.extend_from_slice(eval_view(&r.image, data)?.data());
        }
        let batch = Tensor::new(&[chunk.len(), 3, s, s], pixels)?;
        let f = model.pooled_features(&batch)?;
        let d = f.shape()[1];
        out.extend(f.data().chunks(d).map(|row| row.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Probe of the frozen backbone; records at index `i % 3 == 2` form the
/// test split.
pub fn probe_backbone<T: Element>(
    model: &mut Model<T>,
    records: &[LabeledRecord],
    data: &DataConfig,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let before = model.store.checksum();
    let feats = extract_features(model, records, data)?;
    if model.store.checksum() != before {
        return Err(Error::Numeric("probe changed backbone parameters".into()));
    }
    let (mut xtr, mut ytr, mut xte, mut yte) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (f, r)) in feats.into_iter().zip(records).enumerate() {
        if i % 3 == 2 {
            xte.push(f);
            yte.push(r.label);
        } else {
            xtr.push(f);
            ytr.push(r.label);
        }
    }
    run_probe(xtr, &ytr, xte, &yte, cfg)
}
