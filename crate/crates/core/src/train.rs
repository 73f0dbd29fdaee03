//! Training loop with periodic probing, checkpointing and a CSV log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use bicap_tensor::{Element, Mode, TensorError};

use crate::checkpoint::Checkpoint;
use crate::data::{CaptionRecord, LabeledRecord, Loader};
use crate::error::{io, Error, Result};
use crate::params::Ctx;
use crate::probe::probe_backbone;
use crate::rng::{derive, Stream};
use crate::tasks::task_loss;

pub const CSV_HEADER: &str = "iter,loss,lr_backbone,lr_head,probe_metric";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub probe_metric: Option<f64>,
    /// Positions contributing to the loss.
    pub supervised: usize,
    pub positions: usize,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let metric = self.probe_metric.map(|m| m.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.iter, self.loss, self.lr_backbone, self.lr_head, metric)
    }
}

/// Where run artifacts go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
}

impl Outputs {
    pub fn to(dir: impl Into<PathBuf>) -> Self {
        Outputs { dir: Some(dir.into()) }
    }

    pub fn best(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }

    pub fn last(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.ckpt"))
    }

    pub fn log(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train.csv"))
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Snapshot with the best probe metric; the most recent evaluation when
    /// there is no probe set.
    pub best: Option<Vec<u8>>,
}

fn dump_batch(out: &Outputs, iter: usize, ids: &[String]) -> String {
    let text = format!("non-finite loss at iteration {iter}; batch records: {}", ids.join(" "));
    if let Some(dir) = &out.dir {
        let _ = std::fs::write(dir.join("nonfinite_batch.txt"), format!("{text}\n"));
    }
    text
}

/// Runs iterations `run.state.iteration .. until`, probing and writing
/// checkpoints every `eval_period` iterations and at the end of the
/// schedule; `last.ckpt` is also written at `until`.
pub fn train<T: Element>(
    run: &mut Checkpoint<T>,
    records: &[CaptionRecord],
    probe_set: Option<&[LabeledRecord]>,
    until: usize,
    out: &Outputs,
) -> Result<TrainReport> {
    let total = run.config.optim.total_iters;
    if until > total {
        return Err(Error::Config(format!("cannot train to iteration {until} of a {total}-iteration schedule")));
    }
    if records.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let mut log = match (&out.dir, out.log()) {
        (Some(dir), Some(path)) => {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
            let fresh = run.state.iteration == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(io(&path))?;
            if fresh {
                writeln!(f, "{CSV_HEADER}").map_err(io(&path))?;
            }
            Some((f, path))
        }
        _ => None,
    };
    let cfg = run.config.clone();
    let seed = run.state.seed;
    let loader = Loader { records, cfg: &cfg.data, vocab: &run.vocab, batch_size: cfg.train.batch_size, seed };
    let net = run.model.net.clone();
    let mut report = TrainReport { rows: Vec::new(), best: None };
    for iter in run.state.iteration..until {
        let batch = loader.batch(iter)?;
        let store = &mut run.model.store;
        store.clear_grads();
        let mut ctx = Ctx::new(store, Mode::Train, derive(seed, Stream::Dropout, iter as u64, 0));
        let mut mask_rng = derive(seed, Stream::Mask, iter as u64, 0);
        let out_loss = match task_loss(&mut ctx, &net, &batch, cfg.train.task, cfg.train.mask_rate, &mut mask_rng) {
            Err(Error::Tensor(e @ TensorError::Numeric { .. })) => {
                return Err(Error::Numeric(format!("{} ({e})", dump_batch(out, iter, &batch.record_ids))));
            }
            r => r?,
        };
        let loss = ctx.tape.item(out_loss.loss).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Numeric(dump_batch(out, iter, &batch.record_ids)));
        }
        ctx.backward(out_loss.loss)?;
        let (lr_backbone, lr_head) = run.optimizer.part_rates(iter)?;
        run.optimizer.step(&mut run.model.store, iter)?;
        run.state.iteration = iter + 1;

        let mut row = LogRow {
            iter,
            loss,
            lr_backbone,
            lr_head,
            probe_metric: None,
            supervised: out_loss.supervised,
            positions: out_loss.positions,
        };
        // evaluation points depend only on the schedule, so a run split into
        // segments probes exactly where an uninterrupted one does
        let evaluate = (iter + 1) % cfg.train.eval_period == 0 || iter + 1 == total;
        if evaluate {
            let improved = match probe_set {
                Some(set) => {
                    let metric = probe_backbone(&mut run.model, set, &cfg.data, &cfg.probe)?.metric;
                    row.probe_metric = Some(metric);
                    let better = run.state.best_metric.map_or(true, |b| metric > b);
                    if better {
                        run.state.best_metric = Some(metric);
                        run.state.best_iter = Some(iter + 1);
                    }
                    better
                }
                None => true,
            };
            let bytes = run.to_bytes();
            if let Some(p) = out.last() {
                std::fs::write(&p, &bytes).map_err(io(&p))?;
            }
            if improved {
                // the stored best fields must describe the best snapshot itself
                if let Some(p) = out.best() {
                    std::fs::write(&p, &bytes).map_err(io(&p))?;
                }
                report.best = Some(bytes);
            }
            log::info!("iter {} loss {loss:.5} probe {:?}", iter + 1, row.probe_metric);
        } else if iter + 1 == until {
            if let Some(p) = out.last() {
                std::fs::write(&p, run.to_bytes()).map_err(io(&p))?;
            }
        }
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", row.csv()).map_err(io(path.as_path()))?;
        }
        report.rows.push(row);
    }
    Ok(report)
}

pub fn read_log(path: &Path) -> Result<Vec<(usize, f64, Option<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Schema(format!("bad log line {line:?}")));
        if f.len() != 5 {
            return Err(Error::Schema(format!("bad log line {line:?}")));
        }
        let iter = f[0].parse().map_err(|_| Error::Schema(format!("bad log line {line:?}")))?;
        let metric = if f[4].is_empty() { None } else { Some(parse(f[4])?) };
        rows.push((iter, parse(f[1])?, metric));
    }
    Ok(rows)
}
