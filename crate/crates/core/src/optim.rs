//! SGD with momentum inside LookAhead, four parameter groups, and a
//! linear-warmup cosine schedule.

use bicap_tensor::Element;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Part};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(warmup: usize, total: usize) -> Result<Self> {
        if !(0 < warmup && warmup < total) {
            return Err(Error::Config(format!("schedule needs 0 < warmup ({warmup}) < total ({total})")));
        }
        Ok(Schedule { warmup, total })
    }

    pub fn lr_at(&self, max_lr: f64, iter: usize) -> Result<f64> {
        if iter > self.total {
            return Err(Error::Schedule { iter, total: self.total });
        }
        if iter < self.warmup {
            return Ok(max_lr * iter as f64 / self.warmup as f64);
        }
        let progress = (iter - self.warmup) as f64 / (self.total - self.warmup) as f64;
        Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub part: Part,
    pub decayed: bool,
    pub params: Vec<ParamId>,
    pub base_lr: f64,
    pub weight_decay: f64,
}

/// Groups in order backbone-decayed, backbone-plain, head-decayed, head-plain.
pub fn build_param_groups<T: Element>(store: &ParamStore<T>, cfg: &OptimConfig) -> Result<Vec<ParamGroup>> {
    let mut groups = Vec::new();
    for (part, lr) in [(Part::Backbone, cfg.lr_backbone), (Part::Head, cfg.lr_head)] {
        for decayed in [true, false] {
            groups.push(ParamGroup {
                part,
                decayed,
                params: Vec::new(),
                base_lr: lr,
                weight_decay: if decayed { cfg.weight_decay } else { 0.0 },
            });
        }
    }
    for (i, p) in store.params().iter().enumerate() {
        let g = groups
            .iter_mut()
            .find(|g| g.part == p.part && g.decayed == p.kind.decayed())
            .expect("every (part, decayed) pair has a group");
        g.params.push(ParamId(i));
    }
    check_partition(&groups, store.len())?;
    Ok(groups)
}

pub fn check_partition(groups: &[ParamGroup], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for g in groups {
        for &ParamId(i) in &g.params {
            if i >= n {
                return Err(Error::Optimizer(format!("group references unknown parameter {i}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Optimizer(format!("parameter {i} assigned to two groups")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Optimizer(format!("parameter {i} belongs to no group")));
    }
    Ok(())
}

/// Momentum buffers, one per parameter, created on first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub buffers: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, n: usize) -> Self {
        Sgd { momentum, buffers: vec![None; n] }
    }

    /// `buf ← μ·buf + (g + wd·p)`, `p ← p − lr·buf`.
    pub fn step(&mut self, store: &mut ParamStore<T>, group: &ParamGroup, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (T::cst(self.momentum), T::cst(group.weight_decay), T::cst(lr));
        for &id in &group.params {
            let p = store.get_mut(id);
            let Some(grad) = p.value.grad.take() else {
                return Err(Error::Optimizer(format!("parameter {} has no gradient", p.name)));
            };
            let buf = self.buffers[id.0].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, b), g) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *b = mu * *b + (*g + wd * *w);
                *w = *w - lr * *b;
            }
            p.value.grad = Some(grad);
        }
        Ok(())
    }
}

/// Slow weights shared by all groups, synchronized every `k` inner steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LookAhead<T> {
    pub alpha: f64,
    pub k: usize,
    pub counter: usize,
    pub slow: Vec<Vec<T>>,
}

impl<T: Element> LookAhead<T> {
    pub fn new(store: &ParamStore<T>, alpha: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || k == 0 {
            return Err(Error::Config(format!("lookahead needs 0 ≤ α ≤ 1 and k ≥ 1, got α={alpha} k={k}")));
        }
        Ok(LookAhead { alpha, k, counter: 0, slow: store.params().iter().map(|p| p.value.data().to_vec()).collect() })
    }

    /// Counts one inner step; on every `k`-th,
    /// `slow ← α·fast + (1 − α)·slow` and `fast ← slow`.
    pub fn after_inner_step(&mut self, store: &mut ParamStore<T>) -> bool {
        self.counter += 1;
        if self.counter % self.k != 0 {
            return false;
        }
        let a = T::cst(self.alpha);
        let one_minus = T::cst(1.0 - self.alpha);
        for (p, slow) in store.params_mut().iter_mut().zip(&mut self.slow) {
            for (f, s) in p.value.data_mut().iter_mut().zip(slow.iter_mut()) {
                *s = a * *f + one_minus * *s;
                *f = *s;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub groups: Vec<ParamGroup>,
    pub schedule: Schedule,
    pub sgd: Sgd<T>,
    pub lookahead: LookAhead<T>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(store: &ParamStore<T>, cfg: &OptimConfig) -> Result<Self> {
        Ok(Optimizer {
            groups: build_param_groups(store, cfg)?,
            schedule: Schedule::new(cfg.warmup_iters, cfg.total_iters)?,
            sgd: Sgd::new(cfg.momentum, store.len()),
            lookahead: LookAhead::new(store, cfg.lookahead_alpha, cfg.lookahead_k)?,
        })
    }

    /// Rates of each group at `iter`.
    pub fn rates(&self, iter: usize) -> Result<Vec<f64>> {
        self.groups.iter().map(|g| self.schedule.lr_at(g.base_lr, iter)).collect()
    }

    /// `(backbone, head)` rates at `iter`.
    pub fn part_rates(&self, iter: usize) -> Result<(f64, f64)> {
        let rate = |part| {
            let g = self.groups.iter().find(|g| g.part == part).expect("both parts have groups");
            self.schedule.lr_at(g.base_lr, iter)
        };
        Ok((rate(Part::Backbone)?, rate(Part::Head)?))
    }

    /// One update using the gradients stored on the parameters, at the
    /// rates of schedule position `iter`.
    pub fn step(&mut self, store: &mut ParamStore<T>, iter: usize) -> Result<()> {
        let rates = self.rates(iter)?;
        for (g, lr) in self.groups.iter().zip(rates) {
            self.sgd.step(store, g, lr)?;
        }
        self.lookahead.after_inner_step(store);
        Ok(())
    }
}
