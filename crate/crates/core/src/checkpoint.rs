//! Single-file run snapshot: config, vocabulary, parameters, optimizer and
//! schedule position.
//!
//! Layout: `BCAPCKPT`, version `u32`, then sections of `tag [4] · len u64 ·
//! payload` in the order CONF, VOCB, TENS, OPTM, RNGS. Integers are
//! little-endian.

use std::io::{Cursor, Read};
use std::path::Path;

use bicap_tensor::{Element, Tensor};

use crate::config::RunConfig;
use crate::error::{io, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Optimizer;
use crate::params::{Kind, Part};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"BCAPCKPT";
pub const VERSION: u32 = 1;

/// Progress of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    /// Next iteration to run.
    pub iteration: usize,
    pub best_metric: Option<f64>,
    pub best_iter: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Element> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub state: TrainState,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn part_code(p: Part) -> u8 {
    match p {
        Part::Backbone => 0,
        Part::Head => 1,
    }
}

fn kind_code(k: Kind) -> u8 {
    match k {
        Kind::Weight => 0,
        Kind::Bias => 1,
        Kind::NormGain => 2,
        Kind::NormBias => 3,
        Kind::Embedding => 4,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn values<T: Element>(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        for &x in v {
            x.write_le(&mut self.0);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.bytes(&body.0);
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl<'a> Reader<'a> {
    fn new(b: &'a [u8]) -> Self {
        Reader(Cursor::new(b))
    }
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|_| bad("truncated checkpoint"))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        let start = self.0.position() as usize;
        let all = *self.0.get_ref();
        if all.len() - start < n {
            return Err(bad("truncated checkpoint"));
        }
        self.0.set_position((start + n) as u64);
        Ok(&all[start..start + n])
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
    fn values<T: Element>(&mut self) -> Result<Vec<T>> {
        let n = self.usize()?;
        let w = T::DTYPE.size_of();
        let raw = self.bytes_exact(n.checked_mul(w).ok_or_else(|| bad("length overflows"))?)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }
    fn bytes_exact(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.0.position() as usize;
        let all = *self.0.get_ref();
        if all.len() - start < n {
            return Err(bad("truncated checkpoint"));
        }
        self.0.set_position((start + n) as u64);
        Ok(&all[start..start + n])
    }
    fn tensor<T: Element>(&mut self) -> Result<Tensor<T>> {
        let raw = self.bytes()?;
        if raw.first() != Some(&(T::DTYPE as u8)) {
            return Err(Error::Mismatch("checkpoint precision differs from the requested one".into()));
        }
        Ok(Tensor::from_bytes(raw)?)
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let got = self.take::<4>()?;
        if &got != tag {
            return Err(bad(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(Reader::new(self.bytes()?))
    }
    fn done(&self) -> Result<()> {
        if (self.0.position() as usize) != self.0.get_ref().len() {
            return Err(bad("trailing bytes"));
        }
        Ok(())
    }
}

impl<T: Element> Checkpoint<T> {
    /// Fresh run: parameters initialized from `train.seed`.
    pub fn fresh(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mc = ModelConfig::from_run(&config, vocab.len());
        let model = Model::new(&mc, config.train.seed)?;
        let optimizer = Optimizer::new(&model.store, &config.optim)?;
        let state = TrainState { seed: config.train.seed, iteration: 0, best_metric: None, best_iter: None };
        Ok(Checkpoint { config, vocab, model, optimizer, state })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Writer(MAGIC.to_vec());
        out.u32(VERSION);

        let mut conf = Writer(Vec::new());
        conf.bytes(self.config.to_toml().as_bytes());
        out.section(b"CONF", conf);

        let mut vocb = Writer(Vec::new());
        vocb.bytes(self.vocab.to_file_string().as_bytes());
        out.section(b"VOCB", vocb);

        let store = &self.model.store;
        let mut tens = Writer(Vec::new());
        tens.u8(T::DTYPE as u8);
        tens.u64(store.len() as u64);
        for p in store.params() {
            tens.bytes(p.name.as_bytes());
            tens.u8(part_code(p.part));
            tens.u8(kind_code(p.kind));
            tens.bytes(&p.value.to_bytes());
        }
        tens.u64(store.norms().len() as u64);
        for (name, s) in store.norms() {
            tens.bytes(name.as_bytes());
            tens.bytes(&s.running_mean.to_bytes());
            tens.bytes(&s.running_var.to_bytes());
        }
        out.section(b"TENS", tens);

        let mut optm = Writer(Vec::new());
        let st = &self.state;
        optm.u64(st.iteration as u64);
        match (st.best_metric, st.best_iter) {
            (Some(m), Some(i)) => {
                optm.u8(1);
                optm.f64(m);
                optm.u64(i as u64);
            }
            _ => optm.u8(0),
        }
        for buf in &self.optimizer.sgd.buffers {
            match buf {
                Some(b) => {
                    optm.u8(1);
                    optm.values(b);
                }
                None => optm.u8(0),
            }
        }
        optm.u64(self.optimizer.lookahead.counter as u64);
        for slow in &self.optimizer.lookahead.slow {
            optm.values(slow);
        }
        out.section(b"OPTM", optm);

        let mut rngs = Writer(Vec::new());
        rngs.u64(st.seed);
        rngs.u64(st.iteration as u64);
        out.section(b"RNGS", rngs);
        out.0
    }

    /// Rebuilds the model from the stored config and checks every stored
    /// tensor against it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if &r.take::<8>()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut conf = r.section(b"CONF")?;
        let config = RunConfig::from_toml(&conf.string()?)?;
        conf.done()?;
        let mut vocb = r.section(b"VOCB")?;
        let vocab = Vocabulary::from_file_str(&vocb.string()?)?;
        vocb.done()?;
        let mut ck = Checkpoint::<T>::fresh(config, vocab)?;

        let mut tens = r.section(b"TENS")?;
        if tens.u8()? != T::DTYPE as u8 {
            return Err(Error::Mismatch("checkpoint precision differs from the requested one".into()));
        }
        let n = tens.usize()?;
        if n != ck.model.store.len() {
            return Err(Error::Mismatch(format!("checkpoint has {n} parameters, config builds {}", ck.model.store.len())));
        }
        for i in 0..n {
            let name = tens.string()?;
            let (part, kind) = (tens.u8()?, tens.u8()?);
            let value = tens.tensor::<T>()?;
            let p = &mut ck.model.store.params_mut()[i];
            if p.name != name || part_code(p.part) != part || kind_code(p.kind) != kind || p.value.shape() != value.shape() {
                return Err(Error::Mismatch(format!("stored parameter {name} {:?} does not match {} {:?}", value.shape(), p.name, p.value.shape())));
            }
            p.value = value.with_grad();
        }
        let m = tens.usize()?;
        if m != ck.model.store.norms().len() {
            return Err(Error::Mismatch(format!("checkpoint has {m} norm layers, config builds {}", ck.model.store.norms().len())));
        }
        for i in 0..m {
            let name = tens.string()?;
            let mean = tens.tensor::<T>()?;
            let var = tens.tensor::<T>()?;
            let (expected, s) = &mut ck.model.store.norms_mut()[i];
            if *expected != name || s.running_mean.shape() != mean.shape() || s.running_var.shape() != var.shape() {
                return Err(Error::Mismatch(format!("stored norm {name} does not match {expected}")));
            }
            s.running_mean = mean;
            s.running_var = var;
        }
        tens.done()?;

        let mut optm = r.section(b"OPTM")?;
        let iteration = optm.usize()?;
        let (best_metric, best_iter) = match optm.u8()? {
            0 => (None, None),
            1 => (Some(optm.f64()?), Some(optm.usize()?)),
            f => return Err(bad(format!("bad best-metric flag {f}"))),
        };
        for i in 0..n {
            let numel = ck.model.store.params()[i].value.numel();
            ck.optimizer.sgd.buffers[i] = match optm.u8()? {
                0 => None,
                1 => {
                    let b = optm.values::<T>()?;
                    if b.len() != numel {
                        return Err(Error::Mismatch(format!("momentum buffer {i} has {} values, expected {numel}", b.len())));
                    }
                    Some(b)
                }
                f => return Err(bad(format!("bad buffer flag {f}"))),
            };
        }
        ck.optimizer.lookahead.counter = optm.usize()?;
        for i in 0..n {
            let s = optm.values::<T>()?;
            if s.len() != ck.model.store.params()[i].value.numel() {
                return Err(Error::Mismatch(format!("slow weights {i} have the wrong size")));
            }
            ck.optimizer.lookahead.slow[i] = s;
        }
        optm.done()?;

        let mut rngs = r.section(b"RNGS")?;
        let seed = rngs.u64()?;
        if rngs.usize()? != iteration {
            return Err(bad("iteration counters disagree"));
        }
        rngs.done()?;
        r.done()?;
        ck.state = TrainState { seed, iteration, best_metric, best_iter };
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes)
    }
}
