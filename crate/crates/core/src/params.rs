//! Named parameters, batch-norm statistics, and per-pass tape binding.

use std::collections::HashMap;

use bicap_tensor::{BatchNormState, Element, Mode, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormId(pub usize);

/// Which learning-rate family a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Backbone,
    Head,
}

/// Weight-decay role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
}

impl Kind {
    pub fn decayed(self) -> bool {
        matches!(self, Kind::Weight | Kind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub part: Part,
    pub kind: Kind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
    norms: Vec<(String, BatchNormState<T>)>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new(), norms: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, part: Part, kind: Kind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value: value.with_grad(), part, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        part: Part,
        kind: Kind,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::cst(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data)?, part, kind)
    }

    pub fn add_norm(&mut self, name: &str, channels: usize) -> NormId {
        self.norms.push((name.to_string(), BatchNormState::new(channels)));
        NormId(self.norms.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn norms(&self) -> &[(String, BatchNormState<T>)] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [(String, BatchNormState<T>)] {
        &mut self.norms
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// FNV-1a over names, values and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            eat(&p.value.to_bytes());
        }
        for (name, s) in &self.norms {
            eat(name.as_bytes());
            eat(&s.running_mean.to_bytes());
            eat(&s.running_var.to_bytes());
        }
        h
    }

    /// Same parameters in another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast::<U>().with_grad(), part: p.part, kind: p.kind })
                .collect(),
            by_name: self.by_name.clone(),
            norms: self
                .norms
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.cast(),
                            running_var: s.running_var.cast(),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Recorded cross-attention weights `[B, A, T, N]` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub shape: [usize; 4],
    pub weights: Vec<f64>,
}

/// One forward (and optionally backward) pass over a parameter store.
///
/// Parameters are copied onto the tape on first use, so every use site of a
/// shared parameter accumulates into the same gradient buffer.
pub struct Ctx<'s, T: Element> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    frozen: bool,
    pub record_attention: bool,
    /// Layer whose cross-attention is recorded; the last one when `None`.
    pub attention_layer: Option<usize>,
    pub attention: Vec<AttentionRecord>,
}

impl<'s, T: Element> Ctx<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, rng: ChaCha8Rng) -> Self {
        let n = store.len();
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            rng,
            frozen: false,
            record_attention: false,
            attention_layer: None,
            attention: Vec::new(),
        }
    }

    /// Parameters enter the tape as constants; no gradient reaches them.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = &self.store.params[id.0].value;
        let v = if self.frozen {
            self.tape.constant(t.shape(), t.data().to_vec()).expect("stored shape is consistent")
        } else {
            self.tape.leaf(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    /// Tape variable of a bound parameter.
    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn batch_norm(&mut self, x: Var, norm: NormId, gain: ParamId, bias: ParamId) -> Result<Var> {
        let (g, b) = (self.p(gain), self.p(bias));
        let state = &mut self.store.norms[norm.0].1;
        Ok(self.tape.batch_norm2d(x, g, b, state, self.mode)?)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Ok(self.tape.dropout(x, p, self.mode, &mut self.rng)?)
    }

    /// `x · W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.p(w);
        let y = self.tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.p(b);
                Ok(self.tape.add(y, bv)?)
            }
            None => Ok(y),
        }
    }

    /// Reverse sweep; every parameter of the store receives a gradient
    /// (zeros when unreached), added onto any gradient already present.
    pub fn backward(self, loss: Var) -> Result<T> {
        if self.frozen {
            return Err(Error::Config("backward through a frozen pass".into()));
        }
        let value = self.tape.item(loss);
        let grads = self.tape.backward(loss)?;
        for (i, p) in self.store.params.iter_mut().enumerate() {
            match self.bound[i] {
                Some(v) => grads.accumulate_into(v, &mut p.value)?,
                None => {
                    if p.value.grad.is_none() {
                        p.value.zero_grad();
                    }
                }
            }
        }
        Ok(value)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}
