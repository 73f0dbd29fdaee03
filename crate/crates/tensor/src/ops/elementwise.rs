use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::numel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }
}

/// Trailing-dims broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return None,
        };
    }
    Some(out)
}

/// Stride of `input` along each output dim, zero where broadcast.
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    strides
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
    &s[first..]
}

/// Maps output linear indices to input linear indices for a broadcast pair.
pub(crate) enum Layout {
    Same,
    /// `b` repeats with period `b.len()`; `a` has the output shape.
    RepeatB(usize),
    RepeatA(usize),
    General { out: Vec<usize>, sa: Vec<usize>, sb: Vec<usize> },
}

impl Layout {
    pub fn new(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
        if a == b {
            return Layout::Same;
        }
        let (na, nb) = (numel(a), numel(b));
        if numel(out) == na && out.ends_with(strip_leading_ones(b)) {
            return Layout::RepeatB(nb.max(1));
        }
        if numel(out) == nb && out.ends_with(strip_leading_ones(a)) {
            return Layout::RepeatA(na.max(1));
        }
        Layout::General {
            out: out.to_vec(),
            sa: broadcast_strides(a, out),
            sb: broadcast_strides(b, out),
        }
    }

    pub fn for_each(&self, total: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Layout::Same => (0..total).for_each(|i| f(i, i, i)),
            Layout::RepeatB(p) => (0..total).for_each(|i| f(i, i, i % p)),
            Layout::RepeatA(p) => (0..total).for_each(|i| f(i, i % p, i)),
            Layout::General { out, sa, sb } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for io in 0..total {
                    f(io, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += sa[d];
                        ib += sb[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        ia -= sa[d] * out[d];
                        ib -= sb[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            dim_err(kind.name(), format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let layout = Layout::new(sa, sb, &out_shape);
        let total = numel(&out_shape);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); total];
        match kind {
            BinKind::Add => layout.for_each(total, |o, i, j| out[o] = av[i] + bv[j]),
            BinKind::Sub => layout.for_each(total, |o, i, j| out[o] = av[i] - bv[j]),
            BinKind::Mul => layout.for_each(total, |o, i, j| out[o] = av[i] * bv[j]),
        }
        Ok(self.push(out_shape, out, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::cst(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu { a }, &[a])
    }

    /// `x * Phi(x)` with the exact normal CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a }, &[a])
    }
}

pub fn gelu<T: Element>(x: T) -> T {
    let half = T::cst(0.5);
    half * x * (T::one() + (x * T::cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::cst(0.5) * (T::one() + (x * T::cst(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::cst(0.5)).exp() * T::cst(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn binary_backward<T: Element>(
    tape: &Tape<T>,
    kind: BinKind,
    a: Var,
    b: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    let out = broadcast_shape(&sa, &sb).expect("validated in forward");
    let layout = Layout::new(&sa, &sb, &out);
    let total = g.len();
    match kind {
        BinKind::Add | BinKind::Sub => {
            if let Some(ga) = sink.buf(a) {
                layout.for_each(total, |o, i, _| ga[i] = ga[i] + g[o]);
            }
            if let Some(gb) = sink.buf(b) {
                if kind == BinKind::Add {
                    layout.for_each(total, |o, _, j| gb[j] = gb[j] + g[o]);
                } else {
                    layout.for_each(total, |o, _, j| gb[j] = gb[j] - g[o]);
                }
            }
        }
        BinKind::Mul => {
            let (av, bv) = (tape.value(a), tape.value(b));
            if let Some(ga) = sink.buf(a) {
                layout.for_each(total, |o, i, j| ga[i] = ga[i] + g[o] * bv[j]);
            }
            if let Some(gb) = sink.buf(b) {
                layout.for_each(total, |o, i, j| gb[j] = gb[j] + g[o] * av[i]);
            }
        }
    }
}

pub(crate) fn relu_backward<T: Element>(tape: &Tape<T>, a: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let x = tape.value(a);
    if let Some(ga) = sink.buf(a) {
        for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
            if xv > T::zero() {
                *d = *d + gv;
            }
        }
    }
}

pub(crate) fn gelu_backward<T: Element>(tape: &Tape<T>, a: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let x = tape.value(a);
    if let Some(ga) = sink.buf(a) {
        for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
            *d = *d + gv * gelu_grad(xv);
        }
    }
}
