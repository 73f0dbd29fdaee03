use rand::Rng;

use crate::element::Element;
use crate::error::{dim_err, param_err, Result, TensorError};
use crate::tape::{GradSink, Op, Tape, Var};

/// Training or inference behaviour for dropout and batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    /// Softmax along `axis`; `-inf` inputs become exact zeros.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let x = av[at(j)];
                    if x.is_nan() || x == T::infinity() {
                        return Err(TensorError::Numeric {
                            op: "softmax",
                            detail: format!("non-finite input {x}"),
                        });
                    }
                    max = max.max(x);
                }
                if max == T::neg_infinity() {
                    return Err(TensorError::Numeric {
                        op: "softmax",
                        detail: "every entry of a row is -inf".into(),
                    });
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (av[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a, outer, n, inner }, &[a]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| dim_err("log_softmax", "scalar input"))?;
        if n == 0 {
            return Err(dim_err("log_softmax", "empty last axis"));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); av.len()];
        for (row, dst) in av.chunks(n).zip(out.chunks_mut(n)) {
            let lse = log_sum_exp(row)?;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        Ok(self.push(shape, out, Op::LogSoftmax { a, n }, &[a]))
    }

    /// Normalises each row over the last dim, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or_else(|| dim_err("layer_norm", "scalar input"))?;
        if h == 0 {
            return Err(dim_err("layer_norm", format!("empty normalised dim in {:?}", shape)));
        }
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be [{}] for input {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    h,
                    shape
                ),
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / h;
        let hn = T::cst(h as f64);
        let eps = T::cst(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<T>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
            let denom = var + eps;
            if denom <= T::zero() {
                return Err(TensorError::Numeric {
                    op: "layer_norm",
                    detail: "zero variance with eps = 0".into(),
                });
            }
            let rs = T::one() / denom.sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * gv[j] + bv[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Inverted dropout: in training, zero with probability `p` and scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(param_err("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = T::cst(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { a, mask }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// `logits` is `[N, V]`; rows whose target equals `ignore` contribute
    /// nothing to the value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", shape, targets.len()),
            ));
        }
        let v = shape[1];
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| if Some(t) == ignore { None } else { Some(t) })
            .collect();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::EmptyReduction { op: "cross_entropy" });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(TensorError::Index { op: "cross_entropy", index: t, size: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row)?;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total += (lse - row[t]).to_f64_lossy();
        }
        let value = T::cst(total / count as f64);
        Ok(self.push(vec![], vec![value], Op::CrossEntropy { logits, probs, targets, count }, &[logits]))
    }

    /// Mean over rows of `-sum_v q[r, v] * log softmax(logits)[r, v]` for a fixed target distribution `q`.
    pub fn soft_cross_entropy(&mut self, logits: Var, q: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || q.len() != shape[0] * shape[1] {
            return Err(dim_err(
                "soft_cross_entropy",
                format!("logits {:?} with {} target entries", shape, q.len()),
            ));
        }
        let (rows, v) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(TensorError::EmptyReduction { op: "soft_cross_entropy" });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row)?;
            for j in 0..v {
                let logp = row[j] - lse;
                probs[r * v + j] = logp.exp();
                if q[r * v + j] != T::zero() {
                    total = total - q[r * v + j] * logp;
                }
            }
        }
        let value = total / T::cst(rows as f64);
        Ok(self.push(vec![], vec![value], Op::SoftCrossEntropy { logits, probs, q: q.to_vec(), rows }, &[logits]))
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> Result<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(TensorError::Numeric {
            op: "log_sum_exp",
            detail: format!("row maximum is {max}"),
        });
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

pub(crate) fn softmax_backward<T: Element>(
    a: Var,
    y: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if let Some(ga) = sink.buf(a) {
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                for j in 0..n {
                    ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
    }
}

pub(crate) fn log_softmax_backward<T: Element>(
    a: Var,
    y: &[T],
    n: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if let Some(ga) = sink.buf(a) {
        for ((dst, yr), gr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
            let gsum: T = gr.iter().copied().sum();
            for j in 0..n {
                dst[j] = dst[j] + gr[j] - yr[j].exp() * gsum;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gain: Var,
    bias: Var,
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let h = tape.value(gain).len();
    let gv = tape.value(gain);
    let rows = rstd.len();
    if let Some(gg) = sink.buf(gain) {
        for r in 0..rows {
            for j in 0..h {
                gg[j] = gg[j] + g[r * h + j] * xhat[r * h + j];
            }
        }
    }
    if let Some(gb) = sink.buf(bias) {
        for r in 0..rows {
            for j in 0..h {
                gb[j] = gb[j] + g[r * h + j];
            }
        }
    }
    if let Some(gx) = sink.buf(x) {
        let hn = T::cst(h as f64);
        for r in 0..rows {
            let dxhat: Vec<T> = (0..h).map(|j| g[r * h + j] * gv[j]).collect();
            let xh = &xhat[r * h..(r + 1) * h];
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(xh).map(|(&d, &v)| d * v).sum();
            for j in 0..h {
                let v = (hn * dxhat[j] - sum_d - xh[j] * sum_dx) * rstd[r] / hn;
                gx[r * h + j] = gx[r * h + j] + v;
            }
        }
    }
}

pub(crate) fn cross_entropy_backward<T: Element>(
    logits: Var,
    probs: &[T],
    targets: &[Option<usize>],
    count: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let scale = g[0] / T::cst(count as f64);
    if let Some(gl) = sink.buf(logits) {
        let v = probs.len() / targets.len().max(1);
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            for j in 0..v {
                let onehot = if j == t { T::one() } else { T::zero() };
                gl[r * v + j] = gl[r * v + j] + (probs[r * v + j] - onehot) * scale;
            }
        }
    }
}

pub(crate) fn soft_cross_entropy_backward<T: Element>(
    logits: Var,
    probs: &[T],
    q: &[T],
    rows: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let scale = g[0] / T::cst(rows as f64);
    if let Some(gl) = sink.buf(logits) {
        let v = probs.len() / rows;
        for r in 0..rows {
            let qsum: T = q[r * v..(r + 1) * v].iter().copied().sum();
            for j in 0..v {
                let i = r * v + j;
                gl[i] = gl[i] + (probs[i] * qsum - q[i]) * scale;
            }
        }
    }
}
