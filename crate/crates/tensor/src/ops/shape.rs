use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::numel;

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For each output element of `permute(shape, perm)`, the source index.
fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let rank = shape.len();
    let mut src = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        src.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    src
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            ));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a }, &[a]))
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(
                "permute",
                format!("{:?} is not a permutation of the dims of {:?}", perm, shape),
            ));
        }
        let src = permute_sources(&shape, perm);
        let av = self.value(a);
        let out: Vec<T> = src.iter().map(|&s| av[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Selects rows along the first dim; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(dim_err("gather_rows", "cannot gather from a scalar"));
        }
        let rows = shape[0];
        let row: usize = shape[1..].iter().product();
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index { op: "gather_rows", index: i, size: rows });
            }
            out.extend_from_slice(&av[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![idx.len()];
        out_shape.extend_from_slice(&shape[1..]);
        Ok(self.push(out_shape, out, Op::GatherRows { a, idx: idx.to_vec(), row }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "mean" });
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("mean_axis", format!("axis {} out of range for {:?}", axis, shape)));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(TensorError::EmptyReduction { op: "mean_axis" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let av = self.value(a);
        let inv = T::cst(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + av[base + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x = *x * inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::MeanAxis { a, outer, n, inner }, &[a]))
    }
}

pub(crate) fn permute_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    perm: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let src = permute_sources(tape.shape(a), perm);
    if let Some(ga) = sink.buf(a) {
        for (&s, &gv) in src.iter().zip(g) {
            ga[s] = ga[s] + gv;
        }
    }
}

pub(crate) fn gather_backward<T: Element>(
    a: Var,
    idx: &[usize],
    row: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if let Some(ga) = sink.buf(a) {
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut ga[i * row..(i + 1) * row];
            for (d, &gv) in dst.iter_mut().zip(&g[k * row..(k + 1) * row]) {
                *d = *d + gv;
            }
        }
    }
}

pub(crate) fn mean_axis_backward<T: Element>(
    a: Var,
    outer: usize,
    n: usize,
    inner: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let inv = T::cst(1.0 / n as f64);
    if let Some(ga) = sink.buf(a) {
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    ga[base + i] = ga[base + i] + g[o * inner + i] * inv;
                }
            }
        }
    }
}
