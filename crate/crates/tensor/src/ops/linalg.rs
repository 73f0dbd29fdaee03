use crate::element::{gemm, Element, MatView};
use crate::error::{dim_err, Result};
use crate::ops::elementwise::{broadcast_shape, Layout};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::numel;

/// Resolved geometry of a (possibly batched, possibly transposed) product.
pub(crate) struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    /// `(lhs batch, rhs batch)` for each output batch entry; empty when folded.
    pairs: Vec<(usize, usize)>,
    /// Rows of all lhs batches stacked into one product against a single rhs.
    folded_rows: Option<usize>,
}

impl MatMulPlan {
    fn a_view(&self, batch: usize) -> MatView {
        let off = batch * self.m * self.k;
        if self.ta {
            MatView::new(off, 1, self.m)
        } else {
            MatView::new(off, self.k, 1)
        }
    }

    fn b_view(&self, batch: usize) -> MatView {
        let off = batch * self.k * self.n;
        if self.tb {
            MatView::new(off, 1, self.k)
        } else {
            MatView::new(off, self.n, 1)
        }
    }

    fn c_view(&self, batch: usize) -> MatView {
        MatView::new(batch * self.m * self.n, self.n, 1)
    }
}

impl<T: Element> Tape<T> {
    /// `a · b` over the last two dims, batch dims broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two dims.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Product of `op(a)` and `op(b)` where `op` transposes the last two dims when the flag is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err(
                "matmul",
                format!("operands need rank >= 2, got {:?} and {:?}", sa, sb),
            ));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = if ta { (sa[ra - 1], sa[ra - 2]) } else { (sa[ra - 2], sa[ra - 1]) };
        let (k2, n) = if tb { (sb[rb - 1], sb[rb - 2]) } else { (sb[rb - 2], sb[rb - 1]) };
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?} ({} vs {})", sa, sb, k, k2),
            ));
        }
        let (batch_a, batch_b) = (&sa[..ra - 2], &sb[..rb - 2]);
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| {
            dim_err("matmul", format!("batch dims of {:?} and {:?} do not broadcast", sa, sb))
        })?;
        let nbatch = numel(&batch);
        let folded = numel(batch_b) == 1 && !ta && numel(batch_a) == nbatch;
        let pairs = if folded {
            Vec::new()
        } else {
            let layout = Layout::new(batch_a, batch_b, &batch);
            let mut pairs = vec![(0, 0); nbatch];
            layout.for_each(nbatch, |o, i, j| pairs[o] = (i, j));
            pairs
        };
        let plan = MatMulPlan {
            m,
            k,
            n,
            ta,
            tb,
            pairs,
            folded_rows: folded.then_some(nbatch * m),
        };
        let mut out = vec![T::zero(); nbatch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        if let Some(rows) = plan.folded_rows {
            gemm(rows, k, n, av, plan.a_view(0), bv, plan.b_view(0), T::zero(), &mut out, plan.c_view(0));
        } else {
            for (o, &(i, j)) in plan.pairs.iter().enumerate() {
                gemm(m, k, n, av, plan.a_view(i), bv, plan.b_view(j), T::zero(), &mut out, plan.c_view(o));
            }
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, plan }, &[a, b]))
    }
}

pub(crate) fn matmul_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    plan: &MatMulPlan,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (m, k, n) = (plan.m, plan.k, plan.n);
    // d op(A) = dC · op(B)ᵀ ; d op(B) = op(A)ᵀ · dC, written through the operand's own view.
    if let Some(ga) = sink.buf(a) {
        if let Some(rows) = plan.folded_rows {
            gemm(rows, n, k, g, plan.c_view(0), bv, plan.b_view(0).t(), T::one(), ga, plan.a_view(0));
        } else {
            for (o, &(i, j)) in plan.pairs.iter().enumerate() {
                gemm(m, n, k, g, plan.c_view(o), bv, plan.b_view(j).t(), T::one(), ga, plan.a_view(i));
            }
        }
    }
    if let Some(gb) = sink.buf(b) {
        if let Some(rows) = plan.folded_rows {
            gemm(k, rows, n, av, plan.a_view(0).t(), g, plan.c_view(0), T::one(), gb, plan.b_view(0));
        } else {
            for (o, &(i, j)) in plan.pairs.iter().enumerate() {
                gemm(k, m, n, av, plan.a_view(i).t(), g, plan.c_view(o), T::one(), gb, plan.b_view(j));
            }
        }
    }
}
