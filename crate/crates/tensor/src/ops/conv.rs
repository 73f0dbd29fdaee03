use crate::element::{gemm, Element, MatView};
use crate::error::{dim_err, param_err, Result, TensorError};
use crate::ops::nn::Mode;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Spatial geometry shared by forward and backward passes of a convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `oj` whose input column `oj·stride + kj − pad` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(kj).div_ceil(self.stride).min(self.wo);
        (lo.min(hi), hi)
    }

    /// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii as usize >= self.h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (x, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *x = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds `[C*kh*kw, Ho*Wo]` columns back onto an image gradient `[C, H, W]`.
    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + kj - self.pad;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        let line = &src[oi * self.wo + lo..oi * self.wo + hi];
                        for (d, s) in dst[first..].iter_mut().step_by(self.stride).zip(line) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
}

fn spatial_out(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k > size + 2 * pad {
        return Err(dim_err(
            op,
            format!("kernel {} larger than padded input {} (size {}, padding {})", k, size + 2 * pad, size, pad),
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Running statistics and hyperparameters of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `[B, C, H, W]` with `[Cout, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(param_err("conv2d", "stride must be at least 1"));
        }
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(dim_err(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", si, sw),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(dim_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        let ho = spatial_out("conv2d", si[2], sw[2], stride, padding)?;
        let wo = spatial_out("conv2d", si[3], sw[3], stride, padding)?;
        let geom = ConvGeom {
            batch: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (patch, p) = (geom.patch(), geom.positions());
        let x = self.value(input);
        let wv = self.value(weight);
        let mut out = vec![T::zero(); geom.batch * geom.cout * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * p] };
        let img_len = geom.cin * geom.h * geom.w;
        for b in 0..geom.batch {
            let img = &x[b * img_len..(b + 1) * img_len];
            let (src, off) = if geom.is_pointwise() {
                (img, 0)
            } else {
                geom.im2col(img, &mut cols);
                (&cols[..], 0)
            };
            gemm(
                geom.cout,
                patch,
                p,
                wv,
                MatView::new(0, patch, 1),
                src,
                MatView::new(off, p, 1),
                T::zero(),
                &mut out,
                MatView::new(b * geom.cout * p, p, 1),
            );
        }
        if let Some(bv) = bias {
            let bias = self.value(bv);
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let c = bias[i % geom.cout];
                chunk.iter_mut().for_each(|v| *v = *v + c);
            }
        }
        let shape = vec![geom.batch, geom.cout, ho, wo];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(shape, out, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    /// Max pooling over `k x k` windows; padded cells never win.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 || k == 0 {
            return Err(param_err("max_pool2d", "kernel and stride must be at least 1"));
        }
        if padding * 2 > k {
            return Err(param_err("max_pool2d", "padding may be at most half the kernel"));
        }
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(dim_err("max_pool2d", format!("expected [B, C, H, W], got {:?}", s)));
        }
        let ho = spatial_out("max_pool2d", s[2], k, stride, padding)?;
        let wo = spatial_out("max_pool2d", s[3], k, stride, padding)?;
        let x = self.value(input);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for plane in 0..planes {
            let base = plane * s[2] * s[3];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii as usize >= s[2] {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj as usize >= s[3] {
                                continue;
                            }
                            let idx = base + ii as usize * s[3] + jj as usize;
                            if at == usize::MAX || x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], ho, wo], out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Per-channel normalisation of `[B, C, H, W]`.
    ///
    /// Training mode normalises with batch statistics and folds them into the
    /// running averages; evaluation mode uses the running averages.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("batch_norm2d", format!("expected [B, C, H, W], got {:?}", s)));
        }
        let c = s[1];
        if self.shape(gain) != [c] || self.shape(bias) != [c] || state.running_mean.numel() != c {
            return Err(dim_err(
                "batch_norm2d",
                format!("affine/statistics sizes do not match {} channels of {:?}", c, s),
            ));
        }
        let spatial = s[2] * s[3];
        let count = s[0] * spatial;
        let xv = self.value(x);
        let eps = T::cst(state.eps);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if count <= 1 {
                    return Err(TensorError::Numeric {
                        op: "batch_norm2d",
                        detail: format!("one value per channel in training mode (input {:?})", s),
                    });
                }
                let n = T::cst(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..s[0] {
                    for ch in 0..c {
                        let plane = &xv[(b * c + ch) * spatial..][..spatial];
                        mean[ch] = mean[ch] + plane.iter().copied().sum();
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                for b in 0..s[0] {
                    for ch in 0..c {
                        let plane = &xv[(b * c + ch) * spatial..][..spatial];
                        var[ch] = var[ch] + plane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                let m = T::cst(state.momentum);
                let unbias = T::cst(count as f64 / (count as f64 - 1.0));
                let rm = state.running_mean.data_mut();
                for ch in 0..c {
                    rm[ch] = (T::one() - m) * rm[ch] + m * mean[ch];
                }
                let rv = state.running_var.data_mut();
                for ch in 0..c {
                    rv[ch] = (T::one() - m) * rv[ch] + m * var[ch] * unbias;
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                let mean = state.running_mean.data().to_vec();
                let inv = state.running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Numeric {
                op: "batch_norm2d",
                detail: "variance + eps is not positive".into(),
            });
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..s[0] {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
            channels: c,
            spatial,
            train: mode == Mode::Train,
        };
        Ok(self.push(s, out, op, &[x, gain, bias]))
    }
}

pub(crate) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (patch, p) = (geom.patch(), geom.positions());
    let img_len = geom.cin * geom.h * geom.w;
    let out_len = geom.cout * p;
    if let Some(b) = bias {
        if let Some(gb) = sink.buf(b) {
            for (i, chunk) in g.chunks(p).enumerate() {
                let ch = i % geom.cout;
                gb[ch] = gb[ch] + chunk.iter().copied().sum();
            }
        }
    }
    let x = tape.value(input);
    let wv = tape.value(weight);
    if sink.wants(weight) {
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * p] };
        let gw = sink.buf(weight).expect("weight wants a gradient");
        for b in 0..geom.batch {
            let img = &x[b * img_len..(b + 1) * img_len];
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            // dW += dY_b · colsᵀ
            gemm(
                geom.cout,
                p,
                patch,
                g,
                MatView::new(b * out_len, p, 1),
                src,
                MatView::new(0, 1, p),
                T::one(),
                gw,
                MatView::new(0, patch, 1),
            );
        }
    }
    if let Some(gx) = sink.buf(input) {
        let mut dcols = vec![T::zero(); patch * p];
        for b in 0..geom.batch {
            // dcols = Wᵀ · dY_b
            if geom.is_pointwise() {
                gemm(
                    patch,
                    geom.cout,
                    p,
                    wv,
                    MatView::new(0, 1, patch),
                    g,
                    MatView::new(b * out_len, p, 1),
                    T::one(),
                    &mut gx[b * img_len..(b + 1) * img_len],
                    MatView::new(0, p, 1),
                );
                continue;
            }
            gemm(
                patch,
                geom.cout,
                p,
                wv,
                MatView::new(0, 1, patch),
                g,
                MatView::new(b * out_len, p, 1),
                T::zero(),
                &mut dcols,
                MatView::new(0, p, 1),
            );
            geom.col2im(&dcols, &mut gx[b * img_len..(b + 1) * img_len]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gain: Var,
    bias: Var,
    xhat: &[T],
    inv_std: &[T],
    c: usize,
    spatial: usize,
    train: bool,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let batch = g.len() / (c * spatial);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                sum_g[ch] = sum_g[ch] + g[i];
                sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
            }
        }
    }
    if let Some(gg) = sink.buf(gain) {
        for ch in 0..c {
            gg[ch] = gg[ch] + sum_gx[ch];
        }
    }
    if let Some(gb) = sink.buf(bias) {
        for ch in 0..c {
            gb[ch] = gb[ch] + sum_g[ch];
        }
    }
    let gv = tape.value(gain);
    if let Some(gx) = sink.buf(x) {
        let n = T::cst((batch * spatial) as f64);
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                let k = gv[ch] * inv_std[ch];
                for i in off..off + spatial {
                    let d = if train {
                        k * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                    } else {
                        k * g[i]
                    };
                    gx[i] = gx[i] + d;
                }
            }
        }
    }
}
