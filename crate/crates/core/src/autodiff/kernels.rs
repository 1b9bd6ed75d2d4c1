//! Forward and backward kernels for the layers PlainNet is built from.
//!
//! All reductions run in a fixed row-major order so results are bitwise
//! reproducible. The 3x3 convolution lowers each sample with im2col and
//! accumulates each output over `(c_in, kh, kw)` in ascending order, which is
//! the same order a direct nested loop uses.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

fn expect_rank<T: Scalar>(op: &'static str, name: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("rank of {name}"),
            rank,
            format!("{} (shape {:?})", t.rank(), t.shape()),
        ));
    }
    Ok(())
}

/// Geometry of a 3x3, stride-1, pad-1 convolution.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

impl ConvDims {
    fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        const OP: &str = "conv2d";
        expect_rank(OP, "input", input, 4)?;
        expect_rank(OP, "weight", weight, 4)?;
        expect_rank(OP, "bias", bias, 1)?;
        let [n, c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let ws = weight.shape();
        if ws[2] != KERNEL || ws[3] != KERNEL {
            return Err(Error::shape(OP, "kernel size", "3x3", format!("{}x{}", ws[2], ws[3])));
        }
        if ws[1] != c_in {
            return Err(Error::shape(OP, "C_in (weight axis 1)", c_in, ws[1]));
        }
        if bias.shape()[0] != ws[0] {
            return Err(Error::shape(OP, "C_out (bias length)", ws[0], bias.shape()[0]));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape(OP, "spatial extent", ">= 1", format!("{h}x{w}")));
        }
        Ok(Self {
            n,
            c_in,
            c_out: ws[0],
            h,
            w,
        })
    }

    fn k(&self) -> usize {
        self.c_in * TAPS
    }

    fn p(&self) -> usize {
        self.h * self.w
    }
}

/// Lower one `[C_in, H, W]` sample to a `[C_in*9, H*W]` column matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, p) = (d.h as isize, d.w as isize, d.p());
    for ci in 0..d.c_in {
        let plane = &x[ci * d.p()..(ci + 1) * d.p()];
        for kh in 0..KERNEL {
            for kw in 0..KERNEL {
                let row = &mut col[(ci * TAPS + kh * KERNEL + kw) * p..][..p];
                for y in 0..h {
                    let sy = y + kh as isize - 1;
                    for xx in 0..w {
                        let sx = xx + kw as isize - 1;
                        row[(y * w + xx) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `[C_in, H, W]` gradient.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, gx: &mut [T]) {
    let (h, w, p) = (d.h as isize, d.w as isize, d.p());
    for ci in 0..d.c_in {
        let plane = &mut gx[ci * d.p()..(ci + 1) * d.p()];
        for kh in 0..KERNEL {
            for kw in 0..KERNEL {
                let row = &col[(ci * TAPS + kh * KERNEL + kw) * p..][..p];
                for y in 0..h {
                    let sy = y + kh as isize - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + kw as isize - 1;
                        if sx >= 0 && sx < w {
                            let dst = &mut plane[(sy * w + sx) as usize];
                            *dst = *dst + row[(y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 cross-correlation plus per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = ConvDims::check(input, weight, bias)?;
    let (k, p) = (d.k(), d.p());
    let in_stride = d.c_in * p;
    let out_stride = d.c_out * p;
    let mut out = vec![T::zero(); d.n * out_stride];
    let mut col = vec![T::zero(); k * p];
    let wdata = weight.data();
    for s in 0..d.n {
        im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &d, &mut col);
        let o = &mut out[s * out_stride..(s + 1) * out_stride];
        for co in 0..d.c_out {
            let orow = &mut o[co * p..(co + 1) * p];
            let wrow = &wdata[co * k..(co + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                let crow = &col[kk * p..(kk + 1) * p];
                for (acc, &cv) in orow.iter_mut().zip(crow) {
                    *acc = *acc + wv * cv;
                }
            }
            let b = bias.data()[co];
            for acc in orow.iter_mut() {
                *acc = *acc + b;
            }
        }
    }
    Tensor::new([d.n, d.c_out, d.h, d.w], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let d = ConvDims::check(input, weight, bias)?;
    let expected = [d.n, d.c_out, d.h, d.w];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            "upstream gradient",
            format!("{expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (k, p) = (d.k(), d.p());
    let in_stride = d.c_in * p;
    let out_stride = d.c_out * p;
    let wdata = weight.data();
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); d.c_out];
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    for s in 0..d.n {
        im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &d, &mut col);
        let g = &grad_out.data()[s * out_stride..(s + 1) * out_stride];
        dcol.iter_mut().for_each(|v| *v = T::zero());
        for co in 0..d.c_out {
            let grow = &g[co * p..(co + 1) * p];
            gb[co] = grow.iter().fold(gb[co], |acc, &v| acc + v);
            let gwrow = &mut gw[co * k..(co + 1) * k];
            let wrow = &wdata[co * k..(co + 1) * k];
            for kk in 0..k {
                let crow = &col[kk * p..(kk + 1) * p];
                let dot = crow
                    .iter()
                    .zip(grow)
                    .fold(T::zero(), |acc, (&c, &gv)| acc + c * gv);
                gwrow[kk] = gwrow[kk] + dot;
                let wv = wrow[kk];
                let drow = &mut dcol[kk * p..(kk + 1) * p];
                for (dst, &gv) in drow.iter_mut().zip(grow) {
                    *dst = *dst + wv * gv;
                }
            }
        }
        col2im(&dcol, &d, &mut gx[s * in_stride..(s + 1) * in_stride]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new([d.c_out], gb)?,
    })
}

/// 2x2 / stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index it was taken from. Ties resolve to the first
/// element in row-major window order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "maxpool2";
    expect_rank(OP, "input", input, 4)?;
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(OP, "spatial extent", "even and non-zero", format!("{h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let first = base + 2 * y * w + 2 * xx;
                let mut best = first;
                for idx in [first + 1, first + w, first + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::shape(
            "maxpool2_backward",
            "upstream gradient length",
            argmax.len(),
            grad_out.numel(),
        ));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let dst = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx] = dst[idx] + g;
    }
    Ok(gx)
}

fn linear_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    expect_rank(OP, "input", input, 2)?;
    expect_rank(OP, "weight", weight, 2)?;
    expect_rank(OP, "bias", bias, 1)?;
    let (n, f_in) = (input.shape()[0], input.shape()[1]);
    let (f_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if w_in != f_in {
        return Err(Error::shape(OP, "F_in (weight axis 1)", f_in, w_in));
    }
    if bias.shape()[0] != f_out {
        return Err(Error::shape(OP, "F_out (bias length)", f_out, bias.shape()[0]));
    }
    if f_in == 0 {
        return Err(Error::shape(OP, "F_in", ">= 1", 0));
    }
    Ok((n, f_in, f_out))
}

/// `input · weightᵀ + bias`, each output accumulated over `F_in` in order.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, f_in, f_out) = linear_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * f_out);
    for row in input.data().chunks_exact(f_in) {
        for o in 0..f_out {
            let wrow = &weight.data()[o * f_in..(o + 1) * f_in];
            let dot = row
                .iter()
                .zip(wrow)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.push(dot + bias.data()[o]);
        }
    }
    Tensor::new([n, f_out], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f_in, f_out) = linear_dims(input, weight, bias)?;
    if grad_out.shape() != [n, f_out] {
        return Err(Error::shape(
            "linear_backward",
            "upstream gradient",
            format!("[{n}, {f_out}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * f_in];
    let mut gw = vec![T::zero(); f_out * f_in];
    let mut gb = vec![T::zero(); f_out];
    for s in 0..n {
        let xrow = &x[s * f_in..(s + 1) * f_in];
        let gxrow = &mut gx[s * f_in..(s + 1) * f_in];
        for o in 0..f_out {
            let go = g[s * f_out + o];
            gb[o] = gb[o] + go;
            let wrow = &w[o * f_in..(o + 1) * f_in];
            let gwrow = &mut gw[o * f_in..(o + 1) * f_in];
            for i in 0..f_in {
                gwrow[i] = gwrow[i] + go * xrow[i];
                gxrow[i] = gxrow[i] + go * wrow[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new([n, f_in], gx)?,
        weight: Tensor::new([f_out, f_in], gw)?,
        bias: Tensor::new([f_out], gb)?,
    })
}

/// Mean cross-entropy of `logits[N, K]` against class indices, together with
/// the row softmax needed by the backward pass.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_cross_entropy";
    expect_rank(OP, "logits", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(OP, "label count", n, labels.len()));
    }
    if n == 0 || k == 0 {
        return Err(Error::invalid(OP, "empty batch or zero classes"));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: k,
            });
        }
        let z = &logits.data()[row * k..(row + 1) * k];
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let p = &mut probs[row * k..(row + 1) * k];
        let mut denom = T::zero();
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            denom = denom + *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / denom;
        }
        total = total + (m + denom.ln() - z[label]);
    }
    Ok((total / T::cast(n as f64), Tensor::new([n, k], probs)?))
}

/// `(softmax − onehot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::cast(n as f64);
    let mut g = probs.clone();
    for (row, &label) in labels.iter().enumerate() {
        let r = &mut g.data_mut()[row * k..(row + 1) * k];
        r[label] = r[label] - T::one();
        for v in r.iter_mut() {
            *v = *v * scale;
        }
    }
    g
}
