//! Primitive operations. Each validates shapes, computes the forward value,
//! and records a tape node when gradients are required.

use std::sync::Arc;

use super::kernels;
use super::tape::{dims4, sigmoid, Op, Src, Tape};
use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "{what}: expected rank-4 [n,c,h,w], got {:?}",
            t.shape()
        )));
    }
    Ok(dims4(t.shape()))
}

fn rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected rank-2 matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Src, Src) -> Op,
    ) -> Result<Tensor> {
        same_shape(a, b, what)?;
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.out(tracked, a.shape().to_vec(), data, || {
            op(self.src(a), self.src(b))
        })
    }

    fn unary(
        &self,
        x: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(Src) -> Op,
    ) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        self.out(self.is_tracked(x), x.shape().to_vec(), data, || {
            op(self.src(x))
        })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if b.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("div: zero denominator".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&self, x: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(x, |v| v + s, Op::AddScalar)
    }

    pub fn mul_scalar(&self, x: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(x, |v| v * s, |src| Op::MulScalar(src, s))
    }

    /// Elementwise x^p. For non-integer `p` the base must be nonnegative.
    pub fn pow_scalar(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if p.fract() != 0.0 && x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "pow: negative base with non-integer exponent {p}"
            )));
        }
        self.unary(x, |v| v.powf(p), |src| Op::PowScalar(src, p))
    }

    pub fn sqrt(&self, x: &Tensor) -> Result<Tensor> {
        self.pow_scalar(x, 0.5)
    }

    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log: non-positive input".into()));
        }
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, f64::abs, Op::Abs)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn silu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v * sigmoid(v), Op::Silu)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        // ln(1 + e^x), computed without overflow for large x
        self.unary(
            x,
            |v| if v > 30.0 { v } else { v.exp().ln_1p() },
            Op::Softplus,
        )
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        self.out(self.is_tracked(x), vec![], vec![s], || Op::Sum(self.src(x)))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.out(self.is_tracked(x), vec![], vec![s], || Op::Mean(self.src(x)))
    }

    /// Reduce max over the channel axis: [n,c,h,w] -> [n,1,h,w]. The backward
    /// pass routes the gradient to the first maximal channel.
    pub fn channel_max(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "channel_max")?;
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut arg = vec![0u32; n * hw];
        let d = x.data();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    let v = d[base + p];
                    if v > out[b * hw + p] {
                        out[b * hw + p] = v;
                        arg[b * hw + p] = (base + p) as u32;
                    }
                }
            }
        }
        self.out(self.is_tracked(x), vec![n, 1, h, w], out, || Op::ChannelMax {
            x: self.src(x),
            arg,
        })
    }

    /// Mean over the channel axis: [n,c,h,w] -> [n,1,h,w].
    pub fn channel_mean(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "channel_mean")?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        let d = x.data();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    out[b * hw + p] += d[base + p];
                }
            }
        }
        let inv = 1.0 / c as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.out(self.is_tracked(x), vec![n, 1, h, w], out, || {
            Op::ChannelMean(self.src(x))
        })
    }

    /// Repeat a single-channel map over `c` channels: [n,1,h,w] -> [n,c,h,w].
    pub fn broadcast_channel(&self, x: &Tensor, c: usize) -> Result<Tensor> {
        let (n, c_in, h, w) = rank4(x, "broadcast_channel")?;
        if c_in != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_channel: expected single channel, got {:?}",
                x.shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            let src = &x.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                out[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
            }
        }
        self.out(self.is_tracked(x), vec![n, c, h, w], out, || {
            Op::BroadcastChannel(self.src(x))
        })
    }

    /// x[n,c,h,w] + bias[c], broadcast over batch and space.
    pub fn add_channel_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "add_channel_bias")?;
        if b.shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: bias {:?} does not match {} channels",
                b.shape(),
                c
            )));
        }
        let hw = h * w;
        let mut out = x.to_vec();
        for bi in 0..n {
            for ch in 0..c {
                let bv = b.data()[ch];
                out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(b);
        self.out(tracked, vec![n, c, h, w], out, || Op::AddChannelBias {
            x: self.src(x),
            b: self.src(b),
        })
    }

    /// x[m,n] + bias[n], broadcast over rows.
    pub fn add_row_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2(x, "add_row_bias")?;
        if b.shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_row_bias: bias {:?} does not match {} columns",
                b.shape(),
                n
            )));
        }
        let mut out = x.to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(b);
        self.out(tracked, vec![m, n], out, || Op::AddRowBias {
            x: self.src(x),
            b: self.src(b),
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_channels: empty input".into()));
        }
        let (n, _, h, w) = rank4(xs[0], "concat_channels")?;
        let mut total_c = 0usize;
        for x in xs {
            let (n2, c2, h2, w2) = rank4(x, "concat_channels")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::Dimension(format!(
                    "concat_channels: {:?} does not match {:?}",
                    x.shape(),
                    xs[0].shape()
                )));
            }
            total_c += c2;
        }
        let hw = h * w;
        let mut out = vec![0.0; n * total_c * hw];
        for b in 0..n {
            let mut offset = 0usize;
            for x in xs {
                let ci = x.shape()[1];
                let src = &x.data()[b * ci * hw..(b + 1) * ci * hw];
                let dst = (b * total_c + offset) * hw;
                out[dst..dst + ci * hw].copy_from_slice(src);
                offset += ci;
            }
        }
        let tracked = xs.iter().any(|x| self.is_tracked(x));
        self.out(tracked, vec![n, total_c, h, w], out, || Op::ConcatChannels {
            xs: xs.iter().map(|x| self.src(x)).collect(),
        })
    }

    /// Nearest-neighbour 2x upsample of the spatial axes.
    pub fn upsample2x(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "upsample2x")?;
        let out = kernels::upsample2x_fwd(x.data(), n * c, h, w);
        self.out(self.is_tracked(x), vec![n, c, 2 * h, 2 * w], out, || {
            Op::Upsample2x(self.src(x))
        })
    }

    /// 2-d convolution with zero padding.
    pub fn conv2d(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (n, ci, h, w) = rank4(x, "conv2d input")?;
        let (co, kci, kh, kw) = rank4(kernel, "conv2d kernel")?;
        if stride < 1 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        if kci != ci {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?} and kernel {:?} disagree on channels",
                x.shape(),
                kernel.shape()
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
                kernel.shape(),
                x.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    b.shape(),
                    co
                )));
            }
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(w, kw, stride, pad);
        let out = kernels::conv2d_fwd(
            x.data(),
            n,
            ci,
            h,
            w,
            kernel.data(),
            co,
            kh,
            kw,
            bias.map(|b| b.data()),
            stride,
            pad,
        );
        let tracked = self.is_tracked(x)
            || self.is_tracked(kernel)
            || bias.is_some_and(|b| self.is_tracked(b));
        self.out(tracked, vec![n, co, oh, ow], out, || Op::Conv2d {
            x: self.src(x),
            k: self.src(kernel),
            b: bias.map(|b| self.src(b)),
            stride,
            pad,
        })
    }

    /// Max pooling; only `k == stride` windows are supported, and the spatial
    /// extents must divide evenly. Gradient goes to the first maximal element
    /// of each window.
    pub fn max_pool2d(&self, x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        if k != stride || k == 0 {
            return Err(Error::Contract(format!(
                "max_pool2d: requires k == stride >= 1, got k={k}, stride={stride}"
            )));
        }
        let (n, c, h, w) = rank4(x, "max_pool2d")?;
        if h % k != 0 || w % k != 0 {
            return Err(Error::Dimension(format!(
                "max_pool2d: extents {:?} not divisible by {k}",
                x.shape()
            )));
        }
        let (out, arg, oh, ow) = kernels::max_pool_fwd(x.data(), n * c, h, w, k);
        self.out(self.is_tracked(x), vec![n, c, oh, ow], out, || Op::MaxPool {
            x: self.src(x),
            arg,
        })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = rank2(a, "matmul lhs")?;
        let (k2, n) = rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?} inner extents differ",
                a.shape(),
                b.shape()
            )));
        }
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.out(tracked, vec![m, n], out, || Op::MatMul {
            a: self.src(a),
            b: self.src(b),
        })
    }

    pub fn transpose2(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2(x, "transpose")?;
        let out = kernels::transpose(x.data(), m, n);
        self.out(self.is_tracked(x), vec![n, m], out, || {
            Op::Transpose(self.src(x))
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2(x, "softmax_rows")?;
        if n == 0 {
            return Err(Error::Contract("softmax of empty rows".into()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= sum);
        }
        self.out(self.is_tracked(x), vec![m, n], out, || {
            Op::SoftmaxRows(self.src(x))
        })
    }

    /// Layer normalization over the channel axis at every spatial position,
    /// with per-channel affine parameters.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "layer_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Dimension(format!(
                "layer_norm: affine params {:?}/{:?} do not match {} channels",
                gamma.shape(),
                beta.shape(),
                c
            )));
        }
        let hw = h * w;
        let d = x.data();
        let mut mean = vec![0.0; n * hw];
        let mut rstd = vec![0.0; n * hw];
        let mut out = vec![0.0; n * c * hw];
        let inv_c = 1.0 / c as f64;
        for b in 0..n {
            let mu = &mut mean[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let xc = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (m, &v) in mu.iter_mut().zip(xc) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m *= inv_c);
            let rs = &mut rstd[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let xc = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for ((r, &v), m) in rs.iter_mut().zip(xc).zip(&mean[b * hw..]) {
                    let dv = v - m;
                    *r += dv * dv;
                }
            }
            for r in rs.iter_mut() {
                *r = 1.0 / (*r * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let g = gamma.data()[ch];
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = (d[base + p] - mean[b * hw + p]) * rstd[b * hw + p] * g;
                }
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gamma);
        let core = self.out(tracked, vec![n, c, h, w], out, || Op::LayerNormChannels {
            x: self.src(x),
            gamma: self.src(gamma),
            mean,
            rstd,
        })?;
        self.add_channel_bias(&core, beta)
    }

    /// Horizontal forward difference with replicate padding: the last column
    /// is zero and the output shape equals the input shape.
    pub fn diff_h(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "diff_h")?;
        let d = x.data();
        let mut out = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for y in 0..h {
                let row = (plane * h + y) * w;
                for j in 0..w - 1 {
                    out[row + j] = d[row + j + 1] - d[row + j];
                }
            }
        }
        self.out(self.is_tracked(x), x.shape().to_vec(), out, || {
            Op::DiffH(self.src(x))
        })
    }

    /// Vertical forward difference with replicate padding at the last row.
    pub fn diff_v(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = rank4(x, "diff_v")?;
        let d = x.data();
        let mut out = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..h - 1 {
                for j in 0..w {
                    out[base + y * w + j] = d[base + (y + 1) * w + j] - d[base + y * w + j];
                }
            }
        }
        self.out(self.is_tracked(x), x.shape().to_vec(), out, || {
            Op::DiffV(self.src(x))
        })
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let arc = Arc::clone(x.data_arc());
        self.out_arc(self.is_tracked(x), shape.to_vec(), arc, || {
            Op::Reshape(self.src(x))
        })
    }

    /// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
    /// `query` is [s_q, d]; `key` and `value` are [s_kv, d].
    pub fn attention(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (_sq, dq) = rank2(query, "attention query")?;
        let (skv, dk) = rank2(key, "attention key")?;
        let (sv, dv) = rank2(value, "attention value")?;
        if dq != dk {
            return Err(Error::Dimension(format!(
                "attention: query {:?} and key {:?} disagree on embedding dim",
                query.shape(),
                key.shape()
            )));
        }
        if skv != sv {
            return Err(Error::Dimension(format!(
                "attention: key {:?} and value {:?} disagree on rows",
                key.shape(),
                value.shape()
            )));
        }
        let _ = dv;
        let kt = self.transpose2(key)?;
        let scores = self.matmul(query, &kt)?;
        let scaled = self.mul_scalar(&scores, 1.0 / (dq as f64).sqrt())?;
        let weights = self.softmax_rows(&scaled)?;
        self.matmul(&weights, value)
    }
}
