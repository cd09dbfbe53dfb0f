//! Raw f64 slice kernels for the heavyweight primitives.
//!
//! Parallelism is only over independent output regions (disjoint rows /
//! channels), so results are bitwise deterministic regardless of thread
//! scheduling.

use rayon::prelude::*;

/// Minimum per-chunk work (flops) before rayon dispatch pays for itself.
const PAR_MIN_CHUNK: usize = 48 * 1024;

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// im2col: (ci, u, v) rows by (oy, ox) columns, zero padding.
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cols = oh * ow;
    let mut m = vec![0.0; ci * kh * kw * cols];
    for c in 0..ci {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = ((c * kh + u) * kw + v) * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    let out_base = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            m[out_base + ox] = xc[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Forward convolution for one batch of inputs.
/// `x`: [n, ci, h, w], `k`: [co, ci, kh, kw], `bias`: [co] optional.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let cols = oh * ow;
    let r = ci * kh * kw;
    let mut out = vec![0.0; n * co * cols];
    for b in 0..n {
        let m = im2col(&x[b * ci * h * w..], ci, h, w, kh, kw, stride, pad, oh, ow);
        let out_b = &mut out[b * co * cols..(b + 1) * co * cols];
        let chunk_work = r * cols;
        let body = |(oc, out_c): (usize, &mut [f64])| {
            if let Some(bv) = bias {
                out_c.fill(bv[oc]);
            }
            let krow = &k[oc * r..(oc + 1) * r];
            for (ri, &kv) in krow.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let mrow = &m[ri * cols..(ri + 1) * cols];
                for (o, &mv) in out_c.iter_mut().zip(mrow) {
                    *o += kv * mv;
                }
            }
        };
        if chunk_work >= PAR_MIN_CHUNK && co >= 2 {
            out_b.par_chunks_mut(cols).enumerate().for_each(body);
        } else {
            out_b.chunks_mut(cols).enumerate().for_each(body);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
///
/// For stride 1 this is itself a convolution of the output gradient with the
/// channel-transposed, spatially flipped kernel, which reuses the fast
/// im2col path; other strides take the direct gather loop.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input(
    dy: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    if stride == 1 && kh == kw && kh >= 1 + pad {
        let mut flipped = vec![0.0; ci * co * kh * kw];
        for oc in 0..co {
            for c in 0..ci {
                for u in 0..kh {
                    for v in 0..kw {
                        flipped[((c * co + oc) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)] =
                            k[((oc * ci + c) * kh + u) * kw + v];
                    }
                }
            }
        }
        return conv2d_fwd(dy, n, co, oh, ow, &flipped, ci, kh, kw, None, 1, kh - 1 - pad);
    }
    let mut dx = vec![0.0; n * ci * h * w];
    for b in 0..n {
        let dyb = &dy[b * co * oh * ow..(b + 1) * co * oh * ow];
        let dxb = &mut dx[b * ci * h * w..(b + 1) * ci * h * w];
        let chunk_work = h * w * co * kh * kw;
        let body = |(c, dxc): (usize, &mut [f64])| {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0;
                    for u in 0..kh {
                        let num_y = iy + pad;
                        if num_y < u || (num_y - u) % stride != 0 {
                            continue;
                        }
                        let oy = (num_y - u) / stride;
                        if oy >= oh {
                            continue;
                        }
                        for v in 0..kw {
                            let num_x = ix + pad;
                            if num_x < v || (num_x - v) % stride != 0 {
                                continue;
                            }
                            let ox = (num_x - v) / stride;
                            if ox >= ow {
                                continue;
                            }
                            for oc in 0..co {
                                acc += dyb[(oc * oh + oy) * ow + ox]
                                    * k[((oc * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    dxc[iy * w + ix] = acc;
                }
            }
        };
        if chunk_work >= PAR_MIN_CHUNK && ci >= 2 {
            dxb.par_chunks_mut(h * w).enumerate().for_each(body);
        } else {
            dxb.chunks_mut(h * w).enumerate().for_each(body);
        }
    }
    dx
}

/// Gradient w.r.t. the convolution kernel (and bias when requested).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_kernel(
    dy: &[f64],
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    want_bias: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let cols = oh * ow;
    let r = ci * kh * kw;
    let mut dk = vec![0.0; co * r];
    let mut db = if want_bias { Some(vec![0.0; co]) } else { None };
    for b in 0..n {
        let m = im2col(&x[b * ci * h * w..], ci, h, w, kh, kw, stride, pad, oh, ow);
        let dyb = &dy[b * co * cols..(b + 1) * co * cols];
        let chunk_work = r * cols;
        let body = |(oc, dkrow): (usize, &mut [f64])| {
            let g = &dyb[oc * cols..(oc + 1) * cols];
            for (ri, dkv) in dkrow.iter_mut().enumerate() {
                let mrow = &m[ri * cols..(ri + 1) * cols];
                let mut acc = 0.0;
                for (gv, mv) in g.iter().zip(mrow) {
                    acc += gv * mv;
                }
                *dkv += acc;
            }
        };
        if chunk_work >= PAR_MIN_CHUNK && co >= 2 {
            dk.par_chunks_mut(r).enumerate().for_each(body);
        } else {
            dk.chunks_mut(r).enumerate().for_each(body);
        }
        if let Some(db) = db.as_mut() {
            for oc in 0..co {
                db[oc] += dyb[oc * cols..(oc + 1) * cols].iter().sum::<f64>();
            }
        }
    }
    (dk, db)
}

/// Max pooling with `k == stride`; returns (values, argmax input offsets).
pub fn max_pool_fwd(
    x: &[f64],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let oh = h / k;
    let ow = w / k;
    let mut out = vec![0.0; nc * oh * ow];
    let mut arg = vec![0u32; nc * oh * ow];
    for c in 0..nc {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for u in 0..k {
                    for v in 0..k {
                        let idx = (oy * k + u) * w + ox * k + v;
                        // strict > keeps the first (row-major) maximum on ties
                        if xc[idx] > best {
                            best = xc[idx];
                            best_i = idx;
                        }
                    }
                }
                out[(c * oh + oy) * ow + ox] = best;
                arg[(c * oh + oy) * ow + ox] = (c * h * w + best_i) as u32;
            }
        }
    }
    (out, arg, oh, ow)
}

/// 2x nearest-neighbour upsample on the trailing two axes.
pub fn upsample2x_fwd(x: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; nc * oh * ow];
    for c in 0..nc {
        for y in 0..h {
            for x_ in 0..w {
                let v = x[(c * h + y) * w + x_];
                let base = (c * oh + 2 * y) * ow + 2 * x_;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2x_bwd(dy: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut dx = vec![0.0; nc * h * w];
    for c in 0..nc {
        for y in 0..h {
            for x_ in 0..w {
                let base = (c * oh + 2 * y) * ow + 2 * x_;
                dx[(c * h + y) * w + x_] =
                    dy[base] + dy[base + 1] + dy[base + ow] + dy[base + ow + 1];
            }
        }
    }
    dx
}

/// Row-major matmul: a [m, k] x b [k, n] -> [m, n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |(i, row): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if k * n >= PAR_MIN_CHUNK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
