//! Dense, convolution, pooling, and resampling kernels.
//!
//! Shared by the reverse-mode tape and the no-gradient inference path so the
//! two produce bit-identical forward values. Callers validate shapes; these
//! routines only `debug_assert` them.

use crate::tensor::Tensor;

/// y = W·x + b for W `[out, in]`, x `[in]`, b `[out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.numel(), in_dim);
    debug_assert_eq!(b.numel(), out_dim);
    let xd = x.data();
    let wd = w.data();
    let mut y = b.data().to_vec();
    for o in 0..out_dim {
        let row = &wd[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * xd[i];
        }
        y[o] += acc;
    }
    Tensor::new(vec![out_dim], y).expect("dense output finite")
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    for o in 0..out_dim {
        let g = dyd[o];
        for i in 0..in_dim {
            dx[i] += wd[o * in_dim + i] * g;
            dw[o * in_dim + i] += xd[i] * g;
        }
    }
    (
        Tensor::new(vec![in_dim], dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        dy.clone(),
    )
}

/// Output spatial size of a 2-D convolution.
pub fn conv2d_out_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Zero-padded 2-D convolution: x `[ic, h, w]`, weight `[oc, ic, kh, kw]`, bias `[oc]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ic, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    debug_assert_eq!(w.shape()[1], ic);
    let (oh, ow) = conv2d_out_size(h, wd_, kh, kw, stride, pad);
    let xd = x.data();
    let wgt = w.data();
    let bias = b.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let w_o = &wgt[o * ic * kh * kw..(o + 1) * ic * kh * kw];
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ic {
            let x_c = &xd[c * h * wd_..(c + 1) * h * wd_];
            let w_c = &w_o[c * kh * kw..(c + 1) * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x_c[iy as usize * wd_..(iy as usize + 1) * wd_];
                    let wrow = &w_c[ky * kw..(ky + 1) * kw];
                    let orow = &mut out_o[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix0 = (ox * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd_ as isize {
                                continue;
                            }
                            acc += xrow[ix as usize] * wrow[kx];
                        }
                        orow[ox] += acc;
                    }
                }
            }
        }
        for v in out_o.iter_mut() {
            *v += bias[o];
        }
    }
    Tensor::new(vec![oc, oh, ow], out).expect("conv output finite")
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (ic, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let xd = x.data();
    let wgt = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; ic * h * wd_];
    let mut dw = vec![0.0; oc * ic * kh * kw];
    let mut db = vec![0.0; oc];
    for o in 0..oc {
        let dy_o = &dyd[o * oh * ow..(o + 1) * oh * ow];
        db[o] = dy_o.iter().sum();
        for c in 0..ic {
            let x_c = &xd[c * h * wd_..(c + 1) * h * wd_];
            let dx_c = &mut dx[c * h * wd_..(c + 1) * h * wd_];
            let w_c = &wgt[(o * ic + c) * kh * kw..(o * ic + c + 1) * kh * kw];
            let dw_c = &mut dw[(o * ic + c) * kh * kw..(o * ic + c + 1) * kh * kw];
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let g = dy_o[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd_ as isize {
                                continue;
                            }
                            let ix = ix as usize;
                            dx_c[iy * wd_ + ix] += w_c[ky * kw + kx] * g;
                            dw_c[ky * kw + kx] += x_c[iy * wd_ + ix] * g;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![oc], db).unwrap(),
    )
}

/// Non-overlapping-friendly average pooling with square window semantics.
pub fn avg_pool2d_forward(x: &Tensor, kh: usize, kw: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let xd = x.data();
    let inv = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let x_c = &xd[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    for kx in 0..kw {
                        acc += x_c[iy * w + ox * stride + kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

pub fn avg_pool2d_backward(x: &Tensor, kh: usize, kw: usize, stride: usize, dy: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let dyd = dy.data();
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let dx_c = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyd[(ch * oh + oy) * ow + ox] * inv;
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    for kx in 0..kw {
                        dx_c[iy * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let iy = oy / factor;
            let src = &xd[(ch * h + iy) * w..(ch * h + iy + 1) * w];
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for ox in 0..ow {
                dst[ox] = src[ox / factor];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

pub fn upsample_nearest_backward(x: &Tensor, factor: usize, dy: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let dyd = dy.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                dx[(ch * h + iy) * w + ox / factor] += dyd[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

/// Concatenation of `[c_i, h, w]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let total_c: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut out = Vec::with_capacity(total_c * h * w);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![total_c, h, w], out).unwrap()
}
