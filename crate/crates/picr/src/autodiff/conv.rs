//! im2col-based convolutions. Weights follow the usual conventions:
//! conv2d `w [Co, Ci, k, k]`, transposed conv `w [Ci, Co, k, k]`.

use super::ops::gemm;
use super::{macs, Tensor};

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds `x [C,H,W]` into `[C*k*k, Ho*Wo]` with zero padding.
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut col = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: folds `col [C*k*k, Ho*Wo]` back onto `[C,H,W]`,
/// accumulating overlaps.
pub fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

fn conv_dims(x: &Tensor, w: &Tensor) -> (usize, usize, usize, usize, usize) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    assert_eq!(ws[2], ws[3], "only square kernels supported");
    (xs[0], xs[1], xs[2], ws[2], ws[0])
}

pub(super) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ci, h, wd, k, co) = conv_dims(x, w);
    assert_eq!(w.shape()[1], ci, "conv channel mismatch");
    assert_eq!(b.shape(), [co], "conv bias mismatch");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let col = im2col(&x.data(), ci, h, wd, k, stride, pad);
    let mut out = vec![0.0; co * ho * wo];
    gemm(co, ci * k * k, ho * wo, &w.data(), false, &col, false, 0.0, &mut out);
    macs::add((co * ci * k * k * ho * wo) as u128);
    {
        let bd = b.data();
        for o in 0..co {
            let bias = bd[o];
            for v in &mut out[o * ho * wo..(o + 1) * ho * wo] {
                *v += bias;
            }
        }
    }
    (out, vec![co, ho, wo])
}

pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    gy: &[f64],
    out_shape: &[usize],
) {
    let (ci, h, wd, k, co) = conv_dims(x, w);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let patch = ci * k * k;
    if w.n.needs_grad {
        // dW = dY [Co, HoWo] x col^T [HoWo, Ci k^2]
        let col = im2col(&x.data(), ci, h, wd, k, stride, pad);
        let mut dw = vec![0.0; co * patch];
        gemm(co, ho * wo, patch, gy, false, &col, true, 0.0, &mut dw);
        w.add_to_grad(&dw);
    }
    if b.n.needs_grad {
        let mut db = vec![0.0; co];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc = gy[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        b.add_to_grad(&db);
    }
    if x.n.needs_grad {
        // dcol = W^T [Ci k^2, Co] x dY [Co, HoWo], then fold back.
        let mut dcol = vec![0.0; patch * ho * wo];
        gemm(patch, co, ho * wo, &w.data(), true, gy, false, 0.0, &mut dcol);
        let dx = col2im(&dcol, ci, h, wd, k, stride, pad);
        x.add_to_grad(&dx);
    }
}

pub(super) fn conv_t2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv_t input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv_t weight must be 4-d");
    let (ci, h, wd) = (xs[0], xs[1], xs[2]);
    let (co, k) = (ws[1], ws[2]);
    assert_eq!(ws[0], ci, "conv_t channel mismatch");
    assert_eq!(ws[2], ws[3], "only square kernels supported");
    assert_eq!(b.shape(), [co], "conv_t bias mismatch");
    let ho = (h - 1) * stride + k;
    let wo = (wd - 1) * stride + k;
    // col [Co k^2, H W] = W^T_mat [Co k^2, Ci] x X_mat [Ci, H W]
    let patch = co * k * k;
    let mut col = vec![0.0; patch * h * wd];
    gemm(patch, ci, h * wd, &w.data(), true, &x.data(), false, 0.0, &mut col);
    macs::add((ci * patch * h * wd) as u128);
    // Fold: output positions are the im2col patches of the (unpadded) output
    // grid with the same stride.
    let mut out = col2im(&col, co, ho, wo, k, stride, 0);
    {
        let bd = b.data();
        for o in 0..co {
            let bias = bd[o];
            for v in &mut out[o * ho * wo..(o + 1) * ho * wo] {
                *v += bias;
            }
        }
    }
    (out, vec![co, ho, wo])
}

pub(super) fn conv_t2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    gy: &[f64],
    out_shape: &[usize],
) {
    let xs = x.shape();
    let ws = w.shape();
    let (ci, h, wd) = (xs[0], xs[1], xs[2]);
    let (co, k) = (ws[1], ws[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let patch = co * k * k;
    // dcol [Co k^2, H W] is the unfold of dY at the input grid.
    let dcol = im2col(gy, co, ho, wo, k, stride, 0);
    if x.n.needs_grad {
        let mut dx = vec![0.0; ci * h * wd];
        gemm(ci, patch, h * wd, &w.data(), false, &dcol, false, 0.0, &mut dx);
        x.add_to_grad(&dx);
    }
    if w.n.needs_grad {
        let mut dw = vec![0.0; ci * patch];
        gemm(ci, h * wd, patch, &x.data(), false, &dcol, true, 0.0, &mut dw);
        w.add_to_grad(&dw);
    }
    if b.n.needs_grad {
        let mut db = vec![0.0; co];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc = gy[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        b.add_to_grad(&db);
    }
}
