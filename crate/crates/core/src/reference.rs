//! Direct-loop definitions used as oracles by the self-test.
//!
//! These follow the defining formulas literally with no blocking, reordering
//! or sharing with the optimized kernels.

use crate::carafe::KernelField;
use crate::tensor::Tensor;

/// `out[o,y,x] = b[o] + Σ_{c,dy,dx} w[o,c,dy,dx]·x_pad[c, y+dy, x+dx]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &[f64]) -> Tensor {
    let (cin, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (cout, k) = (weight.dims()[0], weight.dims()[2]);
    let pad = (k as isize - 1) / 2;
    let wd = weight.data();
    Tensor::from_fn3(cout, h, w, |o, y, x| {
        let mut acc = bias[o];
        for c in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    let sx = x as isize + dx as isize - pad;
                    let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        input.at3(c, sy as usize, sx as usize)
                    };
                    acc += wd[((o * cin + c) * k + dy) * k + dx] * v;
                }
            }
        }
        acc
    })
}

/// Weighted window sum for every target pixel, zero outside the source map.
pub fn reassemble(x: &Tensor, kernels: &KernelField) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (sigma, k) = (kernels.sigma, kernels.k_up);
    let r = (k / 2) as isize;
    Tensor::from_fn3(c, sigma * h, sigma * w, |ci, ty, tx| {
        let (i, j) = (ty / sigma, tx / sigma);
        let p = (ty % sigma) * sigma + tx % sigma;
        let mut acc = 0.0;
        for n in -r..=r {
            for m in -r..=r {
                let (si, sj) = (i as isize + n, j as isize + m);
                let v = if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                    0.0
                } else {
                    x.at3(ci, si as usize, sj as usize)
                };
                acc += kernels.weight(p, (n + r) as usize, (m + r) as usize, i, j) * v;
            }
        }
        acc
    })
}

pub fn nearest(x: &Tensor, sigma: usize) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    Tensor::from_fn3(c, sigma * h, sigma * w, |ci, y, xx| x.at3(ci, y / sigma, xx / sigma))
}

/// `k×k` box filter over zero-padded neighbourhoods, then nearest upsampling.
pub fn box_filtered_nearest(x: &Tensor, sigma: usize, k: usize) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let r = (k / 2) as isize;
    let boxed = Tensor::from_fn3(c, h, w, |ci, i, j| {
        let mut acc = 0.0;
        for n in -r..=r {
            for m in -r..=r {
                let (si, sj) = (i as isize + n, j as isize + m);
                if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                    acc += x.at3(ci, si as usize, sj as usize) / (k * k) as f64;
                }
            }
        }
        acc
    });
    nearest(&boxed, sigma)
}
