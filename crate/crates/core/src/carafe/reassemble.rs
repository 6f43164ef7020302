//! Content-aware reassembly: every target pixel is a weighted sum of the
//! `k_up × k_up` source window around its source location, with taps that fall
//! outside the map contributing zero (kernels are not renormalized).

use crate::carafe::config::CarafeConfig;
use crate::carafe::field::KernelField;
use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::flops;
use crate::tensor::Tensor;

/// Source offset of window row/column `n` relative to the center, if the tap
/// at source coordinate `i` lands inside `0..len`.
#[inline]
fn tap(i: usize, n: usize, r: usize, len: usize) -> Option<usize> {
    let s = (i + n).checked_sub(r)?;
    (s < len).then_some(s)
}

/// Range of `j` whose tap `j + m - r` lands inside `0..len`.
#[inline]
fn span(m: usize, r: usize, len: usize) -> std::ops::Range<usize> {
    r.saturating_sub(m)..(len + r).saturating_sub(m).min(len)
}

pub fn reassemble(x: &Tensor, kernels: &KernelField, cfg: &CarafeConfig) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    kernels.check(cfg.sigma, cfg.k_up, h, w)?;
    Ok(reassemble_unchecked(x, kernels))
}

pub(crate) fn reassemble_unchecked(x: &Tensor, kernels: &KernelField) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (sigma, k) = (kernels.sigma, kernels.k_up);
    let (r, kk, hw) = (k / 2, k * k, h * w);
    let (oh, ow) = (sigma * h, sigma * w);
    flops::record(|t| t.macs += (c * oh * ow * kk) as u64);
    let src = x.data();
    let wts = kernels.normalized.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    exec::for_each_chunk(out.data_mut(), oh * ow, |ci, plane| {
        let xp = &src[ci * hw..(ci + 1) * hw];
        for py in 0..sigma {
            for px in 0..sigma {
                let p = py * sigma + px;
                for n in 0..k {
                    for m in 0..k {
                        let wp = &wts[(p * kk + n * k + m) * hw..][..hw];
                        for i in 0..h {
                            let Some(si) = tap(i, n, r, h) else { continue };
                            let row = &mut plane[(i * sigma + py) * ow..][..ow];
                            let src_row = &xp[si * w..(si + 1) * w];
                            let w_row = &wp[i * w..(i + 1) * w];
                            for j in span(m, r, w) {
                                row[j * sigma + px] += w_row[j] * src_row[j + m - r];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of reassembly wrt the source features and the normalized kernels.
pub(crate) fn reassemble_backward(grad_out: &Tensor, x: &Tensor, kernels: &KernelField) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.chw()?;
    let (sigma, k) = (kernels.sigma, kernels.k_up);
    let (r, kk, hw) = (k / 2, k * k, h * w);
    let (oh, ow) = (sigma * h, sigma * w);
    if grad_out.dims() != [c, oh, ow] {
        return Err(shape_err!(
            "grad_out must be {:?}, got {:?}",
            [c, oh, ow],
            grad_out.dims()
        ));
    }
    let g = grad_out.data();
    let src = x.data();
    let wts = kernels.normalized.data();

    let mut grad_x = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(grad_x.data_mut(), hw, |ci, gx| {
        let gp = &g[ci * oh * ow..(ci + 1) * oh * ow];
        for py in 0..sigma {
            for px in 0..sigma {
                let p = py * sigma + px;
                for n in 0..k {
                    for m in 0..k {
                        let wp = &wts[(p * kk + n * k + m) * hw..][..hw];
                        for i in 0..h {
                            let Some(si) = tap(i, n, r, h) else { continue };
                            let g_row = &gp[(i * sigma + py) * ow..][..ow];
                            for j in span(m, r, w) {
                                gx[si * w + j + m - r] += wp[i * w + j] * g_row[j * sigma + px];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut grad_k = Tensor::zeros(kernels.normalized.dims());
    exec::for_each_chunk(grad_k.data_mut(), hw, |u, gk| {
        let (p, q) = (u / kk, u % kk);
        let (py, px, n, m) = (p / sigma, p % sigma, q / k, q % k);
        for ci in 0..c {
            let gp = &g[ci * oh * ow..(ci + 1) * oh * ow];
            let xp = &src[ci * hw..(ci + 1) * hw];
            for i in 0..h {
                let Some(si) = tap(i, n, r, h) else { continue };
                let g_row = &gp[(i * sigma + py) * ow..][..ow];
                for j in span(m, r, w) {
                    gk[i * w + j] += g_row[j * sigma + px] * xp[si * w + j + m - r];
                }
            }
        }
    });
    Ok((grad_x, grad_k))
}

/// Reassembles a single-channel mask in `[0, 1]` with the feature kernels.
pub fn reassemble_mask(mask: &Tensor, kernels: &KernelField, cfg: &CarafeConfig) -> Result<Tensor> {
    let (c, _, _) = mask.chw()?;
    if c != 1 {
        return Err(shape_err!("mask must have one channel, got {c}"));
    }
    if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("mask values must lie in [0, 1]".into()));
    }
    reassemble(mask, kernels, cfg)
}
