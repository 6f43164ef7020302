//! Fixed interpolation upsamplers and their adjoints.
//!
//! Bilinear uses half-pixel centers: output coordinate `d` samples source
//! coordinate `(d + 0.5)·in/out − 0.5`, clamped to `[0, in − 1]`.

use crate::error::{config_err, shape_err, Result};
use crate::exec;
use crate::flops;
use crate::tensor::Tensor;

fn check_sigma(sigma: usize) -> Result<()> {
    if sigma == 0 {
        return Err(config_err!("sigma must be >= 1"));
    }
    Ok(())
}

pub fn nearest(x: &Tensor, sigma: usize) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (h * sigma, w * sigma);
    let src = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    exec::for_each_chunk(out.data_mut(), oh * ow, |ci, plane| {
        let xp = &src[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            let row = &xp[(y / sigma) * w..][..w];
            for (xo, v) in plane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[xo / sigma];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`nearest`]: sums each σ×σ block of `grad`.
pub fn nearest_backward(grad: &Tensor, sigma: usize) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (c, oh, ow) = grad.chw()?;
    if oh % sigma != 0 || ow % sigma != 0 {
        return Err(shape_err!("{oh}×{ow} is not a multiple of sigma={sigma}"));
    }
    let (h, w) = (oh / sigma, ow / sigma);
    let g = grad.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(out.data_mut(), h * w, |ci, plane| {
        let gp = &g[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                plane[(y / sigma) * w + xo / sigma] += gp[y * ow + xo];
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src_len: usize, dst_len: usize) -> Vec<Taps> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            Taps {
                lo,
                hi: (lo + 1).min(src_len - 1),
                frac: s - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize to an arbitrary `out_h × out_w`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("target extents must be >= 1"));
    }
    flops::record(|t| t.interp_taps += (4 * c * out_h * out_w) as u64);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = x.data();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    exec::for_each_chunk(out.data_mut(), out_h * out_w, |ci, plane| {
        let xp = &src[ci * h * w..(ci + 1) * h * w];
        for (y, a) in ty.iter().enumerate() {
            let (r0, r1) = (&xp[a.lo * w..][..w], &xp[a.hi * w..][..w]);
            for (xo, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * r0[b.lo] + b.frac * r0[b.hi];
                let bot = (1.0 - b.frac) * r1[b.lo] + b.frac * r1[b.hi];
                plane[y * out_w + xo] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    });
    Ok(out)
}

pub fn bilinear(x: &Tensor, sigma: usize) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (_, h, w) = x.chw()?;
    bilinear_resize(x, h * sigma, w * sigma)
}

/// Adjoint of [`bilinear_resize`] from `grad` back onto an `h × w` source.
pub fn bilinear_resize_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad.chw()?;
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let g = grad.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    exec::for_each_chunk(out.data_mut(), h * w, |ci, plane| {
        let gp = &g[ci * oh * ow..(ci + 1) * oh * ow];
        for (y, a) in ty.iter().enumerate() {
            for (xo, b) in tx.iter().enumerate() {
                let gv = gp[y * ow + xo];
                let top = (1.0 - a.frac) * gv;
                let bot = a.frac * gv;
                plane[a.lo * w + b.lo] += (1.0 - b.frac) * top;
                plane[a.lo * w + b.hi] += b.frac * top;
                plane[a.hi * w + b.lo] += (1.0 - b.frac) * bot;
                plane[a.hi * w + b.hi] += b.frac * bot;
            }
        }
    });
    Ok(out)
}

pub fn bilinear_backward(grad: &Tensor, sigma: usize) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (_, oh, ow) = grad.chw()?;
    if oh % sigma != 0 || ow % sigma != 0 {
        return Err(shape_err!("{oh}×{ow} is not a multiple of sigma={sigma}"));
    }
    bilinear_resize_backward(grad, oh / sigma, ow / sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_2x() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = nearest(&x, 2).unwrap();
        #[rustfmt::skip]
        let want = [1.0, 1.0, 2.0, 2.0,
                    1.0, 1.0, 2.0, 2.0,
                    3.0, 3.0, 4.0, 4.0,
                    3.0, 3.0, 4.0, 4.0];
        assert_eq!(y.data(), &want);
        assert_eq!(nearest(&x, 1).unwrap(), x);
    }

    #[test]
    fn bilinear_ramp() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let x = Tensor::from_fn3(2, 3, 5, |c, y, x| (c * 7 + y * 3) as f64 - x as f64 * 0.5);
        assert_eq!(bilinear(&x, 1).unwrap(), x);
        let k = Tensor::full(&[2, 3, 3], 0.7);
        let y = bilinear(&k, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn adjoints_satisfy_dot_identity() {
        let mut rng = crate::rng::Rng::new(11);
        let x = Tensor::new(vec![2, 3, 4], rng.normal(24, 1.0)).unwrap();
        let g = Tensor::new(vec![2, 6, 8], rng.normal(96, 1.0)).unwrap();
        let lhs = bilinear(&x, 2).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&bilinear_backward(&g, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = nearest(&x, 2).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&nearest_backward(&g, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
