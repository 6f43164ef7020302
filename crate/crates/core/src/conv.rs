//! Stride-1, zero-padded ("same") 2-D convolution with its analytic backward.

use crate::error::{config_err, shape_err, Result};
use crate::exec;
use crate::flops;
use crate::rng::{he_normal, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(config_err!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("channel counts must be >= 1"));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + self.out_channels
    }

    fn check(&self, input: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<(usize, usize)> {
        self.validate()?;
        let (c, h, w) = input.chw()?;
        if c != self.in_channels {
            return Err(shape_err!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        if weight.dims() != self.weight_dims() {
            return Err(shape_err!(
                "conv weight must be {:?}, got {:?}",
                self.weight_dims(),
                weight.dims()
            ));
        }
        if bias.len() != self.out_channels {
            return Err(shape_err!(
                "conv bias must have {} entries, got {}",
                self.out_channels,
                bias.len()
            ));
        }
        Ok((h, w))
    }
}

/// Valid `x` range of a tap at horizontal offset `dx` (padded coordinates).
#[inline]
fn tap_span(dx: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(dx);
    let hi = (width + pad).saturating_sub(dx).min(width);
    (lo, hi)
}

/// Dot product over four interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    let (h, w) = spec.check(input, weight, bias)?;
    let (cin, k, pad) = (spec.in_channels, spec.kernel_size, spec.padding());
    let hw = h * w;
    flops::record(|t| {
        t.macs += (spec.out_channels * hw * cin * k * k) as u64;
        t.bias_adds += (spec.out_channels * hw) as u64;
    });
    let src = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(&[spec.out_channels, h, w]);
    exec::for_each_chunk(out.data_mut(), hw, |o, plane| {
        plane.fill(bias[o]);
        for c in 0..cin {
            let in_plane = &src[c * hw..(c + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wt[((o * cin + c) * k + dy) * k + dx];
                    let (x0, x1) = tap_span(dx, pad, w);
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let src_row = &in_plane[(sy - pad) * w..(sy - pad + 1) * w];
                        let dst_row = &mut plane[y * w..(y + 1) * w];
                        let taps = &src_row[x0 + dx - pad..x1 + dx - pad];
                        for (d, &v) in dst_row[x0..x1].iter_mut().zip(taps) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let zero_bias = vec![0.0; spec.out_channels];
    let (h, w) = spec.check(input, weight, &zero_bias)?;
    if grad_out.dims() != [spec.out_channels, h, w] {
        return Err(shape_err!(
            "grad_out must be {:?}, got {:?}",
            [spec.out_channels, h, w],
            grad_out.dims()
        ));
    }
    let (cin, cout, k, pad) = (spec.in_channels, spec.out_channels, spec.kernel_size, spec.padding());
    let hw = h * w;
    let g = grad_out.data();
    let src = input.data();
    let wt = weight.data();

    let bias: Vec<f64> = (0..cout).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect();

    let mut grad_w = Tensor::zeros(&spec.weight_dims());
    exec::for_each_chunk(grad_w.data_mut(), cin * k * k, |o, gw| {
        let g_plane = &g[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let in_plane = &src[c * hw..(c + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let (x0, x1) = tap_span(dx, pad, w);
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let src_row = &in_plane[(sy - pad) * w..(sy - pad + 1) * w];
                        let g_row = &g_plane[y * w..(y + 1) * w];
                        acc += dot(&g_row[x0..x1], &src_row[x0 + dx - pad..x1 + dx - pad]);
                    }
                    gw[(c * k + dy) * k + dx] = acc;
                }
            }
        }
    });

    let mut grad_in = Tensor::zeros(&[cin, h, w]);
    exec::for_each_chunk(grad_in.data_mut(), hw, |c, gi| {
        for o in 0..cout {
            let g_plane = &g[o * hw..(o + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wt[((o * cin + c) * k + dy) * k + dx];
                    let (x0, x1) = tap_span(dx, pad, w);
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let g_row = &g_plane[y * w..(y + 1) * w];
                        let dst = &mut gi[(sy - pad) * w..(sy - pad + 1) * w];
                        for (d, &gv) in dst[x0 + dx - pad..x1 + dx - pad].iter_mut().zip(&g_row[x0..x1]) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    });

    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias,
    })
}

/// A convolution layer: spec plus owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn init(spec: ConvSpec, rng: &mut Rng) -> Self {
        let [o, i, k, _] = spec.weight_dims();
        let n = o * i * k * k;
        let weight = Tensor::new(spec.weight_dims().to_vec(), he_normal(rng, n, i * k * k))
            .expect("init shape");
        Self {
            spec,
            weight,
            bias: vec![0.0; o],
        }
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Tensor::zeros(&spec.weight_dims()),
            bias: vec![0.0; spec.out_channels],
        }
    }

    /// Center-tap identity (requires `in == out`).
    pub fn identity(channels: usize, kernel_size: usize) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, kernel_size)?;
        let mut conv = Self::zeros(spec);
        let p = spec.padding();
        let k = kernel_size;
        for c in 0..channels {
            conv.weight.data_mut()[((c * channels + c) * k + p) * k + p] = 1.0;
        }
        Ok(conv)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d_forward(input, &self.weight, &self.bias, &self.spec)
    }

    pub fn backward(&self, grad_out: &Tensor, input: &Tensor) -> Result<(Tensor, Conv2d)> {
        let g = conv2d_backward(grad_out, input, &self.weight, &self.spec)?;
        Ok((
            g.input,
            Conv2d {
                spec: self.spec,
                weight: g.weight,
                bias: g.bias,
            },
        ))
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(ConvSpec::new(1, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn ones_kernel_counts_in_bounds_taps() {
        let spec = ConvSpec::new(1, 1, 3).unwrap();
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at3(0, yy, xx), 4.0);
        }
        assert_eq!(y.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn identity_1x1() {
        let conv = Conv2d::identity(3, 1).unwrap();
        let x = Tensor::from_fn3(3, 4, 5, |c, y, x| (c as f64) - 0.3 * y as f64 + x as f64 * x as f64);
        assert_eq!(conv.forward(&x).unwrap(), x);
        let (gi, _) = conv.backward(&x, &x).unwrap();
        assert_eq!(gi, x);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(1);
        let conv = Conv2d::init(ConvSpec::new(2, 3, 3).unwrap(), &mut rng);
        let x = Tensor::new(vec![2, 4, 4], rng.normal(32, 1.0)).unwrap();
        let (gi, gp) = conv.backward(&Tensor::zeros(&[3, 4, 4]), &x).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gp.weight.data().iter().all(|&v| v == 0.0));
        assert!(gp.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let spec = ConvSpec::new(2, 1, 3).unwrap();
        let x = Tensor::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, &[0.0], &spec), Err(Error::Shape(_))));
    }
}
