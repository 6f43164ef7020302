//! Comparison upsamplers and a uniform [`Upsampler`] wrapper used by the toy
//! benchmark and the cost model.

use std::fmt;
use std::str::FromStr;

use crate::carafe::{carafe_backward, carafe_forward, CarafeCache, CarafeConfig, CarafeParams};
use crate::conv::{Conv2d, ConvSpec};
use crate::error::{config_err, shape_err, Error, Result};
use crate::exec;
use crate::flops;
use crate::interp;
use crate::layout::subpixel_index;
use crate::rng::{he_normal, Rng};
use crate::softmax::{sigmoid, NormalizerMode};
use crate::tensor::Tensor;

/// CARAFE hyper-parameters that do not depend on the deployment site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarafeSettings {
    pub k_up: usize,
    pub k_encoder: usize,
    pub c_mid: Option<usize>,
    pub normalizer: NormalizerMode,
}

impl Default for CarafeSettings {
    fn default() -> Self {
        Self {
            k_up: CarafeConfig::DEFAULT_K_UP,
            k_encoder: CarafeConfig::DEFAULT_K_ENCODER,
            c_mid: Some(CarafeConfig::DEFAULT_C_MID),
            normalizer: NormalizerMode::Softmax,
        }
    }
}

impl CarafeSettings {
    pub fn config(&self, in_channels: usize, sigma: usize) -> Result<CarafeConfig> {
        let cfg = CarafeConfig {
            sigma,
            k_up: self.k_up,
            k_encoder: self.k_encoder,
            c_mid: self.c_mid,
            in_channels,
            normalizer: self.normalizer,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsamplerKind {
    Nearest,
    Bilinear,
    NearestConv,
    BilinearConv,
    Deconv,
    PixelShuffle,
    SpatialAttention,
    Carafe(CarafeSettings),
}

impl UpsamplerKind {
    /// Every kind in comparison-table order, CARAFE at its defaults.
    pub fn all() -> [UpsamplerKind; 8] {
        use UpsamplerKind::*;
        [
            Nearest,
            Bilinear,
            NearestConv,
            BilinearConv,
            Deconv,
            PixelShuffle,
            SpatialAttention,
            Carafe(CarafeSettings::default()),
        ]
    }

    /// Command-line name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::NearestConv => "nearest_conv",
            Self::BilinearConv => "bilinear_conv",
            Self::Deconv => "deconv",
            Self::PixelShuffle => "pixel_shuffle",
            Self::SpatialAttention => "spatial_attention",
            Self::Carafe(_) => "carafe",
        }
    }

    /// Short label used in tables.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Nearest => "Nearest",
            Self::Bilinear => "Bilinear",
            Self::NearestConv => "N.C.",
            Self::BilinearConv => "B.C.",
            Self::Deconv => "Deconv",
            Self::PixelShuffle => "P.S.",
            Self::SpatialAttention => "S.A.",
            Self::Carafe(_) => "CARAFE",
        }
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(self, Self::Nearest | Self::Bilinear)
    }
}

impl fmt::Display for UpsamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpsamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase();
        UpsamplerKind::all()
            .into_iter()
            .find(|kind| kind.name() == k || kind.label().to_ascii_lowercase() == k)
            .ok_or_else(|| config_err!("unknown upsampler kind '{s}'"))
    }
}

/// Interpolate with nearest neighbour, then apply `conv`.
pub fn nearest_conv(x: &Tensor, sigma: usize, conv: &Conv2d) -> Result<Tensor> {
    conv.forward(&interp::nearest(x, sigma)?)
}

/// Interpolate bilinearly, then apply `conv`.
pub fn bilinear_conv(x: &Tensor, sigma: usize, conv: &Conv2d) -> Result<Tensor> {
    conv.forward(&interp::bilinear(x, sigma)?)
}

/// 3×3 transposed convolution with stride 2, padding 1 and output padding 1,
/// so a `C×H×W` map becomes `C_out×2H×2W`. `weight` is `C_in×C_out×3×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Deconv {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PADDING: usize = 1;

    pub fn init(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let n = in_channels * out_channels * 9;
        // fan-in of an output pixel is C_in·(k/stride)²; use C_in·k² like a conv.
        let data = he_normal(rng, n, in_channels * 9);
        Self {
            weight: Tensor::new(vec![in_channels, out_channels, 3, 3], data).expect("deconv shape"),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[in_channels, out_channels, 3, 3]),
            bias: vec![0.0; out_channels],
        }
    }

    fn channels(&self) -> (usize, usize) {
        (self.weight.dims()[0], self.weight.dims()[1])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = x.chw()?;
        let (cin, cout) = self.channels();
        if self.weight.dims() != [cin, cout, 3, 3] || self.bias.len() != cout {
            return Err(shape_err!("deconv weight must be C_in×C_out×3×3 with C_out biases"));
        }
        if c != cin {
            return Err(shape_err!("deconv expects {cin} channels, got {c}"));
        }
        Ok((h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check(x)?;
        let (cin, cout) = self.channels();
        let (oh, ow) = (2 * h, 2 * w);
        flops::record(|t| {
            t.macs += (cin * cout * 9 * h * w) as u64;
            t.bias_adds += (cout * oh * ow) as u64;
        });
        let src = x.data();
        let wt = self.weight.data();
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        exec::for_each_chunk(out.data_mut(), oh * ow, |o, plane| {
            plane.fill(self.bias[o]);
            for c in 0..cin {
                let xp = &src[c * h * w..(c + 1) * h * w];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wv = wt[((c * cout + o) * 3 + dy) * 3 + dx];
                        for i in 0..h {
                            let Some(y) = (2 * i + dy).checked_sub(1).filter(|&y| y < oh) else {
                                continue;
                            };
                            for j in 0..w {
                                if let Some(xo) = (2 * j + dx).checked_sub(1).filter(|&v| v < ow) {
                                    plane[y * ow + xo] += wv * xp[i * w + j];
                                }
                            }
                        }
                    }
                }
            }
        });
        Ok(out)
    }

    pub fn backward(&self, grad: &Tensor, x: &Tensor) -> Result<(Tensor, Deconv)> {
        let (h, w) = self.check(x)?;
        let (cin, cout) = self.channels();
        let (oh, ow) = (2 * h, 2 * w);
        if grad.dims() != [cout, oh, ow] {
            return Err(shape_err!("deconv grad must be {:?}, got {:?}", [cout, oh, ow], grad.dims()));
        }
        let g = grad.data();
        let src = x.data();
        let wt = self.weight.data();
        let bias = (0..cout)
            .map(|o| g[o * oh * ow..(o + 1) * oh * ow].iter().sum())
            .collect();
        // (tap index, source index) pairs are shared by both gradients
        let gather = |i: usize, j: usize, dy: usize, dx: usize| -> Option<usize> {
            let y = (2 * i + dy).checked_sub(1).filter(|&y| y < oh)?;
            let xo = (2 * j + dx).checked_sub(1).filter(|&v| v < ow)?;
            Some(y * ow + xo)
        };
        let mut grad_x = Tensor::zeros(&[cin, h, w]);
        exec::for_each_chunk(grad_x.data_mut(), h * w, |c, gx| {
            for o in 0..cout {
                let gp = &g[o * oh * ow..(o + 1) * oh * ow];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wv = wt[((c * cout + o) * 3 + dy) * 3 + dx];
                        for i in 0..h {
                            for j in 0..w {
                                if let Some(idx) = gather(i, j, dy, dx) {
                                    gx[i * w + j] += wv * gp[idx];
                                }
                            }
                        }
                    }
                }
            }
        });
        let mut grad_w = Tensor::zeros(self.weight.dims());
        exec::for_each_chunk(grad_w.data_mut(), cout * 9, |c, gw| {
            let xp = &src[c * h * w..(c + 1) * h * w];
            for o in 0..cout {
                let gp = &g[o * oh * ow..(o + 1) * oh * ow];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                if let Some(idx) = gather(i, j, dy, dx) {
                                    acc += xp[i * w + j] * gp[idx];
                                }
                            }
                        }
                        gw[(o * 3 + dy) * 3 + dx] = acc;
                    }
                }
            }
        });
        Ok((grad_x, Deconv { weight: grad_w, bias }))
    }
}

/// Depth-to-space: channel `c·σ² + p` at `(i, j)` moves to sub-pixel `p` of
/// output channel `c`.
pub fn depth_to_space(x: &Tensor, sigma: usize) -> Result<Tensor> {
    let (cs, h, w) = x.chw()?;
    let s2 = sigma * sigma;
    if sigma == 0 || cs % s2 != 0 {
        return Err(shape_err!("{cs} channels are not divisible by sigma²={s2}"));
    }
    let c = cs / s2;
    let (oh, ow) = (h * sigma, w * sigma);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for py in 0..sigma {
            for px in 0..sigma {
                let src = ci * s2 + subpixel_index(py, px, sigma);
                for i in 0..h {
                    for j in 0..w {
                        out.set3(ci, i * sigma + py, j * sigma + px, x.at3(src, i, j));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth(x: &Tensor, sigma: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.chw()?;
    if sigma == 0 || oh % sigma != 0 || ow % sigma != 0 {
        return Err(shape_err!("{oh}×{ow} is not a multiple of sigma={sigma}"));
    }
    let (h, w, s2) = (oh / sigma, ow / sigma, sigma * sigma);
    let mut out = Tensor::zeros(&[c * s2, h, w]);
    for ci in 0..c {
        for py in 0..sigma {
            for px in 0..sigma {
                let dst = ci * s2 + subpixel_index(py, px, sigma);
                for i in 0..h {
                    for j in 0..w {
                        out.set3(dst, i, j, x.at3(ci, i * sigma + py, j * sigma + px));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 3×3 conv `C → σ²C` followed by depth-to-space.
pub fn pixel_shuffle_up(x: &Tensor, conv: &Conv2d, sigma: usize) -> Result<Tensor> {
    let (c, _, _) = x.chw()?;
    if conv.spec.out_channels != sigma * sigma * c {
        return Err(shape_err!(
            "pixel shuffle conv must emit sigma²·C = {} channels, has {}",
            sigma * sigma * c,
            conv.spec.out_channels
        ));
    }
    depth_to_space(&conv.forward(x)?, sigma)
}

/// Bilinear upsampling rescaled by a one-channel logistic attention map
/// predicted by a 3×3 conv on the upsampled features.
pub fn spatial_attention_up(x: &Tensor, conv: &Conv2d, sigma: usize) -> Result<Tensor> {
    Ok(attention_forward(x, conv, sigma)?.0)
}

fn attention_forward(x: &Tensor, conv: &Conv2d, sigma: usize) -> Result<(Tensor, Tensor, Tensor)> {
    if conv.spec.out_channels != 1 {
        return Err(shape_err!("attention conv must emit one channel"));
    }
    let up = interp::bilinear(x, sigma)?;
    let mut att = conv.forward(&up)?;
    att.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    flops::record(|t| t.muls += up.len() as u64);
    let out = up.mul_broadcast_channel(&att)?;
    Ok((out, up, att))
}

/// An upsampler together with its learnable parameters. Gradients are
/// returned as an `Upsampler` of the same variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Upsampler {
    Nearest { sigma: usize },
    Bilinear { sigma: usize },
    NearestConv { sigma: usize, conv: Conv2d },
    BilinearConv { sigma: usize, conv: Conv2d },
    Deconv(Deconv),
    PixelShuffle { sigma: usize, conv: Conv2d },
    SpatialAttention { sigma: usize, conv: Conv2d },
    Carafe { cfg: CarafeConfig, params: CarafeParams },
}

/// Forward intermediates needed by [`Upsampler::backward`].
#[derive(Debug, Clone)]
pub enum UpsamplerCache {
    Input(Tensor),
    Interp { input_hw: (usize, usize), up: Tensor },
    Attention { input_hw: (usize, usize), up: Tensor, att: Tensor },
    Carafe(CarafeCache),
}

impl Upsampler {
    pub fn init(kind: UpsamplerKind, channels: usize, sigma: usize, rng: &mut Rng) -> Result<Self> {
        if sigma == 0 {
            return Err(config_err!("sigma must be >= 1"));
        }
        let conv = |rng: &mut Rng, out: usize| -> Result<Conv2d> {
            Ok(Conv2d::init(ConvSpec::new(channels, out, 3)?, rng))
        };
        Ok(match kind {
            UpsamplerKind::Nearest => Self::Nearest { sigma },
            UpsamplerKind::Bilinear => Self::Bilinear { sigma },
            UpsamplerKind::NearestConv => Self::NearestConv { sigma, conv: conv(rng, channels)? },
            UpsamplerKind::BilinearConv => Self::BilinearConv { sigma, conv: conv(rng, channels)? },
            UpsamplerKind::Deconv => {
                if sigma != Deconv::STRIDE {
                    return Err(config_err!("deconv upsamples by exactly 2, got sigma={sigma}"));
                }
                Self::Deconv(Deconv::init(channels, channels, rng))
            }
            UpsamplerKind::PixelShuffle => Self::PixelShuffle {
                sigma,
                conv: conv(rng, sigma * sigma * channels)?,
            },
            UpsamplerKind::SpatialAttention => Self::SpatialAttention { sigma, conv: conv(rng, 1)? },
            UpsamplerKind::Carafe(settings) => {
                let cfg = settings.config(channels, sigma)?;
                Self::Carafe {
                    cfg,
                    params: CarafeParams::init(&cfg, rng)?,
                }
            }
        })
    }

    pub fn kind(&self) -> UpsamplerKind {
        match self {
            Self::Nearest { .. } => UpsamplerKind::Nearest,
            Self::Bilinear { .. } => UpsamplerKind::Bilinear,
            Self::NearestConv { .. } => UpsamplerKind::NearestConv,
            Self::BilinearConv { .. } => UpsamplerKind::BilinearConv,
            Self::Deconv(_) => UpsamplerKind::Deconv,
            Self::PixelShuffle { .. } => UpsamplerKind::PixelShuffle,
            Self::SpatialAttention { .. } => UpsamplerKind::SpatialAttention,
            Self::Carafe { cfg, .. } => UpsamplerKind::Carafe(CarafeSettings {
                k_up: cfg.k_up,
                k_encoder: cfg.k_encoder,
                c_mid: cfg.c_mid,
                normalizer: cfg.normalizer,
            }),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, UpsamplerCache)> {
        let (_, h, w) = x.chw()?;
        let input_hw = (h, w);
        Ok(match self {
            Self::Nearest { sigma } => (interp::nearest(x, *sigma)?, UpsamplerCache::Input(x.clone())),
            Self::Bilinear { sigma } => (interp::bilinear(x, *sigma)?, UpsamplerCache::Input(x.clone())),
            Self::NearestConv { sigma, conv } => {
                let up = interp::nearest(x, *sigma)?;
                (conv.forward(&up)?, UpsamplerCache::Interp { input_hw, up })
            }
            Self::BilinearConv { sigma, conv } => {
                let up = interp::bilinear(x, *sigma)?;
                (conv.forward(&up)?, UpsamplerCache::Interp { input_hw, up })
            }
            Self::Deconv(d) => (d.forward(x)?, UpsamplerCache::Input(x.clone())),
            Self::PixelShuffle { sigma, conv } => {
                (pixel_shuffle_up(x, conv, *sigma)?, UpsamplerCache::Input(x.clone()))
            }
            Self::SpatialAttention { sigma, conv } => {
                let (out, up, att) = attention_forward(x, conv, *sigma)?;
                (out, UpsamplerCache::Attention { input_hw, up, att })
            }
            Self::Carafe { cfg, params } => {
                let (y, cache) = carafe_forward(x, params, cfg)?;
                (y, UpsamplerCache::Carafe(cache))
            }
        })
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(&self, grad: &Tensor, cache: &UpsamplerCache) -> Result<(Tensor, Upsampler)> {
        use UpsamplerCache as C;
        let mismatch = || Error::Shape("cache does not belong to this upsampler".into());
        Ok(match (self, cache) {
            (Self::Nearest { sigma }, C::Input(_)) => {
                (interp::nearest_backward(grad, *sigma)?, self.clone())
            }
            (Self::Bilinear { sigma }, C::Input(_)) => {
                (interp::bilinear_backward(grad, *sigma)?, self.clone())
            }
            (Self::NearestConv { sigma, conv }, C::Interp { up, .. }) => {
                let (g_up, gc) = conv.backward(grad, up)?;
                (
                    interp::nearest_backward(&g_up, *sigma)?,
                    Self::NearestConv { sigma: *sigma, conv: gc },
                )
            }
            (Self::BilinearConv { sigma, conv }, C::Interp { input_hw, up }) => {
                let (g_up, gc) = conv.backward(grad, up)?;
                (
                    interp::bilinear_resize_backward(&g_up, input_hw.0, input_hw.1)?,
                    Self::BilinearConv { sigma: *sigma, conv: gc },
                )
            }
            (Self::Deconv(d), C::Input(x)) => {
                let (gx, gd) = d.backward(grad, x)?;
                (gx, Self::Deconv(gd))
            }
            (Self::PixelShuffle { sigma, conv }, C::Input(x)) => {
                let g = space_to_depth(grad, *sigma)?;
                let (gx, gc) = conv.backward(&g, x)?;
                (gx, Self::PixelShuffle { sigma: *sigma, conv: gc })
            }
            (Self::SpatialAttention { sigma, conv }, C::Attention { input_hw, up, att }) => {
                // d/d up: direct path g·a plus the attention branch.
                let (c, oh, ow) = up.chw()?;
                let hw = oh * ow;
                let (g, u, a) = (grad.data(), up.data(), att.data());
                let mut g_s = Tensor::zeros(&[1, oh, ow]);
                for (k, gs) in g_s.data_mut().iter_mut().enumerate() {
                    let dot: f64 = (0..c).map(|ci| g[ci * hw + k] * u[ci * hw + k]).sum();
                    *gs = dot * a[k] * (1.0 - a[k]);
                }
                let (mut g_up, gc) = conv.backward(&g_s, up)?;
                g_up.add_assign(&grad.mul_broadcast_channel(att)?)?;
                (
                    interp::bilinear_resize_backward(&g_up, input_hw.0, input_hw.1)?,
                    Self::SpatialAttention { sigma: *sigma, conv: gc },
                )
            }
            (Self::Carafe { cfg, params }, C::Carafe(cache)) => {
                let (gx, gp) = carafe_backward(grad, cache, params, cfg)?;
                (gx, Self::Carafe { cfg: *cfg, params: gp })
            }
            _ => return Err(mismatch()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            Self::Nearest { .. } | Self::Bilinear { .. } => Vec::new(),
            Self::NearestConv { conv, .. }
            | Self::BilinearConv { conv, .. }
            | Self::PixelShuffle { conv, .. }
            | Self::SpatialAttention { conv, .. } => conv.slices(),
            Self::Deconv(d) => vec![d.weight.data(), &d.bias],
            Self::Carafe { params, .. } => params.slices(),
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Nearest { .. } | Self::Bilinear { .. } => Vec::new(),
            Self::NearestConv { conv, .. }
            | Self::BilinearConv { conv, .. }
            | Self::PixelShuffle { conv, .. }
            | Self::SpatialAttention { conv, .. } => conv.slices_mut(),
            Self::Deconv(d) => vec![d.weight.data_mut(), &mut d.bias],
            Self::Carafe { params, .. } => params.slices_mut(),
        }
    }
}
