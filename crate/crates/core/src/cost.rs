//! Closed-form FLOPs and parameter counts per source pixel.
//!
//! A multiply-add counts as two FLOPs and every conv output element carries
//! one bias term, so a `k×k` conv `C_in → C_out` costs `2(C_in·k² + 1)·C_out`
//! per output pixel. Bilinear interpolation costs two FLOPs per tap with four
//! taps per output element; nearest neighbour is free.

use std::fmt::Write as _;

use crate::baselines::UpsamplerKind;
use crate::carafe::CarafeConfig;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub kind: UpsamplerKind,
    pub in_channels: usize,
    pub sigma: usize,
    pub flops_per_source_pixel: u64,
    pub params: u64,
}

fn conv_flops(c_in: u64, k: u64, c_out: u64) -> u64 {
    2 * (c_in * k * k + 1) * c_out
}

fn conv_params(c_in: u64, k: u64, c_out: u64) -> u64 {
    k * k * c_in * c_out + c_out
}

pub fn carafe_cost(cfg: &CarafeConfig) -> Result<CostReport> {
    cfg.validate()?;
    let c_in = cfg.in_channels as u64;
    let c_up = cfg.c_up() as u64;
    let k_enc = cfg.k_encoder as u64;
    let (compress_flops, compress_params, enc_in) = match cfg.c_mid {
        Some(m) => {
            let m = m as u64;
            (conv_flops(c_in, 1, m), conv_params(c_in, 1, m), m)
        }
        None => (0, 0, c_in),
    };
    let flops = compress_flops + conv_flops(enc_in, k_enc, c_up) + 2 * c_up * c_in;
    let params = compress_params + conv_params(enc_in, k_enc, c_up);
    Ok(CostReport {
        kind: UpsamplerKind::Carafe(crate::baselines::CarafeSettings {
            k_up: cfg.k_up,
            k_encoder: cfg.k_encoder,
            c_mid: cfg.c_mid,
            normalizer: cfg.normalizer,
        }),
        in_channels: cfg.in_channels,
        sigma: cfg.sigma,
        flops_per_source_pixel: flops,
        params,
    })
}

pub fn baseline_cost(kind: UpsamplerKind, in_channels: usize, sigma: usize) -> Result<CostReport> {
    if sigma == 0 || in_channels == 0 {
        return Err(config_err!("sigma and channel count must be >= 1"));
    }
    let c = in_channels as u64;
    let s2 = (sigma * sigma) as u64;
    let bilinear = 2 * 4 * c * s2;
    let (flops, params) = match kind {
        UpsamplerKind::Nearest => (0, 0),
        UpsamplerKind::Bilinear => (bilinear, 0),
        UpsamplerKind::NearestConv => (s2 * conv_flops(c, 3, c), conv_params(c, 3, c)),
        UpsamplerKind::BilinearConv => (bilinear + s2 * conv_flops(c, 3, c), conv_params(c, 3, c)),
        UpsamplerKind::Deconv => {
            if sigma != 2 {
                return Err(config_err!("deconv is defined for sigma=2 only"));
            }
            (conv_flops(c, 3, c), conv_params(c, 3, c))
        }
        UpsamplerKind::PixelShuffle => (conv_flops(c, 3, s2 * c), conv_params(c, 3, s2 * c)),
        UpsamplerKind::SpatialAttention => (bilinear + s2 * conv_flops(c, 3, 1) + s2 * c, conv_params(c, 3, 1)),
        UpsamplerKind::Carafe(settings) => return carafe_cost(&settings.config(in_channels, sigma)?),
    };
    Ok(CostReport {
        kind,
        in_channels,
        sigma,
        flops_per_source_pixel: flops,
        params,
    })
}

/// Compact display of a count with `k`/`M` suffix.
///
/// The mantissa is printed with no decimals when that is within 5% of the
/// exact value, otherwise with one decimal (`8192 → 8k`, `2305 → 2.3k`,
/// `199496 → 199k`, `1180160 → 1.2M`). Values under 1000 print exactly.
pub fn round_count(v: u64) -> String {
    const TOLERANCE: f64 = 0.05;
    let (mantissa, suffix) = match v {
        0..=999 => return v.to_string(),
        1_000..=999_999 => (v as f64 / 1e3, "k"),
        _ => (v as f64 / 1e6, "M"),
    };
    let whole = mantissa.round();
    if (whole - mantissa).abs() / mantissa <= TOLERANCE {
        format!("{whole:.0}{suffix}")
    } else {
        format!("{mantissa:.1}{suffix}")
    }
}

pub const CSV_HEADER: &str = "kind,flops_exact,flops_rounded,params_exact,params_rounded";

pub fn cost_table(in_channels: usize, sigma: usize, kinds: &[UpsamplerKind]) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for &kind in kinds {
        let r = baseline_cost(kind, in_channels, sigma)?;
        writeln!(
            out,
            "{},{},{},{},{}",
            kind.label(),
            r.flops_per_source_pixel,
            round_count(r.flops_per_source_pixel),
            r.params,
            round_count(r.params)
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_carafe() {
        let cfg = CarafeConfig::new(1, 1, 1, 1, Some(1)).unwrap();
        let r = carafe_cost(&cfg).unwrap();
        assert_eq!(r.flops_per_source_pixel, 10);
        assert_eq!(r.params, 4);
    }

    #[test]
    fn compressor_removed() {
        let cfg = CarafeConfig::new(256, 2, 5, 3, None).unwrap();
        let r = carafe_cost(&cfg).unwrap();
        assert_eq!(r.flops_per_source_pixel, 2 * (256 * 9 + 1) * 100 + 2 * 100 * 256);
        assert_eq!(r.params, 9 * 256 * 100 + 100);
    }

    #[test]
    fn rounding() {
        let cases = [
            (0, "0"),
            (999, "999"),
            (8_192, "8k"),
            (2_305, "2.3k"),
            (27_656, "28k"),
            (74_148, "74k"),
            (199_496, "199k"),
            (590_080, "590k"),
            (1_180_160, "1.2M"),
            (2_360_320, "2.4M"),
            (4_720_640, "4.7M"),
            (4_728_832, "4.7M"),
        ];
        for (v, s) in cases {
            assert_eq!(round_count(v), s, "{v}");
        }
    }

    #[test]
    fn empty_and_nearest_tables() {
        assert_eq!(cost_table(256, 2, &[]).unwrap(), format!("{CSV_HEADER}\n"));
        let t = cost_table(256, 2, &[UpsamplerKind::Nearest]).unwrap();
        assert_eq!(t.lines().nth(1), Some("Nearest,0,0,0,0"));
    }
}
