use std::fmt::Write as _;

use crate::conv::{Conv2d, ConvSpec};
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::softmax::NormalizerMode;
use crate::tensor::Tensor;

/// Operator hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarafeConfig {
    /// Integer upsampling ratio.
    pub sigma: usize,
    /// Reassembly window size.
    pub k_up: usize,
    /// Content-encoder kernel size.
    pub k_encoder: usize,
    /// Compressed channel count, or `None` when the compressor is removed and
    /// the encoder reads the input features directly.
    pub c_mid: Option<usize>,
    pub in_channels: usize,
    pub normalizer: NormalizerMode,
}

impl CarafeConfig {
    pub const DEFAULT_SIGMA: usize = 2;
    pub const DEFAULT_K_UP: usize = 5;
    pub const DEFAULT_K_ENCODER: usize = 3;
    pub const DEFAULT_C_MID: usize = 64;

    /// σ = 2, k_up = 5, k_encoder = 3, C_m = 64.
    pub fn defaults(in_channels: usize) -> Self {
        Self {
            sigma: Self::DEFAULT_SIGMA,
            k_up: Self::DEFAULT_K_UP,
            k_encoder: Self::DEFAULT_K_ENCODER,
            c_mid: Some(Self::DEFAULT_C_MID),
            in_channels,
            normalizer: NormalizerMode::Softmax,
        }
    }

    pub fn new(
        in_channels: usize,
        sigma: usize,
        k_up: usize,
        k_encoder: usize,
        c_mid: Option<usize>,
    ) -> Result<Self> {
        let cfg = Self {
            sigma,
            k_up,
            k_encoder,
            c_mid,
            in_channels,
            normalizer: NormalizerMode::Softmax,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder size from the `k_encoder = k_up - 2` rule (floored at 1).
    pub fn encoder_for(k_up: usize) -> usize {
        k_up.saturating_sub(2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 1 {
            return Err(config_err!("sigma must be >= 1"));
        }
        for (name, k) in [("k_up", self.k_up), ("k_encoder", self.k_encoder)] {
            if k == 0 || k % 2 == 0 {
                return Err(config_err!("{name} must be odd and >= 1, got {k}"));
            }
        }
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be >= 1"));
        }
        if let Some(m) = self.c_mid {
            if m == 0 || m > self.in_channels {
                return Err(config_err!(
                    "c_mid must be in 1..={}, got {m}",
                    self.in_channels
                ));
            }
        }
        Ok(())
    }

    /// Kernel channels per source location: σ²·k_up².
    pub fn c_up(&self) -> usize {
        self.sigma * self.sigma * self.k_up * self.k_up
    }

    pub fn encoder_in(&self) -> usize {
        self.c_mid.unwrap_or(self.in_channels)
    }

    pub fn compressor_spec(&self) -> Option<ConvSpec> {
        self.c_mid.map(|m| ConvSpec {
            in_channels: self.in_channels,
            out_channels: m,
            kernel_size: 1,
        })
    }

    pub fn encoder_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.encoder_in(),
            out_channels: self.c_up(),
            kernel_size: self.k_encoder,
        }
    }

    pub fn param_count(&self) -> usize {
        self.compressor_spec().map_or(0, |s| s.param_count()) + self.encoder_spec().param_count()
    }

    /// Plain `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let c_mid = self.c_mid.map_or("none".to_string(), |m| m.to_string());
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "sigma={}", self.sigma);
        let _ = writeln!(s, "k_up={}", self.k_up);
        let _ = writeln!(s, "k_encoder={}", self.k_encoder);
        let _ = writeln!(s, "c_mid={c_mid}");
        let _ = writeln!(s, "normalizer={}", self.normalizer);
        s
    }

    /// Parses [`to_kv`](Self::to_kv) output. Blank lines and `#` comments are
    /// skipped; every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("expected key=value, got '{line}'"))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| config_err!("missing key '{k}'"))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| config_err!("'{k}' is not a non-negative integer"))
        };
        let c_mid = match get("c_mid")?.as_str() {
            "none" => None,
            v => Some(v.parse().map_err(|_| config_err!("bad c_mid '{v}'"))?),
        };
        let known = ["in_channels", "sigma", "k_up", "k_encoder", "c_mid", "normalizer"];
        if let Some(extra) = fields.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(config_err!("unknown key '{extra}'"));
        }
        let cfg = Self {
            in_channels: num("in_channels")?,
            sigma: num("sigma")?,
            k_up: num("k_up")?,
            k_encoder: num("k_encoder")?,
            c_mid,
            normalizer: get("normalizer")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learnable weights of the kernel prediction module.
#[derive(Debug, Clone, PartialEq)]
pub struct CarafeParams {
    /// 1×1 channel compressor `C → C_m`.
    pub compressor: Option<Conv2d>,
    /// `k_encoder × k_encoder` content encoder `C_m → σ²k_up²`.
    pub encoder: Conv2d,
}

impl CarafeParams {
    pub fn init(cfg: &CarafeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            compressor: cfg.compressor_spec().map(|s| Conv2d::init(s, rng)),
            encoder: Conv2d::init(cfg.encoder_spec(), rng),
        })
    }

    pub fn zeros(cfg: &CarafeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            compressor: cfg.compressor_spec().map(Conv2d::zeros),
            encoder: Conv2d::zeros(cfg.encoder_spec()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.compressor.as_ref().map_or(0, Conv2d::param_count) + self.encoder.param_count()
    }

    pub fn check(&self, cfg: &CarafeConfig) -> Result<()> {
        if self.compressor.as_ref().map(|c| c.spec) != cfg.compressor_spec()
            || self.encoder.spec != cfg.encoder_spec()
        {
            return Err(shape_err!("CARAFE parameters do not match the configuration"));
        }
        Ok(())
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.compressor.as_ref().map_or_else(Vec::new, Conv2d::slices);
        v.extend(self.encoder.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self
            .compressor
            .as_mut()
            .map_or_else(Vec::new, Conv2d::slices_mut);
        v.extend(self.encoder.slices_mut());
        v
    }

    /// Scales every parameter; used to build gradients from sums.
    pub fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &CarafeParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Named tensors for the parameter archive.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, conv: &Conv2d| {
            out.push((format!("{prefix}.weight"), conv.weight.clone()));
            out.push((
                format!("{prefix}.bias"),
                Tensor::new(vec![conv.bias.len()], conv.bias.clone()).expect("bias shape"),
            ));
        };
        if let Some(c) = &self.compressor {
            push("compressor", c);
        }
        push("encoder", &self.encoder);
        out
    }

    pub fn from_named_tensors(cfg: &CarafeConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("archive has no '{name}'")))
        };
        let load = |prefix: &str, spec: ConvSpec| -> Result<Conv2d> {
            let weight = find(&format!("{prefix}.weight"))?.clone();
            let bias = find(&format!("{prefix}.bias"))?.clone();
            if weight.dims() != spec.weight_dims() || bias.dims() != [spec.out_channels] {
                return Err(shape_err!("'{prefix}' shapes do not match the configuration"));
            }
            Ok(Conv2d {
                spec,
                weight,
                bias: bias.into_data(),
            })
        };
        cfg.validate()?;
        Ok(Self {
            compressor: cfg
                .compressor_spec()
                .map(|s| load("compressor", s))
                .transpose()?,
            encoder: load("encoder", cfg.encoder_spec())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(CarafeConfig::new(4, 2, 4, 3, Some(2)).is_err());
        assert!(CarafeConfig::new(4, 2, 5, 2, Some(2)).is_err());
        assert!(CarafeConfig::new(4, 0, 5, 3, Some(2)).is_err());
        assert!(CarafeConfig::new(4, 2, 5, 3, Some(5)).is_err());
        assert!(CarafeConfig::new(4, 2, 5, 3, Some(0)).is_err());
        assert!(CarafeConfig::new(4, 1, 1, 1, None).is_ok());
    }

    #[test]
    fn default_shapes() {
        let cfg = CarafeConfig::defaults(256);
        assert_eq!(cfg.c_up(), 100);
        assert_eq!(cfg.param_count(), 256 * 64 + 64 + 9 * 64 * 100 + 100);
        let p = CarafeParams::init(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(p.param_count(), cfg.param_count());
        assert_eq!(p.encoder.weight.dims(), &[100, 64, 3, 3]);
    }

    #[test]
    fn encoder_rule() {
        assert_eq!(CarafeConfig::encoder_for(5), 3);
        assert_eq!(CarafeConfig::encoder_for(7), 5);
        assert_eq!(CarafeConfig::encoder_for(1), 1);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = CarafeConfig::new(8, 3, 3, 1, None).unwrap();
        cfg.normalizer = NormalizerMode::SigmoidNormalized;
        assert_eq!(CarafeConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(CarafeConfig::from_kv("sigma=2").is_err());
        let extra = format!("{}bogus=1\n", cfg.to_kv());
        assert!(CarafeConfig::from_kv(&extra).is_err());
    }

    #[test]
    fn named_tensor_round_trip() {
        let cfg = CarafeConfig::new(6, 2, 3, 3, Some(3)).unwrap();
        let p = CarafeParams::init(&cfg, &mut Rng::new(4)).unwrap();
        let back = CarafeParams::from_named_tensors(&cfg, &p.named_tensors()).unwrap();
        assert_eq!(back, p);
        let other = CarafeConfig::new(6, 2, 5, 3, Some(3)).unwrap();
        assert!(CarafeParams::from_named_tensors(&other, &p.named_tensors()).is_err());
    }
}
