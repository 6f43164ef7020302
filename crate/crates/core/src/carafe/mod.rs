//! Content-aware reassembly of features.
//!
//! The operator predicts a normalized `k_up × k_up` kernel for each of the σ²
//! target pixels of every source location (compressor → encoder → normalizer)
//! and forms each target pixel as the kernel-weighted sum of the source window.

mod config;
mod field;
mod reassemble;

pub use config::{CarafeConfig, CarafeParams};
pub use field::{predict_kernels, KernelField, NORMALIZATION_TOLERANCE};
pub use reassemble::{reassemble, reassemble_mask};

use crate::error::{config_err, shape_err, Result};
use crate::interp;
use crate::tensor::Tensor;

/// Intermediates retained by [`carafe_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct CarafeCache {
    pub input: Tensor,
    pub compressed: Option<Tensor>,
    pub kernels: KernelField,
}

pub fn carafe_forward(x: &Tensor, params: &CarafeParams, cfg: &CarafeConfig) -> Result<(Tensor, CarafeCache)> {
    let (compressed, raw) = field::encode(x, params, cfg)?;
    let kernels = KernelField::from_raw(raw, cfg.sigma, cfg.k_up, cfg.normalizer)?;
    let y = reassemble(x, &kernels, cfg)?;
    Ok((
        y,
        CarafeCache {
            input: x.clone(),
            compressed,
            kernels,
        },
    ))
}

/// Analytic gradients of [`carafe_forward`].
///
/// The input gradient has two contributions: the reassembly taps, and the
/// kernel-prediction branch (normalizer → encoder → compressor).
pub fn carafe_backward(
    grad_y: &Tensor,
    cache: &CarafeCache,
    params: &CarafeParams,
    cfg: &CarafeConfig,
) -> Result<(Tensor, CarafeParams)> {
    params.check(cfg)?;
    let kernels = &cache.kernels;
    let (mut grad_x, mut grad_k) = reassemble::reassemble_backward(grad_y, &cache.input, kernels)?;

    let raw = kernels
        .raw
        .as_ref()
        .ok_or_else(|| shape_err!("cache kernels carry no raw encoder output"))?;
    let kk = cfg.k_up * cfg.k_up;
    let hw = kernels.height() * kernels.width();
    let (raw_d, norm_d) = (raw.data(), kernels.normalized.data());
    let gk = grad_k.data_mut();
    let mut g = vec![0.0; kk];
    let mut rv = vec![0.0; kk];
    let mut ov = vec![0.0; kk];
    for p in 0..cfg.sigma * cfg.sigma {
        for loc in 0..hw {
            for q in 0..kk {
                let idx = (p * kk + q) * hw + loc;
                g[q] = gk[idx];
                rv[q] = raw_d[idx];
                ov[q] = norm_d[idx];
            }
            cfg.normalizer.backward_in_place(&mut g, &rv, &ov);
            for q in 0..kk {
                gk[(p * kk + q) * hw + loc] = g[q];
            }
        }
    }

    let encoder_in = cache.compressed.as_ref().unwrap_or(&cache.input);
    let (grad_enc_in, grad_encoder) = params.encoder.backward(&grad_k, encoder_in)?;
    let grad_compressor = match &params.compressor {
        Some(comp) => {
            let (gx, gc) = comp.backward(&grad_enc_in, &cache.input)?;
            grad_x.add_assign(&gx)?;
            Some(gc)
        }
        None => {
            grad_x.add_assign(&grad_enc_in)?;
            None
        }
    };
    Ok((
        grad_x,
        CarafeParams {
            compressor: grad_compressor,
            encoder: grad_encoder,
        },
    ))
}

/// Two-step upsampling to `target_hw`: bilinear resize to half the target,
/// then CARAFE ×2.
pub fn staged_upsample(
    x: &Tensor,
    target_hw: (usize, usize),
    params: &CarafeParams,
    cfg: &CarafeConfig,
) -> Result<Tensor> {
    let (ht, wt) = target_hw;
    if ht == 0 || wt == 0 || ht % 2 != 0 || wt % 2 != 0 {
        return Err(config_err!("target extents must be even and positive, got {ht}×{wt}"));
    }
    if cfg.sigma != 2 {
        return Err(config_err!("staged upsampling uses sigma=2, config has {}", cfg.sigma));
    }
    let half = interp::bilinear_resize(x, ht / 2, wt / 2)?;
    Ok(carafe_forward(&half, params, cfg)?.0)
}
