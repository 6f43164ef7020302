use crate::carafe::config::{CarafeConfig, CarafeParams};
use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::layout::kernel_channel;
use crate::softmax::NormalizerMode;
use crate::tensor::Tensor;

/// Predicted reassembly kernels for every source location.
///
/// `normalized` is `σ²k_up² × H × W`; channel `p·k_up² + q` holds window entry
/// `q` (row-major) of the kernel used by sub-pixel `p` (see [`crate::layout`]).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    pub sigma: usize,
    pub k_up: usize,
    pub mode: NormalizerMode,
    /// Encoder output before normalization; `None` for hand-built fields.
    pub raw: Option<Tensor>,
    pub normalized: Tensor,
}

/// Tolerance on group sums accepted by the reassembly contract check.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

impl KernelField {
    /// Normalizes a raw `σ²k_up² × H × W` encoder output group by group.
    pub fn from_raw(raw: Tensor, sigma: usize, k_up: usize, mode: NormalizerMode) -> Result<Self> {
        let (c, h, w) = raw.chw()?;
        let kk = k_up * k_up;
        if c != sigma * sigma * kk {
            return Err(shape_err!(
                "kernel field needs {} channels for sigma={sigma}, k_up={k_up}, got {c}",
                sigma * sigma * kk
            ));
        }
        let hw = h * w;
        let src = raw.data();
        let mut normalized = Tensor::zeros(&[c, h, w]);
        // one chunk per sub-pixel: k_up² planes
        exec::for_each_chunk(normalized.data_mut(), kk * hw, |p, block| {
            let src_block = &src[p * kk * hw..(p + 1) * kk * hw];
            let mut group = vec![0.0; kk];
            for loc in 0..hw {
                for (q, g) in group.iter_mut().enumerate() {
                    *g = src_block[q * hw + loc];
                }
                mode.apply_in_place(&mut group);
                for (q, g) in group.iter().enumerate() {
                    block[q * hw + loc] = *g;
                }
            }
        });
        Ok(Self {
            sigma,
            k_up,
            mode,
            raw: Some(raw),
            normalized,
        })
    }

    /// Wraps an already-normalized field (softmax-mode contract).
    pub fn from_normalized(normalized: Tensor, sigma: usize, k_up: usize) -> Result<Self> {
        let (c, _, _) = normalized.chw()?;
        if c != sigma * sigma * k_up * k_up {
            return Err(shape_err!("kernel field channel count {c} does not match sigma={sigma}, k_up={k_up}"));
        }
        Ok(Self {
            sigma,
            k_up,
            mode: NormalizerMode::Softmax,
            raw: None,
            normalized,
        })
    }

    /// Every kernel puts weight 1 on the window center.
    pub fn delta(sigma: usize, k_up: usize, h: usize, w: usize) -> Self {
        let r = k_up / 2;
        let mut t = Tensor::zeros(&[sigma * sigma * k_up * k_up, h, w]);
        for p in 0..sigma * sigma {
            let ch = kernel_channel(p, r, r, k_up);
            t.data_mut()[ch * h * w..(ch + 1) * h * w].fill(1.0);
        }
        Self::from_normalized(t, sigma, k_up).expect("delta shape")
    }

    /// Every kernel is the box filter `1/k_up²`.
    pub fn uniform(sigma: usize, k_up: usize, h: usize, w: usize) -> Self {
        let kk = k_up * k_up;
        let t = Tensor::full(&[sigma * sigma * kk, h, w], 1.0 / kk as f64);
        Self::from_normalized(t, sigma, k_up).expect("uniform shape")
    }

    pub fn height(&self) -> usize {
        self.normalized.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.normalized.dims()[2]
    }

    /// Normalized weight of window entry `(n_row, n_col)` at source `(i, j)`
    /// for sub-pixel `p`.
    pub fn weight(&self, p: usize, n_row: usize, n_col: usize, i: usize, j: usize) -> f64 {
        self.normalized
            .at3(kernel_channel(p, n_row, n_col, self.k_up), i, j)
    }

    /// The `k_up²` weights of one kernel, row-major.
    pub fn group(&self, p: usize, i: usize, j: usize) -> Vec<f64> {
        let kk = self.k_up * self.k_up;
        (0..kk)
            .map(|q| self.normalized.at3(p * kk + q, i, j))
            .collect()
    }

    /// Largest `|Σ_q w - 1|` over all kernels.
    pub fn max_sum_error(&self) -> f64 {
        let kk = self.k_up * self.k_up;
        let hw = self.height() * self.width();
        let d = self.normalized.data();
        let mut worst: f64 = 0.0;
        for p in 0..self.sigma * self.sigma {
            for loc in 0..hw {
                let s: f64 = (0..kk).map(|q| d[(p * kk + q) * hw + loc]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    pub(crate) fn check(&self, sigma: usize, k_up: usize, h: usize, w: usize) -> Result<()> {
        if self.sigma != sigma || self.k_up != k_up {
            return Err(shape_err!(
                "kernel field is for sigma={}, k_up={}, config has sigma={sigma}, k_up={k_up}",
                self.sigma,
                self.k_up
            ));
        }
        if self.normalized.dims() != [sigma * sigma * k_up * k_up, h, w] {
            return Err(shape_err!(
                "kernel field {:?} does not cover a {h}×{w} source map",
                self.normalized.dims()
            ));
        }
        if self.mode.sums_to_one() {
            let err = self.max_sum_error();
            if err > NORMALIZATION_TOLERANCE {
                return Err(Error::Contract(format!(
                    "kernel groups must sum to 1, worst deviation {err:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Runs compressor → encoder. Returns the compressed features (if any) and the raw encoder output.
pub(crate) fn encode(x: &Tensor, params: &CarafeParams, cfg: &CarafeConfig) -> Result<(Option<Tensor>, Tensor)> {
    cfg.validate()?;
    params.check(cfg)?;
    let (c, _, _) = x.chw()?;
    if c != cfg.in_channels {
        return Err(shape_err!(
            "input has {c} channels, config expects {}",
            cfg.in_channels
        ));
    }
    let compressed = params
        .compressor
        .as_ref()
        .map(|comp| comp.forward(x))
        .transpose()?;
    let raw = params.encoder.forward(compressed.as_ref().unwrap_or(x))?;
    Ok((compressed, raw))
}

/// Kernel prediction: channel compressor, content encoder, kernel normalizer.
pub fn predict_kernels(x: &Tensor, params: &CarafeParams, cfg: &CarafeConfig) -> Result<KernelField> {
    let (_, raw) = encode(x, params, cfg)?;
    KernelField::from_raw(raw, cfg.sigma, cfg.k_up, cfg.normalizer)
}
