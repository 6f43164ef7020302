//! Central finite-difference checks for every analytic backward pass.
//!
//! Each check draws a random instance, forms the scalar loss `⟨g, f(θ)⟩` for a
//! random cotangent `g`, and compares the analytic gradient of every input and
//! parameter entry with `(L(θ+ε) − L(θ−ε)) / 2ε`.

use std::fmt::Write as _;

use crate::baselines::{Upsampler, UpsamplerKind};
use crate::carafe::{carafe_backward, carafe_forward, CarafeConfig, CarafeParams};
use crate::conv::{Conv2d, ConvSpec};
use crate::error::Result;
use crate::exec;
use crate::rng::Rng;
use crate::softmax::{softmax, softmax_backward, NormalizerMode};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `(σ, k_up, k_encoder)` triples checked by default.
pub const DEFAULT_CONFIGS: [(usize, usize, usize); 4] = [(1, 1, 1), (2, 3, 1), (2, 5, 3), (3, 3, 3)];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: usize,
    pub configs: Vec<(usize, usize, usize)>,
    pub tolerance: f64,
    pub epsilon: f64,
    /// First seed; seeds are `base_seed..base_seed + seeds`.
    pub base_seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: 3,
            configs: DEFAULT_CONFIGS.to_vec(),
            tolerance: DEFAULT_TOLERANCE,
            epsilon: DEFAULT_EPSILON,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub seed: u64,
    pub slot: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub worst: f64,
    pub checked: usize,
    pub offenders: Vec<Offender>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn worst(&self) -> f64 {
        self.ops.iter().map(|o| o.worst).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        const SHOWN: usize = 10;
        let mut s = String::new();
        for op in &self.ops {
            let status = if op.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{status} {:<40} worst_rel_err={:.3e} entries={}",
                op.op, op.worst, op.checked
            );
            for o in op.offenders.iter().take(SHOWN) {
                let _ = writeln!(
                    s,
                    "    seed={} {}[{}] analytic={:.9e} numeric={:.9e}",
                    o.seed, o.slot, o.index, o.analytic, o.numeric
                );
            }
            if op.offenders.len() > SHOWN {
                let _ = writeln!(s, "    ... {} more", op.offenders.len() - SHOWN);
            }
        }
        let _ = writeln!(
            s,
            "{} ops, worst relative error {:.3e}, tolerance {:.1e}: {}",
            self.ops.len(),
            self.worst(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Outcome of one seeded instance.
struct Probe {
    worst: f64,
    checked: usize,
    offenders: Vec<Offender>,
}

/// Compares `analytic[s][e]` with central differences of `loss` wrt entry `e`
/// of slot `s` of `state`.
fn probe<S>(
    seed: u64,
    state: &mut S,
    names: &[&str],
    analytic: &[Vec<f64>],
    slots: impl Fn(&mut S) -> Vec<&mut [f64]>,
    loss: impl Fn(&S) -> f64,
    eps: f64,
    tol: f64,
) -> Probe {
    let mut out = Probe {
        worst: 0.0,
        checked: 0,
        offenders: Vec::new(),
    };
    for (s, grad) in analytic.iter().enumerate() {
        for (e, &a) in grad.iter().enumerate() {
            let orig = slots(state)[s][e];
            slots(state)[s][e] = orig + eps;
            let lp = loss(state);
            slots(state)[s][e] = orig - eps;
            let lm = loss(state);
            slots(state)[s][e] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let err = relative_error(a, numeric);
            out.worst = out.worst.max(err);
            out.checked += 1;
            if !(err <= tol) {
                out.offenders.push(Offender {
                    seed,
                    slot: names[s].to_string(),
                    index: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    out
}

fn merge(op: String, probes: Vec<Probe>) -> OpReport {
    let mut r = OpReport {
        op,
        worst: 0.0,
        checked: 0,
        offenders: Vec::new(),
    };
    for p in probes {
        r.worst = r.worst.max(p.worst);
        r.checked += p.checked;
        r.offenders.extend(p.offenders);
    }
    r
}

fn random(rng: &mut Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), rng.normal(n, 1.0)).expect("random tensor")
}

/// Perturbs biases away from zero so bias gradients are exercised off-init.
fn jitter(rng: &mut Rng, slices: Vec<&mut [f64]>) {
    for s in slices {
        for v in s.iter_mut() {
            *v += rng.normal(1, 0.1)[0];
        }
    }
}

fn seeds(opts: &GradcheckOptions) -> impl Iterator<Item = u64> + '_ {
    (0..opts.seeds as u64).map(move |i| opts.base_seed + i)
}

fn run_seeds(opts: &GradcheckOptions, f: impl Fn(u64) -> Result<Probe> + Send + Sync) -> Result<Vec<Probe>> {
    let list: Vec<u64> = seeds(opts).collect();
    exec::map_range(list.len(), |i| f(list[i])).into_iter().collect()
}

pub fn check_conv2d(opts: &GradcheckOptions) -> Result<OpReport> {
    let probes = run_seeds(opts, |seed| {
        let mut rng = Rng::new(seed);
        let mut conv = Conv2d::init(ConvSpec::new(2, 3, 3)?, &mut rng);
        jitter(&mut rng, vec![&mut conv.bias]);
        let x = random(&mut rng, &[2, 4, 4]);
        let g = random(&mut rng, &[3, 4, 4]);
        let (gx, gc) = conv.backward(&g, &x)?;
        let analytic = vec![gx.into_data(), gc.weight.into_data(), gc.bias];
        let mut state = (x, conv);
        Ok(probe(
            seed,
            &mut state,
            &["input", "weight", "bias"],
            &analytic,
            |(x, c)| {
                let mut v = vec![x.data_mut()];
                v.extend(c.slices_mut());
                v
            },
            |(x, c)| c.forward(x).unwrap().dot(&g).unwrap(),
            opts.epsilon,
            opts.tolerance,
        ))
    })?;
    Ok(merge("conv2d".into(), probes))
}

pub fn check_softmax(opts: &GradcheckOptions) -> Result<OpReport> {
    let probes = run_seeds(opts, |seed| {
        let mut rng = Rng::new(seed);
        let v = rng.normal(7, 2.0);
        let g = rng.normal(7, 1.0);
        let out = softmax(&v)?;
        let analytic = vec![softmax_backward(&g, &out)?];
        let mut state = v;
        Ok(probe(
            seed,
            &mut state,
            &["values"],
            &analytic,
            |v| vec![v.as_mut_slice()],
            |v| softmax(v).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum(),
            opts.epsilon,
            opts.tolerance,
        ))
    })?;
    Ok(merge("softmax".into(), probes))
}

/// CARAFE end to end on a `C=2, 3×3` input.
pub fn check_carafe(opts: &GradcheckOptions, cfg: CarafeConfig) -> Result<OpReport> {
    let probes = run_seeds(opts, |seed| {
        let mut rng = Rng::new(seed);
        let mut params = CarafeParams::init(&cfg, &mut rng)?;
        let biases: Vec<&mut [f64]> = params
            .slices_mut()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, s)| s)
            .collect();
        jitter(&mut rng, biases);
        let (h, w) = (3, 3);
        let x = random(&mut rng, &[cfg.in_channels, h, w]);
        let g = random(&mut rng, &[cfg.in_channels, cfg.sigma * h, cfg.sigma * w]);
        let (_, cache) = carafe_forward(&x, &params, &cfg)?;
        let (gx, gp) = carafe_backward(&g, &cache, &params, &cfg)?;
        let mut analytic = vec![gx.into_data()];
        analytic.extend(gp.slices().into_iter().map(<[f64]>::to_vec));
        let names: &[&str] = if cfg.c_mid.is_some() {
            &["input", "compressor.weight", "compressor.bias", "encoder.weight", "encoder.bias"]
        } else {
            &["input", "encoder.weight", "encoder.bias"]
        };
        let mut state = (x, params);
        Ok(probe(
            seed,
            &mut state,
            names,
            &analytic,
            |(x, p)| {
                let mut v = vec![x.data_mut()];
                v.extend(p.slices_mut());
                v
            },
            |(x, p)| carafe_forward(x, p, &cfg).unwrap().0.dot(&g).unwrap(),
            opts.epsilon,
            opts.tolerance,
        ))
    })?;
    let c_mid = cfg.c_mid.map_or("none".into(), |m| m.to_string());
    Ok(merge(
        format!(
            "carafe(sigma={},k_up={},k_enc={},c_mid={},{})",
            cfg.sigma, cfg.k_up, cfg.k_encoder, c_mid, cfg.normalizer
        ),
        probes,
    ))
}

/// Any [`Upsampler`] on a `C=2, 3×3` input with σ=2.
pub fn check_upsampler(opts: &GradcheckOptions, kind: UpsamplerKind) -> Result<OpReport> {
    let probes = run_seeds(opts, |seed| {
        let mut rng = Rng::new(seed);
        let mut up = Upsampler::init(kind, 2, 2, &mut rng)?;
        jitter(&mut rng, up.slices_mut());
        let x = random(&mut rng, &[2, 3, 3]);
        let g = random(&mut rng, &[2, 6, 6]);
        let (_, cache) = up.forward(&x)?;
        let (gx, gu) = up.backward(&g, &cache)?;
        let mut analytic = vec![gx.into_data()];
        analytic.extend(gu.slices().into_iter().map(<[f64]>::to_vec));
        let names = ["input", "weight", "bias"];
        let mut state = (x, up);
        Ok(probe(
            seed,
            &mut state,
            &names,
            &analytic,
            |(x, u)| {
                let mut v = vec![x.data_mut()];
                v.extend(u.slices_mut());
                v
            },
            |(x, u)| u.forward(x).unwrap().0.dot(&g).unwrap(),
            opts.epsilon,
            opts.tolerance,
        ))
    })?;
    Ok(merge(kind.name().to_string(), probes))
}

/// The full suite: conv2d, softmax, CARAFE over `opts.configs` (plus the
/// compressor-free and sigmoid-normalized variants), and every baseline.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut ops = vec![check_conv2d(opts)?, check_softmax(opts)?];
    for &(sigma, k_up, k_enc) in &opts.configs {
        ops.push(check_carafe(opts, CarafeConfig::new(2, sigma, k_up, k_enc, Some(2))?)?);
    }
    ops.push(check_carafe(opts, CarafeConfig::new(2, 2, 3, 3, None)?)?);
    let mut sig = CarafeConfig::new(2, 2, 3, 1, Some(2))?;
    sig.normalizer = NormalizerMode::SigmoidNormalized;
    ops.push(check_carafe(opts, sig)?);
    for kind in [
        UpsamplerKind::Nearest,
        UpsamplerKind::Bilinear,
        UpsamplerKind::NearestConv,
        UpsamplerKind::BilinearConv,
        UpsamplerKind::Deconv,
        UpsamplerKind::PixelShuffle,
        UpsamplerKind::SpatialAttention,
    ] {
        ops.push(check_upsampler(opts, kind)?);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let opts = GradcheckOptions {
            seeds: 3,
            ..Default::default()
        };
        let report = run_suite(&opts).unwrap();
        println!("{}", report.render());
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn zero_tolerance_fails() {
        let opts = GradcheckOptions {
            seeds: 1,
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(!check_conv2d(&opts).unwrap().passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-5).abs() < 1e-15);
    }
}
