//! Fast built-in invariant suite: normalization, degenerate kernels, oracle
//! equivalence, instrumented cost counts, golden cost values and a short
//! gradient check. Output is deterministic.

use std::fmt::Write as _;

use crate::baselines::UpsamplerKind;
use crate::carafe::{carafe_forward, predict_kernels, reassemble, CarafeConfig, CarafeParams, KernelField};
use crate::conv::{Conv2d, ConvSpec};
use crate::cost::{carafe_cost, cost_table};
use crate::error::Result;
use crate::flops;
use crate::gradcheck::{self, GradcheckOptions};
use crate::interp;
use crate::reference;
use crate::rng::Rng;
use crate::softmax::NormalizerMode;
use crate::tensor::Tensor;

/// Cost table for `C_in = 256`, `σ = 2` and every kind, as emitted by
/// [`cost_table`].
pub const GOLDEN_COST_TABLE: &str = include_str!("../golden/cost_table.csv");

const SEEDS: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }
}

fn bound(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (limit {tol:.0e})"),
    }
}

fn random_case(seed: u64, sigma: usize, k_up: usize, k_enc: usize) -> Result<(Tensor, CarafeParams, CarafeConfig)> {
    let mut rng = Rng::new(seed);
    let cfg = CarafeConfig::new(3, sigma, k_up, k_enc, Some(2))?;
    let params = CarafeParams::init(&cfg, &mut rng)?;
    let x = Tensor::new(vec![3, 5, 6], rng.normal(90, 1.0))?;
    Ok((x, params, cfg))
}

const CASES: [(usize, usize, usize); 4] = [(1, 1, 1), (2, 3, 1), (2, 5, 3), (3, 3, 3)];

fn normalization() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        for (s, k, e) in CASES {
            let (x, params, mut cfg) = random_case(seed, s, k, e)?;
            for mode in [NormalizerMode::Softmax, NormalizerMode::SigmoidNormalized] {
                cfg.normalizer = mode;
                worst = worst.max(predict_kernels(&x, &params, &cfg)?.max_sum_error());
            }
        }
    }
    Ok(bound("kernel groups sum to one", worst, 1e-6))
}

fn unit_window_is_nearest() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        for sigma in [1, 2, 3] {
            let (x, params, cfg) = random_case(seed, sigma, 1, 1)?;
            let (y, _) = carafe_forward(&x, &params, &cfg)?;
            worst = worst.max(y.max_abs_diff(&interp::nearest(&x, sigma)?)?);
        }
    }
    Ok(bound("k_up=1 equals nearest", worst, 1e-12))
}

fn reassembly_oracle() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        for (s, k, e) in CASES {
            let (x, params, cfg) = random_case(seed, s, k, e)?;
            let field = predict_kernels(&x, &params, &cfg)?;
            let fast = reassemble(&x, &field, &cfg)?;
            worst = worst.max(fast.max_abs_diff(&reference::reassemble(&x, &field))?);
        }
    }
    Ok(bound("reassembly matches direct loop", worst, 1e-12))
}

fn conv_oracle() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = Rng::new(100 + seed);
        for k in [1, 3, 5] {
            let mut conv = Conv2d::init(ConvSpec::new(3, 4, k)?, &mut rng);
            conv.bias = rng.normal(4, 0.5);
            let x = Tensor::new(vec![3, 6, 5], rng.normal(90, 1.0))?;
            let fast = conv.forward(&x)?;
            worst = worst.max(fast.max_abs_diff(&reference::conv2d(&x, &conv.weight, &conv.bias))?);
        }
    }
    Ok(bound("conv2d matches direct loop", worst, 1e-12))
}

fn degenerate_kernels() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        for (s, k, e) in CASES {
            let (x, _, cfg) = random_case(seed, s, k, e)?;
            let (_, h, w) = x.chw()?;
            let delta = reassemble(&x, &KernelField::delta(s, k, h, w), &cfg)?;
            worst = worst.max(delta.max_abs_diff(&reference::nearest(&x, s))?);
            let uniform = reassemble(&x, &KernelField::uniform(s, k, h, w), &cfg)?;
            worst = worst.max(uniform.max_abs_diff(&reference::box_filtered_nearest(&x, s, k))?);
        }
    }
    Ok(bound("delta/uniform kernels match nearest/box filter", worst, 1e-12))
}

fn constant_preservation() -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let (_, params, cfg) = random_case(seed, 2, 5, 3)?;
        let x = Tensor::full(&[3, 7, 7], 0.7 + seed as f64);
        let (y, _) = carafe_forward(&x, &params, &cfg)?;
        let r = cfg.k_up / 2;
        for c in 0..3 {
            for oy in 2 * r..2 * (7 - r) {
                for ox in 2 * r..2 * (7 - r) {
                    worst = worst.max((y.at3(c, oy, ox) - x.at3(c, 0, 0)).abs());
                }
            }
        }
    }
    Ok(bound("interior constants preserved", worst, 1e-10))
}

fn instrumented_cost() -> Result<Check> {
    let cfg = CarafeConfig::new(8, 2, 5, 3, Some(4))?;
    let params = CarafeParams::init(&cfg, &mut Rng::new(7))?;
    let x = Tensor::new(vec![8, 6, 5], Rng::new(8).normal(240, 1.0))?;
    let (_, tally) = flops::measure(|| carafe_forward(&x, &params, &cfg));
    let expected = carafe_cost(&cfg)?.flops_per_source_pixel * 30;
    Ok(Check {
        name: "instrumented FLOPs match closed form",
        passed: tally.flops() == expected,
        detail: format!("counted {} expected {expected}", tally.flops()),
    })
}

fn golden_costs(golden: &str) -> Result<Check> {
    let table = cost_table(256, 2, &UpsamplerKind::all())?;
    let mismatches: Vec<String> = table
        .lines()
        .zip(golden.lines())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("got {a:?} want {b:?}"))
        .collect();
    let same_len = table.lines().count() == golden.lines().count();
    Ok(Check {
        name: "cost table matches golden values",
        passed: mismatches.is_empty() && same_len,
        detail: if mismatches.is_empty() && same_len {
            format!("{} rows", table.lines().count() - 1)
        } else if mismatches.is_empty() {
            "row count differs".to_string()
        } else {
            mismatches.join("; ")
        },
    })
}

fn quick_gradcheck() -> Result<Check> {
    let report = gradcheck::run_suite(&GradcheckOptions {
        seeds: 1,
        ..GradcheckOptions::default()
    })?;
    Ok(Check {
        name: "gradients match finite differences",
        passed: report.passed(),
        detail: format!("{} ops, worst {:.3e}", report.ops.len(), report.worst()),
    })
}

/// Runs every check. `golden` replaces the embedded cost table.
pub fn run(golden: Option<&str>) -> Result<SelftestReport> {
    let checks = vec![
        normalization()?,
        unit_window_is_nearest()?,
        reassembly_oracle()?,
        conv_oracle()?,
        degenerate_kernels()?,
        constant_preservation()?,
        instrumented_cost()?,
        golden_costs(golden.unwrap_or(GOLDEN_COST_TABLE))?,
        quick_gradcheck()?,
    ];
    Ok(SelftestReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_golden_passes() {
        let report = run(None).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.render(), run(None).unwrap().render());
    }

    #[test]
    fn corrupted_golden_fails() {
        let bad = GOLDEN_COST_TABLE.replace("199k", "200k");
        let report = run(Some(&bad)).unwrap();
        assert!(!report.passed());
        assert!(report.render().contains("FAIL cost table"));
        let short: String = GOLDEN_COST_TABLE.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(!run(Some(&short)).unwrap().passed());
    }
}
