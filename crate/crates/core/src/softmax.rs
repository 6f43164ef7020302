//! Numerically stable softmax and the kernel-normalizer variants.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};

pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(shape_err!("softmax of an empty vector"));
    }
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax over a non-empty slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_backward(grad_out: &[f64], out: &[f64]) -> Result<Vec<f64>> {
    if grad_out.len() != out.len() {
        return Err(shape_err!(
            "softmax_backward length mismatch: {} vs {}",
            grad_out.len(),
            out.len()
        ));
    }
    let mut g = grad_out.to_vec();
    softmax_backward_in_place(&mut g, out);
    Ok(g)
}

pub(crate) fn softmax_backward_in_place(grad: &mut [f64], out: &[f64]) {
    let dot: f64 = grad.iter().zip(out).map(|(g, o)| g * o).sum();
    for (g, o) in grad.iter_mut().zip(out) {
        *g = o * (*g - dot);
    }
}

/// `ln σ(v)` without forming σ(v).
pub fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// How a raw `k_up²` kernel group is turned into reassembly weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizerMode {
    #[default]
    Softmax,
    /// Elementwise logistic; groups do not sum to one.
    Sigmoid,
    /// Logistic followed by division by the group sum.
    SigmoidNormalized,
}

impl NormalizerMode {
    pub fn sums_to_one(self) -> bool {
        !matches!(self, Self::Sigmoid)
    }

    pub(crate) fn apply_in_place(self, v: &mut [f64]) {
        match self {
            Self::Softmax => softmax_in_place(v),
            Self::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
            Self::SigmoidNormalized => {
                // softmax of log σ(x) equals σ(x)/Σσ and survives underflow
                v.iter_mut().for_each(|x| *x = log_sigmoid(*x));
                softmax_in_place(v);
            }
        }
    }

    /// Maps the gradient wrt a normalized group onto its raw group. `raw` and
    /// `out` are the group before and after normalization.
    pub(crate) fn backward_in_place(self, grad: &mut [f64], raw: &[f64], out: &[f64]) {
        match self {
            Self::Softmax => softmax_backward_in_place(grad, out),
            Self::Sigmoid => {
                for (g, o) in grad.iter_mut().zip(out) {
                    *g *= o * (1.0 - o);
                }
            }
            Self::SigmoidNormalized => {
                let dot: f64 = grad.iter().zip(out).map(|(g, o)| g * o).sum();
                for ((g, &r), &o) in grad.iter_mut().zip(raw).zip(out) {
                    *g = (*g - dot) * o * (1.0 - sigmoid(r));
                }
            }
        }
    }
}

impl fmt::Display for NormalizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
            Self::SigmoidNormalized => "sigmoid_normalized",
        })
    }
}

impl FromStr for NormalizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            "sigmoid_normalized" => Ok(Self::SigmoidNormalized),
            other => Err(config_err!("unknown normalizer '{other}'")),
        }
    }
}

/// Normalizes one raw kernel group with the chosen mode.
pub fn normalize_variant(raw_group: &[f64], mode: NormalizerMode) -> Result<Vec<f64>> {
    if raw_group.is_empty() {
        return Err(shape_err!("empty kernel group"));
    }
    let mut v = raw_group.to_vec();
    mode.apply_in_place(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_and_singleton() {
        assert!(close(&softmax(&[0.0; 3]).unwrap(), &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(softmax(&[-123.4]).unwrap(), vec![1.0]);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let out = softmax(&[1000.0, 1000.0 + 2f64.ln()]).unwrap();
        assert!(close(&out, &[1.0 / 3.0, 2.0 / 3.0], 1e-12), "{out:?}");
    }

    #[test]
    fn backward_edge_cases() {
        let out = softmax(&[0.3, -1.0, 2.0]).unwrap();
        let g = softmax_backward(&[4.0; 3], &out).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let g = softmax_backward(&[1.5, -2.0, 7.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(softmax_backward(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn variants() {
        assert_eq!(normalize_variant(&[0.0; 4], NormalizerMode::Sigmoid).unwrap(), vec![0.5; 4]);
        assert!(close(
            &normalize_variant(&[0.0; 9], NormalizerMode::SigmoidNormalized).unwrap(),
            &[1.0 / 9.0; 9],
            1e-15
        ));
        // sigmoid(ln 3) = 3/4, sigmoid(0) = 1/2, normalized by 5/4.
        let v = normalize_variant(&[3f64.ln(), 0.0], NormalizerMode::SigmoidNormalized).unwrap();
        assert!(close(&v, &[0.6, 0.4], 1e-15), "{v:?}");
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in [NormalizerMode::Softmax, NormalizerMode::Sigmoid, NormalizerMode::SigmoidNormalized] {
            assert_eq!(m.to_string().parse::<NormalizerMode>().unwrap(), m);
        }
    }
}
