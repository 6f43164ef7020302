//! SGD with heavy-ball momentum.

use crate::error::{shape_err, Result};

/// `state <- momentum * state + grad; param <- param - lr * state`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64, momentum: f64, state: &mut [f64]) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.len() {
        return Err(shape_err!(
            "sgd_step lengths differ: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.len()
        ));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(state.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for a list of parameter slices.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one step. `params` and `grads` must list slices in the same
    /// order on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!(
                "{} parameter slices but {} gradient slices",
                params.len(),
                grads.len()
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_step(p, g, self.lr, self.momentum, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = vec![1.0, 2.0];
        let mut s = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, -1.0], 1.0, 0.0, &mut s).unwrap();
        assert_eq!(p, vec![0.5, 3.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![0.0];
        let mut s = vec![0.0];
        sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut s).unwrap();
        assert_eq!(s[0], 1.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        let before = p[0];
        sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut s).unwrap();
        assert!((s[0] - 1.9).abs() < 1e-15);
        assert!((p[0] - before + 0.19).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0; 2];
        let mut s = vec![0.0; 2];
        assert!(sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut s).is_err());
    }
}
