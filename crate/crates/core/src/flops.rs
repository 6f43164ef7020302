//! Debug counter that tallies arithmetic while kernels execute.
//!
//! Kernels report the size of their iteration space on the calling thread
//! before fanning out, so the tally is unaffected by the rayon pool. The
//! counting convention matches the closed-form cost model: a multiply-add is
//! two FLOPs, a bias add is charged as one multiply-add, zero-padded taps are
//! counted, and normalizers/activations are free.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    /// Multiply-adds in convolutions and reassembly windows.
    pub macs: u64,
    /// Bias additions (one per produced output element).
    pub bias_adds: u64,
    /// Interpolation taps (bilinear: four per output element).
    pub interp_taps: u64,
    /// Plain elementwise multiplies (attention rescaling).
    pub muls: u64,
}

impl Tally {
    pub fn flops(&self) -> u64 {
        2 * self.macs + 2 * self.bias_adds + 2 * self.interp_taps + self.muls
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Tally>> = const { RefCell::new(None) };
}

/// Runs `f` with counting enabled on this thread and returns its tally.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Tally) {
    let prev = ACTIVE.with(|a| a.replace(Some(Tally::default())));
    let out = f();
    let tally = ACTIVE.with(|a| a.replace(prev)).unwrap_or_default();
    (out, tally)
}

pub(crate) fn record(update: impl FnOnce(&mut Tally)) {
    ACTIVE.with(|a| {
        if let Some(t) = a.borrow_mut().as_mut() {
            update(t);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_by_default() {
        record(|t| t.macs += 5);
        let ((), t) = measure(|| record(|t| t.macs += 3));
        assert_eq!(t.macs, 3);
    }

    #[test]
    fn nested_measure_restores_outer() {
        let ((), outer) = measure(|| {
            record(|t| t.muls += 1);
            let ((), inner) = measure(|| record(|t| t.muls += 10));
            assert_eq!(inner.muls, 10);
            record(|t| t.muls += 1);
        });
        assert_eq!(outer.muls, 2);
    }
}
