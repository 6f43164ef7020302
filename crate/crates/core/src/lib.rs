//! Content-aware feature reassembly (CARAFE) on a small dense-tensor substrate.
//!
//! The crate bundles the operator with analytic gradients, the usual
//! comparison upsamplers, a closed-form FLOPs/parameter model, and a toy
//! dense-prediction benchmark that trains each upsampler end to end.

pub mod baselines;
pub mod carafe;
pub mod conv;
pub mod cost;
pub mod ctns;
pub mod error;
pub mod exec;
pub mod flops;
pub mod gradcheck;
pub mod interp;
pub mod layout;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod selftest;
pub mod softmax;
pub mod tensor;
pub mod toy;
pub mod viz;

pub use carafe::{CarafeConfig, CarafeParams, KernelField};
pub use error::{Error, Result};
pub use tensor::Tensor;
