//! Recovery of latent valid instruments from environmentally confounded
//! candidate instruments, and 2SLS-family estimation of average causal effects.

pub mod autodiff;
pub mod error;
pub mod estimators;
pub mod losses;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
pub use numerics::Matrix;
