//! Sharpness-aware minimization at desk scale: SAM, exact per-instance SAM,
//! and delta-SAM (dynamically reweighted SAM), on a small f64 autodiff core,
//! with rank-1 quadratic oracles that verify the derivations behind the
//! reweighting scheme.

pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod param;
pub mod perturb;
pub mod reweight;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
