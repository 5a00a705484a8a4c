//! Desk-scale simulator for malicious data reconstruction on split vertical
//! federated learning: the honest protocol, the DAC-driven attack and its
//! synchronous variant, a plain-discriminator baseline, gradient-based
//! detections (SplitGuard-style, Gradient-Scrutinizer-style, norm profiling),
//! and the Nopeek / noise-obfuscation / Laplace-DP defenses, wired into a
//! reproducible experiment harness.

pub mod attack;
pub mod config;
pub mod data;
pub mod defend;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod seed;
pub mod tape;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
