//! Spatial field reconstruction from crowdsourced sensors whose readings may
//! be distorted by an unknown per-sensor gain and offset.
//!
//! The field is a Gaussian process with a Matérn-3/2 kernel. Each sensor `n`
//! reports `aₙ·f(xₙ) + bₙ + noise`, where `(aₙ, bₙ)` is either the identity or
//! drawn from a prior mixture. The crate provides:
//!
//! * [`gp`]: kernel algebra and hyperparameter fitting;
//! * [`distortion`]: the distortion prior with its collapsed likelihood;
//! * [`sblue`]: the best linear unbiased estimator over the prior;
//! * [`empirical_bayes`]: MAP distortion search (CEM and ICM) plus plug-in prediction;
//! * [`distributed`]: geographic clustering and fusion of per-cluster estimates;
//! * [`harness`]: synthetic worlds, metrics, experiments and CSV I/O.

pub mod distortion;
pub mod distributed;
pub mod empirical_bayes;
pub mod error;
pub mod gp;
pub mod harness;
mod par;
pub mod rng;
pub mod sblue;

pub use distortion::{Distortion, DistortionParams, MixturePrior, PosteriorContext, SensorSummary};
pub use error::{Error, Result};
pub use gp::{GpModel, KernelSpec, Location};

/// `true` when the crate was built with the rayon backend.
pub fn is_parallel() -> bool {
    par::is_parallel()
}
