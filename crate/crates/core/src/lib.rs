//! Implicit adversarial data augmentation in deep-feature space.
//!
//! Training features are augmented with Gaussian perturbations centred on a
//! per-sample adversarial (or anti-adversarial) shift `δᵢ = εᵢ·sign(∇ₕ ℓ)`
//! with class-conditional covariance. Taking infinitely many augmented copies
//! yields a closed-form, logit-adjusted cross-entropy ([`loss`]). The
//! per-sample strengths `εᵢ` come from a small perturbation network
//! ([`perturb`]) that is meta-learned on a clean, balanced held-out set
//! ([`trainer`]).
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the `*64`
//! aliases below are the double-precision instantiations the experiment
//! harness uses.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod characteristics;
pub mod class_stats;
pub mod classifier;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod perturb;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tape64 = nn::Tape<f64>;
pub type ClassifierParams64 = classifier::ClassifierParams<f64>;
pub type ClassStats64 = class_stats::ClassStats<f64>;
pub type PerturbNet64 = perturb::PerturbNet<f64>;
pub type MetaTrainer64 = trainer::MetaTrainer<f64>;
pub type LossConfig64 = loss::LossConfig<f64>;
