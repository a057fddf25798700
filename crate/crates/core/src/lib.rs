//! Energy-based models trained by maximising the self-normalised
//! log-likelihood (SNL).
//!
//! The normaliser `Z_θ` of `p_θ(x) ∝ exp(-E_θ(x)) d(x)` is replaced by a
//! scalar `b` that is optimised jointly with `θ`; importance sampling from a
//! proposal gives unbiased gradients. See [`objectives`] for the estimators,
//! [`training`] for the optimisation loop and [`evaluation`] for the
//! `ℓ_SNL ≤ ℓ ≤ ℓ_IS` bracket.

pub mod datasets;
pub mod divergence;
pub mod error;
pub mod evaluation;
pub mod mdn;
pub mod models;
pub mod nn;
pub mod numeric;
pub mod objectives;
pub mod optim;
pub mod proposals;
pub mod regression;
pub mod rng;
pub mod training;

pub use error::{Result, SnlError};
pub use models::{BaseDistribution, BernoulliModel, EnergyModel, GaussianMeanModel, MlpEnergy};
pub use objectives::{GradientEstimate, ImportanceBatch, SnlValue, ZEstimate};
pub use proposals::{Density, Proposal};
pub use rng::SnlRng;
