//! Desk-scale toolkit for studying diffusion models as representation learners.
//!
//! The crate trains small time-conditioned denoisers, checks the closed-form
//! behaviour of linear denoisers with skip connections, probes per-timestep
//! latent features, and distills teacher features into student networks with a
//! learned (REINFORCE) timestep selector.
//!
//! Module map:
//! - [`numeric`]: dense matrices, counter-based RNG streams, SVD, finite differences.
//! - [`autonet`]: MLP / attention denoiser with hand-written backward passes and optimizers.
//! - [`datasets`]: seeded synthetic labeled data, zero-mean normalized.
//! - [`diffusion`]: noise schedules, forward process, DDPM objective, teacher training, sampling.
//! - [`linear_dpm`]: analytic loss decomposition for linear denoisers.
//! - [`probe`]: spectra, effective rank, attention mass, silhouette scores.
//! - [`distill`]: hint / attention-transfer / relational losses and the student network.
//! - [`policy`]: categorical timestep policy, auxiliary decoder, REINFORCE and exact gradients.
//! - [`pipeline`]: end-to-end runs, ablations, reports and charts.

pub mod autonet;
pub mod datasets;
pub mod diffusion;
pub mod distill;
mod error;
pub mod linear_dpm;
pub mod numeric;
pub mod pipeline;
pub mod policy;
pub mod probe;

pub use error::{Error, Result};
