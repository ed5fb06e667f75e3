//! Trajectory planning with autoregressive kinematic proposals refined by
//! residual diffusion.
//!
//! The pipeline: [`chain`] rolls out `K` proposals through the bicycle model,
//! [`flow`] denoises a residual correction around each proposal, and
//! [`scorer`] picks the candidate with the highest utility. [`training`]
//! implements the two optimization stages and [`eval`] the metric suite.

pub mod chain;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod kinematics;
pub mod pipeline;
pub mod plot;
pub mod scenario;
pub mod scorer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
