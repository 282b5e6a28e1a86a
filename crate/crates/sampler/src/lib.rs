//! Inference: turning a trained window denoiser into long frame sequences.
//!
//! The first window of a trajectory is denoised jointly from noise
//! ([`Sampler::parallel_denoise`]). Every later window keeps the last emitted
//! frames in its first slots by re-noising them to the current level at each
//! reverse step (temporal imputation), optionally repeats each level
//! (Resample) and starts the new slots from a warped copy of the condition
//! (WarpInit). [`Sampler::generate_rgb_control`] is the baseline that feeds
//! the condition through the control branch instead.

pub mod config;
pub mod engine;
pub mod imputation;
pub mod output;

pub use config::SamplerConfig;
pub use engine::{Sampler, StreetscapeRun};
pub use imputation::{impute_latent, warp_init};
