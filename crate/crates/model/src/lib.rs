//! The streetscape denoiser and its staged training.
//!
//! * [`config`]: architecture hyper-parameters and training stages.
//! * [`weights`]: parameter layout, deterministic init, `SSWT` files.
//! * [`net`]: the UNet + motion modules + control branch forward pass.
//! * [`gradcheck`]: finite-difference oracle for the backward pass.
//! * [`train`]: per-stage optimization and the S0 → S1 → S2 curriculum.

pub mod condition;
pub mod config;
pub mod gradcheck;
pub mod net;
pub mod train;
pub mod weights;

pub use config::{BackboneConfig, Stage};
pub use net::{predict_noise, Backbone};
pub use weights::{init_backbone, ModelWeights};
