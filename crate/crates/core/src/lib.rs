//! Core numerics shared by every streetscape crate.
//!
//! * [`diffusion`]: noise schedules, the forward process, deterministic DDIM
//!   steps, classifier-free guidance and the noise-prediction loss.
//! * [`tensor`]: the dense `C×H×W` image/latent container used at module
//!   boundaries.
//! * [`rng`]: the platform-independent Gaussian noise generator and seed
//!   derivation used for every stochastic draw.
//! * [`style`]: discrete style conditioning tokens.
//! * [`tnsr`]: the `TNSR` raw tensor container.

pub mod diffusion;
pub mod error;
pub mod rng;
pub mod style;
pub mod tensor;
pub mod tnsr;

pub use diffusion::{NoiseSchedule, ScheduleKind};
pub use error::{Error, Result};
pub use rng::{derive_seed, NoiseRng};
pub use style::StyleToken;
pub use tensor::ImageTensor;
