//! Geometry and the synthetic street world.
//!
//! A [`SceneLayout`] is an overhead grid of semantic cells with building
//! heights. Cameras look into the extruded 2.5D heightfield; [`render_gbuffer`]
//! traces every pixel with an exact grid traversal and produces the
//! screen-space conditioning buffers. [`raymarch_reference`] is the
//! brute-force oracle for it and [`warp_frame`] forward-splats an image into a
//! new view using the disparity channel.
//!
//! The [`world`] module builds procedural cities on top of that: layouts,
//! a view-independent ground-truth photo renderer, camera trajectories and
//! windowed training datasets.

pub mod camera;
pub mod gbuffer;
pub mod layout;
pub mod photo;
pub mod png;
pub mod raymarch;
pub mod warp;
pub mod world;

pub use camera::{relative_pose, CameraPose, Intrinsics, RigidTransform};
pub use gbuffer::{render_gbuffer, trace_ray, GBuffer, Hit, ScreenClass, Surface};
pub use layout::{CellClass, SceneLayout};
pub use raymarch::raymarch_reference;
pub use warp::{warp_frame, Warped};

pub use streetscape_core::{Error, Result};

/// Near distance used to normalize disparity: `clamp(D_NEAR / depth, 0, 1)`.
pub const D_NEAR: f64 = 2.0;
/// Height normalization for the height channel.
pub const H_MAX: f64 = 30.0;
