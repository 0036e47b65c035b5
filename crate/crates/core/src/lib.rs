//! CPU differentiable Gaussian splatting for 4D HDR reconstruction from
//! alternating-exposure monocular LDR video.
//!
//! The engine trains in two stages: fully dynamic "video" Gaussians in an
//! orthographic camera coordinate space (no poses needed), followed by a
//! video-to-world transform and joint refinement of world Gaussians with
//! camera poses. Everything renders on the CPU with analytic gradients.

pub mod error;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rasterizer;
pub mod scene;
pub mod synthdata;
pub mod tonemap;
pub mod v2w;

pub use error::{Error, Result};
