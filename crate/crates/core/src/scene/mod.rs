//! The Gaussian scene representation: attribute storage, covariance
//! construction, time evaluation and lifting of priors into video Gaussians.

pub mod gaussian;
pub mod init;
pub mod priors;

pub use gaussian::{
    build_covariance, covariance_backward, decode_opacity, decode_scaling, encode_opacity,
    DynBlock, Gaussian, GaussianSet, Motion, Space, StaticBlock,
};
pub use init::{init_video_gaussians, InitConfig, InitReport};
pub use priors::{FlowPair, FrameBundle, PriorBundle, Track};
