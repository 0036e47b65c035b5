//! Camera models, projections, trajectory math and pose handling.

pub mod camera;
pub mod pose;
pub mod quat;
pub mod spline;

pub use camera::{Camera, CameraModel, Intrinsics, NEAR_PLANE};
pub use pose::{init_poses_from_static_tracks, interpolate_test_pose, PoseSet};
pub use quat::{quat_average, quat_poly_fit, QuatFit, QuatPolynomial};
pub use spline::{hermite_weights, SplineTrajectory, SplineWeights};
