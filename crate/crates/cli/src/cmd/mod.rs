pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod render;
pub mod train;
pub mod transform;

use anyhow::Result;
use nalgebra::{Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use splat4d::geometry::pose::PoseSet;
use splat4d::geometry::quat::quat_mul;

use crate::config::PoseInit;

/// Perturb ground-truth poses per the configured initialization noise.
pub fn noised_poses(gt: &PoseSet, init: &PoseInit) -> Result<PoseSet> {
    let mut out = gt.clone();
    if init.rotation_noise_degrees == 0.0 {
        return Ok(out);
    }
    let mut rng = StdRng::seed_from_u64(init.noise_seed);
    for q in &mut out.rotations {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-9 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        let half = init.rotation_noise_degrees.to_radians() / 2.0;
        let dq = Vector4::new(
            half.cos(),
            axis.x * half.sin(),
            axis.y * half.sin(),
            axis.z * half.sin(),
        );
        *q = quat_mul(&dq, q);
    }
    Ok(out)
}
