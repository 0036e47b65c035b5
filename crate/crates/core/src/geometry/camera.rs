//! Orthographic and perspective camera models with analytic projection
//! Jacobians.
//!
//! The orthographic model rasterizes "video" Gaussians: (x, y) are normalized
//! coordinates in [-1, 1]^2 mapped to the pixel grid, z passes through as
//! depth. The perspective model is a standard pinhole. Extrinsics are
//! world-to-camera, stored as a raw quaternion that is normalized on use so
//! pose optimization can run in the unconstrained 4-vector space.

use crate::geometry::quat;
use crate::{Error, Result};
use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub const NEAR_PLANE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraModel {
    Orthographic,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, [w, x, y, z], unit norm.
    pub rotation: Vector4<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Orthographic video-space camera: identity extrinsics.
    pub fn orthographic(width: usize, height: usize) -> Self {
        Camera {
            model: CameraModel::Orthographic,
            width,
            height,
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn perspective(
        intr: &Intrinsics,
        rotation: Vector4<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if intr.w == 0 || intr.h == 0 || intr.fx <= 0.0 || intr.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bad intrinsics: {}x{} fx={} fy={}",
                intr.w, intr.h, intr.fx, intr.fy
            )));
        }
        let n = rotation.norm();
        if n < 1e-12 {
            return Err(Error::InvalidConfig("zero quaternion".into()));
        }
        Ok(Camera {
            model: CameraModel::Perspective,
            width: intr.w,
            height: intr.h,
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            rotation: rotation / n,
            translation,
        })
    }

    pub fn rot_matrix(&self) -> Matrix3<f64> {
        quat::rotmat(&self.rotation)
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rot_matrix() * p_world + self.translation
    }

    /// Camera-space point to pixel coordinates.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        match self.model {
            CameraModel::Orthographic => Ok(Vector2::new(
                (p_cam.x + 1.0) * self.width as f64 / 2.0,
                (p_cam.y + 1.0) * self.height as f64 / 2.0,
            )),
            CameraModel::Perspective => {
                if p_cam.z <= NEAR_PLANE {
                    return Err(Error::BehindCamera { z: p_cam.z });
                }
                Ok(Vector2::new(
                    self.fx * p_cam.x / p_cam.z + self.cx,
                    self.fy * p_cam.y / p_cam.z + self.cy,
                ))
            }
        }
    }

    /// Exact right inverse of `project` at the given depth.
    pub fn unproject(&self, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        match self.model {
            CameraModel::Orthographic => Ok(Vector3::new(
                u.x * 2.0 / self.width as f64 - 1.0,
                u.y * 2.0 / self.height as f64 - 1.0,
                depth,
            )),
            CameraModel::Perspective => {
                if depth <= 0.0 {
                    return Err(Error::InvalidDepth { d: depth });
                }
                Ok(Vector3::new(
                    (u.x - self.cx) / self.fx * depth,
                    (u.y - self.cy) / self.fy * depth,
                    depth,
                ))
            }
        }
    }

    /// 2x3 Jacobian of `project` at p_cam.
    pub fn projection_jacobian(&self, p_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        match self.model {
            CameraModel::Orthographic => Ok(Matrix2x3::new(
                self.width as f64 / 2.0,
                0.0,
                0.0,
                0.0,
                self.height as f64 / 2.0,
                0.0,
            )),
            CameraModel::Perspective => {
                if p_cam.z <= NEAR_PLANE {
                    return Err(Error::BehindCamera { z: p_cam.z });
                }
                let z = p_cam.z;
                Ok(Matrix2x3::new(
                    self.fx / z,
                    0.0,
                    -self.fx * p_cam.x / (z * z),
                    0.0,
                    self.fy / z,
                    -self.fy * p_cam.y / (z * z),
                ))
            }
        }
    }

    /// Partials of the projection Jacobian entries with respect to p_cam,
    /// as dJ/dx, dJ/dy, dJ/dz. Zero for the orthographic model.
    pub fn projection_jacobian_partials(&self, p_cam: &Vector3<f64>) -> [Matrix2x3<f64>; 3] {
        match self.model {
            CameraModel::Orthographic => [Matrix2x3::zeros(); 3],
            CameraModel::Perspective => {
                let z = p_cam.z;
                let z2 = z * z;
                let z3 = z2 * z;
                let dx = Matrix2x3::new(0.0, 0.0, -self.fx / z2, 0.0, 0.0, 0.0);
                let dy = Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -self.fy / z2);
                let dz = Matrix2x3::new(
                    -self.fx / z2,
                    0.0,
                    2.0 * self.fx * p_cam.x / z3,
                    0.0,
                    -self.fy / z2,
                    2.0 * self.fy * p_cam.y / z3,
                );
                [dx, dy, dz]
            }
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            w: self.width,
            h: self.height,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 432.0,
            cy: 240.0,
            w: 864,
            h: 480,
        }
    }

    fn identity_cam(intr: &Intrinsics) -> Camera {
        Camera::perspective(intr, Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros()).unwrap()
    }

    #[test]
    fn perspective_optical_axis() {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 0.0,
            cy: 0.0,
            w: 10,
            h: 10,
        };
        let cam = identity_cam(&intr);
        let u = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(u.x, 0.0);
        assert_abs_diff_eq!(u.y, 0.0);
    }

    #[test]
    fn perspective_hand_example() {
        let cam = identity_cam(&test_intr());
        let u = cam.project(&Vector3::new(0.5, -0.25, 2.0)).unwrap();
        assert_abs_diff_eq!(u.x, 457.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.y, 227.5, epsilon = 1e-12);
    }

    #[test]
    fn orthographic_corner_mapping() {
        let cam = Camera::orthographic(864, 480);
        let u = cam.project(&Vector3::new(-1.0, -1.0, 2.5)).unwrap();
        assert_abs_diff_eq!(u.x, 0.0);
        assert_abs_diff_eq!(u.y, 0.0);
        let p = cam.unproject(&Vector2::new(216.0, 120.0), 3.0).unwrap();
        assert_abs_diff_eq!(p.x, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, 3.0);
    }

    #[test]
    fn behind_camera_errors() {
        let cam = identity_cam(&test_intr());
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(cam.unproject(&Vector2::new(0.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn unproject_round_trip() {
        let mut rng = StdRng::seed_from_u64(13);
        let persp = identity_cam(&test_intr());
        let ortho = Camera::orthographic(864, 480);
        for cam in [&persp, &ortho] {
            for _ in 0..50 {
                let u = Vector2::new(rng.gen_range(0.0..864.0), rng.gen_range(0.0..480.0));
                let d = rng.gen_range(0.1..10.0);
                let p = cam.unproject(&u, d).unwrap();
                let u2 = cam.project(&p).unwrap();
                assert!((u - u2).norm() < 1e-10);
            }
        }
        let p = persp.unproject(&Vector2::new(432.0, 240.0), 5.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_values() {
        let ortho = Camera::orthographic(864, 480);
        let j = ortho
            .projection_jacobian(&Vector3::new(0.3, 0.2, 1.0))
            .unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 432.0);
        assert_abs_diff_eq!(j[(1, 1)], 240.0);
        assert_abs_diff_eq!(j[(0, 1)], 0.0);
        assert_abs_diff_eq!(j[(0, 2)], 0.0);

        let persp = identity_cam(&test_intr());
        let z = 2.5;
        let j = persp
            .projection_jacobian(&Vector3::new(0.0, 0.0, z))
            .unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 100.0 / z, epsilon = 1e-12);
        assert_abs_diff_eq!(j[(1, 1)], 100.0 / z, epsilon = 1e-12);
        assert_abs_diff_eq!(j[(0, 2)], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(29);
        let persp = identity_cam(&test_intr());
        let ortho = Camera::orthographic(864, 480);
        for cam in [&persp, &ortho] {
            for _ in 0..20 {
                let p = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.5..5.0),
                );
                let j = cam.projection_jacobian(&p).unwrap();
                for axis in 0..3 {
                    let e = 1e-6;
                    let mut pp = p;
                    pp[axis] += e;
                    let mut pm = p;
                    pm[axis] -= e;
                    let fd = (cam.project(&pp).unwrap() - cam.project(&pm).unwrap()) / (2.0 * e);
                    for r in 0..2 {
                        let denom = fd[r].abs().max(1.0);
                        assert!(
                            (j[(r, axis)] - fd[r]).abs() / denom < 1e-6,
                            "J[{r},{axis}] = {} vs fd {}",
                            j[(r, axis)],
                            fd[r]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_partials_match_fd() {
        let persp = identity_cam(&test_intr());
        let p = Vector3::new(0.4, -0.3, 2.0);
        let parts = persp.projection_jacobian_partials(&p);
        for axis in 0..3 {
            let e = 1e-6;
            let mut pp = p;
            pp[axis] += e;
            let mut pm = p;
            pm[axis] -= e;
            let fd = (persp.projection_jacobian(&pp).unwrap()
                - persp.projection_jacobian(&pm).unwrap())
                / (2.0 * e);
            assert!((parts[axis] - fd).norm() < 1e-4);
        }
    }
}
