//! Per-frame camera poses: Procrustes-based initialization from static
//! tracks, gradient refinement on reprojection error, and test-time pose
//! interpolation.

use crate::geometry::camera::{Camera, Intrinsics};
use crate::geometry::quat;
use crate::scene::PriorBundle;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3, Vector4};

pub const MIN_STATIC_TRACKS: usize = 8;

/// World-to-camera extrinsics for every training frame plus the shared
/// intrinsics. Rotations are raw quaternions [w, x, y, z], normalized on use.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub intrinsics: Intrinsics,
    pub rotations: Vec<Vector4<f64>>,
    pub translations: Vec<Vector3<f64>>,
}

impl PoseSet {
    pub fn identity(intrinsics: Intrinsics, n_frames: usize) -> Self {
        PoseSet {
            intrinsics,
            rotations: vec![Vector4::new(1.0, 0.0, 0.0, 0.0); n_frames],
            translations: vec![Vector3::zeros(); n_frames],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.rotations.len()
    }

    /// Normalized timestamp of frame index i (0-based).
    pub fn frame_time(&self, i: usize) -> f64 {
        if self.n_frames() <= 1 {
            0.0
        } else {
            i as f64 / (self.n_frames() - 1) as f64
        }
    }

    pub fn camera(&self, i: usize) -> Camera {
        Camera::perspective(&self.intrinsics, self.rotations[i], self.translations[i])
            .expect("valid pose")
    }

    pub fn normalized(&self) -> PoseSet {
        let mut out = self.clone();
        for q in &mut out.rotations {
            *q /= q.norm();
        }
        out
    }
}

fn slerp(a: &Vector4<f64>, b: &Vector4<f64>, f: f64) -> Vector4<f64> {
    let a = a / a.norm();
    let mut b = b / b.norm();
    let mut dot = a.dot(&b);
    if dot < 0.0 {
        b = -b;
        dot = -dot;
    }
    if dot > 1.0 - 1e-12 {
        let q = a * (1.0 - f) + b * f;
        return q / q.norm();
    }
    let theta = dot.acos();
    let s = theta.sin();
    (a * ((1.0 - f) * theta).sin() + b * (f * theta).sin()) / s
}

/// Pose at a normalized time strictly inside the training range: spherical
/// linear interpolation on rotations, linear on translations.
pub fn interpolate_test_pose(poses: &PoseSet, t: f64) -> Result<(Vector4<f64>, Vector3<f64>)> {
    let n = poses.n_frames();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let s = t * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let f = s - i as f64;
    let q = slerp(&poses.rotations[i], &poses.rotations[i + 1], f);
    let tr = poses.translations[i] * (1.0 - f) + poses.translations[i + 1] * f;
    Ok((q, tr))
}

/// Rigid Procrustes alignment: rotation and translation mapping `src` onto
/// `dst` in least squares, with the reflection case corrected by a
/// determinant sign flip.
pub fn rigid_procrustes(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: src.len().min(dst.len()),
        });
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += (b - cd) * (a - cs).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    let t = cd - r * cs;
    Ok((r, t))
}

fn quat_from_rotmat(r: &Matrix3<f64>) -> Vector4<f64> {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q / q.norm()
}

/// Indices of tracks that are visible in every frame and never land in a
/// dynamic-mask pixel.
fn static_track_indices(priors: &PriorBundle) -> Vec<usize> {
    let nf = priors.n_frames;
    let mut out = Vec::new();
    'tracks: for (i, tr) in priors.tracks.iter().enumerate() {
        for t in 0..nf {
            if !tr.visible[t] {
                continue 'tracks;
            }
            let p = tr.pos[t];
            let x = p.x.round();
            let y = p.y.round();
            if x < 0.0 || y < 0.0 || x as usize >= priors.width || y as usize >= priors.height {
                continue 'tracks;
            }
            if priors.masks[t].at(y as usize, x as usize, 0) > 0.5 {
                continue 'tracks;
            }
        }
        out.push(i);
    }
    out
}

const REFINE_STEPS: usize = 500;
const REFINE_LR: f64 = 2e-3;

/// Initialize per-frame camera poses from static tracklets and depth priors.
///
/// Frame 0 defines the world frame (identity pose). Each subsequent pose is
/// solved by rigid Procrustes between lifted 3D point sets, then all poses
/// are jointly refined by gradient descent on static-track reprojection
/// error.
pub fn init_poses_from_static_tracks(priors: &PriorBundle, intr: &Intrinsics) -> Result<PoseSet> {
    let nf = priors.n_frames;
    let statics = static_track_indices(priors);
    if statics.len() < MIN_STATIC_TRACKS {
        return Err(Error::InsufficientData {
            needed: MIN_STATIC_TRACKS,
            got: statics.len(),
        });
    }
    let probe = Camera::perspective(intr, Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::zeros())?;
    // Lift the static tracks to per-frame camera-space point sets.
    let mut lifted: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(nf);
    for t in 0..nf {
        let mut pts = Vec::with_capacity(statics.len());
        for &i in &statics {
            let u = priors.tracks[i].pos[t];
            let mut d = [0.0];
            if !priors.depths[t].sample_bilinear(u.x, u.y, &mut d) {
                let x = (u.x.round().max(0.0) as usize).min(priors.width - 1);
                let y = (u.y.round().max(0.0) as usize).min(priors.height - 1);
                d[0] = priors.depths[t].at(y, x, 0);
            }
            pts.push(probe.unproject(&u, d[0])?);
        }
        lifted.push(pts);
    }
    // World frame = frame-0 camera frame.
    let world = lifted[0].clone();
    let mut poses = PoseSet::identity(*intr, nf);
    for t in 1..nf {
        let (r, tr) = rigid_procrustes(&world, &lifted[t])?;
        poses.rotations[t] = quat_from_rotmat(&r);
        poses.translations[t] = tr;
    }
    refine_poses_reprojection(&mut poses, &world, &statics, priors, REFINE_STEPS);
    Ok(poses)
}

/// Joint gradient refinement of poses (frame 0 fixed) minimizing squared
/// reprojection error of the given world points against track observations.
fn refine_poses_reprojection(
    poses: &mut PoseSet,
    world: &[Vector3<f64>],
    track_indices: &[usize],
    priors: &PriorBundle,
    steps: usize,
) {
    let nf = poses.n_frames();
    let n_obs = (world.len() * (nf - 1)) as f64;
    for _ in 0..steps {
        let mut grad_q = vec![Vector4::<f64>::zeros(); nf];
        let mut grad_t = vec![Vector3::<f64>::zeros(); nf];
        for t in 1..nf {
            let cam = poses.camera(t);
            let rot = cam.rot_matrix();
            let mut g_r = Matrix3::<f64>::zeros();
            for (j, &ti) in track_indices.iter().enumerate() {
                let x = world[j];
                let p_cam = rot * x + cam.translation;
                let Ok(u) = cam.project(&p_cam) else { continue };
                let r: Vector2<f64> = u - priors.tracks[ti].pos[t];
                let Ok(jac) = cam.projection_jacobian(&p_cam) else {
                    continue;
                };
                let g_p = jac.transpose() * (r * 2.0 / n_obs);
                grad_t[t] += g_p;
                g_r += g_p * x.transpose();
            }
            grad_q[t] = quat::rotmat_backward(&poses.rotations[t], &g_r);
        }
        for t in 1..nf {
            poses.rotations[t] -= grad_q[t] * REFINE_LR;
            poses.translations[t] -= grad_t[t] * REFINE_LR;
            let n = poses.rotations[t].norm();
            poses.rotations[t] /= n;
        }
    }
}

/// Mean reprojection RMS (pixels) of static tracks under the given poses,
/// lifting world points from frame 0.
pub fn static_reprojection_rms(poses: &PoseSet, priors: &PriorBundle) -> Result<f64> {
    let statics = static_track_indices(priors);
    if statics.is_empty() {
        return Err(Error::EmptyInput("no static tracks".into()));
    }
    let cam0 = poses.camera(0);
    let mut world = Vec::new();
    for &i in &statics {
        let u = priors.tracks[i].pos[0];
        let mut d = [0.0];
        if !priors.depths[0].sample_bilinear(u.x, u.y, &mut d) {
            continue;
        }
        let p0 = cam0.unproject(&u, d[0])?;
        // frame-0 camera space -> world
        let r0 = cam0.rot_matrix();
        world.push((i, r0.transpose() * (p0 - cam0.translation)));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..poses.n_frames() {
        let cam = poses.camera(t);
        for (i, x) in &world {
            let p_cam = cam.to_camera(x);
            if let Ok(u) = cam.project(&p_cam) {
                sum += (u - priors.tracks[*i].pos[t]).norm_squared();
                count += 1;
            }
        }
    }
    Ok((sum / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn procrustes_recovers_rigid_motion() {
        let mut rng = StdRng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(2.0..4.0),
                )
            })
            .collect();
        let q = Vector4::new(0.9, 0.1, -0.2, 0.3);
        let r = quat::rotmat(&q);
        let tr = Vector3::new(0.3, -0.5, 0.2);
        let dst: Vec<Vector3<f64>> = pts.iter().map(|p| r * p + tr).collect();
        let (r2, t2) = rigid_procrustes(&pts, &dst).unwrap();
        assert!((r - r2).norm() < 1e-10);
        assert!((tr - t2).norm() < 1e-10);
        assert!(r2.determinant() > 0.0);
    }

    #[test]
    fn procrustes_rotation_is_proper_on_planar_data() {
        // Planar points admit a reflection solution; the determinant flip
        // must still produce a proper rotation.
        let src: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, (i % 3) as f64 * 0.2, 0.0))
            .collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| Vector3::new(p.y, p.x, 0.0)).collect();
        let (r, _) = rigid_procrustes(&src, &dst).unwrap();
        assert!(r.determinant() > 0.999);
    }

    #[test]
    fn quat_rotmat_round_trip() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..30 {
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let r = quat::rotmat(&q);
            let q2 = quat_from_rotmat(&r);
            assert!(quat::quat_angle(&q, &q2) < 1e-9);
        }
    }

    fn two_pose_set() -> PoseSet {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            w: 100,
            h: 100,
        };
        let mut p = PoseSet::identity(intr, 2);
        let half = (45f64).to_radians();
        p.rotations[1] = Vector4::new(half.cos(), 0.0, 0.0, half.sin());
        p.translations[1] = Vector3::new(1.0, 2.0, 3.0);
        p
    }

    #[test]
    fn interpolate_endpoints_exact() {
        let p = two_pose_set();
        let (q, t) = interpolate_test_pose(&p, 0.0).unwrap();
        assert!(quat::quat_angle(&q, &p.rotations[0]) < 1e-12);
        assert!(t.norm() < 1e-12);
        let (q, t) = interpolate_test_pose(&p, 1.0).unwrap();
        assert!(quat::quat_angle(&q, &p.rotations[1]) < 1e-12);
        assert!((t - p.translations[1]).norm() < 1e-12);
    }

    #[test]
    fn interpolate_midpoint_is_half_rotation() {
        let p = two_pose_set();
        let (q, t) = interpolate_test_pose(&p, 0.5).unwrap();
        let expect = Vector4::new(
            (22.5f64).to_radians().cos(),
            0.0,
            0.0,
            (22.5f64).to_radians().sin(),
        );
        assert!(quat::quat_angle(&q, &expect) < 1e-9);
        assert!((t - Vector3::new(0.5, 1.0, 1.5)).norm() < 1e-12);
    }

    #[test]
    fn interpolate_matches_slerp_oracle() {
        // Oracle: rotate by the fractional angle about the relative axis.
        let p = two_pose_set();
        let f = 0.37;
        let (q, _) = interpolate_test_pose(&p, f).unwrap();
        let ang = (90f64).to_radians() * f / 2.0;
        let expect = Vector4::new(ang.cos(), 0.0, 0.0, ang.sin());
        assert!(quat::quat_angle(&q, &expect) < 1e-9);
    }

    #[test]
    fn interpolate_out_of_range() {
        let p = two_pose_set();
        assert!(interpolate_test_pose(&p, -0.1).is_err());
        assert!(interpolate_test_pose(&p, 1.1).is_err());
    }

    #[test]
    fn interpolation_continuity() {
        let p = two_pose_set();
        let mut prev = interpolate_test_pose(&p, 0.0).unwrap();
        for i in 1..=100 {
            let t = i as f64 / 100.0;
            let cur = interpolate_test_pose(&p, t).unwrap();
            assert!(quat::quat_angle(&prev.0, &cur.0) < 0.02);
            assert!((prev.1 - cur.1).norm() < 0.1);
            prev = cur;
        }
    }

    #[test]
    fn frame_time_normalization() {
        let intr = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            w: 2,
            h: 2,
        };
        let p = PoseSet::identity(intr, 5);
        assert_abs_diff_eq!(p.frame_time(0), 0.0);
        assert_abs_diff_eq!(p.frame_time(4), 1.0);
        assert_abs_diff_eq!(p.frame_time(2), 0.5);
    }
}
