//! Warp-based losses: temporal luminance regularization between neighboring
//! HDR renders, and photometric reprojection of detached HDR frames for pose
//! refinement. Both use the ratio-normalized difference |a-b|/(a+b), which is
//! invariant to global positive scaling of the radiometric inputs.

use crate::geometry::pose::PoseSet;
use crate::geometry::quat;
use crate::img::Image;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3, Vector4};

/// Relative depth-consistency threshold for warp validity.
pub const DEPTH_CONSISTENCY_REL: f64 = 0.05;
/// Samples with |a| + |b| below this are excluded from ratio losses.
pub const RATIO_DENOM_MIN: f64 = 1e-8;

#[inline]
fn ratio_term(a: f64, b: f64) -> Option<(f64, f64, f64)> {
    // l = |a - b| / (a + b); returns (l, dl/da, dl/db).
    let denom = a + b;
    if denom.abs() < RATIO_DENOM_MIN {
        return None;
    }
    let d = a - b;
    let l = d.abs() / denom;
    let s = d.signum();
    let d2 = denom * denom;
    let da = (s * denom - d.abs()) / d2;
    let db = (-s * denom - d.abs()) / d2;
    Some((l, da, db))
}

/// Temporal luminance regularization: warp the neighboring HDR render onto
/// frame t by backward sampling along the detached rendered flow, and
/// penalize the ratio-normalized difference on depth-consistent pixels.
///
/// `flow` maps a pixel of frame t to its position in the neighbor frame
/// (2 channels, dx/dy, no gradient). `depth` / `depth_neighbor` are the
/// rendered depths, also detached. Returns the loss and the gradients with
/// respect to `hdr` and `hdr_neighbor`.
pub fn tlr_loss(
    hdr: &Image,
    hdr_neighbor: &Image,
    flow: &Image,
    depth: &Image,
    depth_neighbor: &Image,
) -> Result<(f64, Image, Image)> {
    hdr.check_same_shape(hdr_neighbor, "tlr_loss hdr")?;
    if flow.h != hdr.h || flow.w != hdr.w || flow.c != 2 {
        return Err(Error::ShapeMismatch("tlr_loss flow".into()));
    }
    if depth.h != hdr.h || depth.w != hdr.w || depth.c != 1 {
        return Err(Error::ShapeMismatch("tlr_loss depth".into()));
    }
    depth.check_same_shape(depth_neighbor, "tlr_loss depth")?;
    let c = hdr.c;
    let mut grad = Image::zeros(hdr.h, hdr.w, c);
    let mut grad_nb = Image::zeros(hdr.h, hdr.w, c);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut warped = vec![0.0; c];
    let mut dwarp = vec![0.0; c];
    let mut dsample = [0.0];
    for y in 0..hdr.h {
        for x in 0..hdr.w {
            let sx = x as f64 + flow.at(y, x, 0);
            let sy = y as f64 + flow.at(y, x, 1);
            if !depth_neighbor.sample_bilinear(sx, sy, &mut dsample) {
                continue;
            }
            let d_here = depth.at(y, x, 0);
            if (dsample[0] - d_here).abs() > DEPTH_CONSISTENCY_REL * d_here.abs().max(1e-12) {
                continue;
            }
            hdr_neighbor.sample_bilinear(sx, sy, &mut warped);
            for k in 0..c {
                let Some((l, da, db)) = ratio_term(warped[k], hdr.at(y, x, k)) else {
                    dwarp[k] = 0.0;
                    continue;
                };
                sum += l;
                count += 1;
                *grad.at_mut(y, x, k) += db;
                dwarp[k] = da;
            }
            hdr_neighbor.scatter_bilinear_grad(&mut grad_nb, sx, sy, &dwarp);
        }
    }
    if count == 0 {
        return Ok((0.0, grad, grad_nb));
    }
    let inv = 1.0 / count as f64;
    for v in grad.data.iter_mut().chain(grad_nb.data.iter_mut()) {
        *v *= inv;
    }
    Ok((sum * inv, grad, grad_nb))
}

/// Gradients of a pose-dependent loss on every frame's raw rotation
/// quaternion and translation.
#[derive(Debug, Clone)]
pub struct PoseGrads {
    pub rotations: Vec<Vector4<f64>>,
    pub translations: Vec<Vector3<f64>>,
}

impl PoseGrads {
    pub fn zeros(n_frames: usize) -> Self {
        PoseGrads {
            rotations: vec![Vector4::zeros(); n_frames],
            translations: vec![Vector3::zeros(); n_frames],
        }
    }

    pub fn add(&mut self, other: &PoseGrads) {
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.translations.iter_mut().zip(&other.translations) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.rotations {
            *v *= s;
        }
        for v in &mut self.translations {
            *v *= s;
        }
    }
}

/// Photometric reprojection between two detached HDR frames.
///
/// Each static pixel u of frame t is lifted with the prior depth, mapped
/// through the relative pose into frame t2 and compared against the bilinear
/// sample there with the ratio-normalized difference. Only the pose
/// parameters of frames t and t2 receive gradients.
pub fn reprojection_loss(
    hdr_t: &Image,
    hdr_t2: &Image,
    poses: &PoseSet,
    t: usize,
    t2: usize,
    prior_depth: &Image,
    dyn_mask: &Image,
) -> Result<(f64, PoseGrads)> {
    hdr_t.check_same_shape(hdr_t2, "reprojection_loss hdr")?;
    if prior_depth.h != hdr_t.h || prior_depth.w != hdr_t.w || prior_depth.c != 1 {
        return Err(Error::ShapeMismatch("reprojection_loss depth".into()));
    }
    if dyn_mask.h != hdr_t.h || dyn_mask.w != hdr_t.w || dyn_mask.c != 1 {
        return Err(Error::ShapeMismatch("reprojection_loss mask".into()));
    }
    let cam_a = poses.camera(t);
    let cam_b = poses.camera(t2);
    let rot_a = cam_a.rot_matrix();
    let rot_b = cam_b.rot_matrix();
    let c = hdr_t.c;
    let mut grads = PoseGrads::zeros(poses.n_frames());
    let mut g_rot_a = Matrix3::<f64>::zeros();
    let mut g_rot_b = Matrix3::<f64>::zeros();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut sampled = vec![0.0; c];
    let mut dx = vec![0.0; c];
    let mut dy = vec![0.0; c];
    for y in 0..hdr_t.h {
        for x in 0..hdr_t.w {
            if dyn_mask.at(y, x, 0) > 0.5 {
                continue;
            }
            let d = prior_depth.at(y, x, 0);
            if d <= 0.0 {
                continue;
            }
            let u = Vector2::new(x as f64, y as f64);
            let x_cam = cam_a.unproject(&u, d)?;
            let p_world = rot_a.transpose() * (x_cam - cam_a.translation);
            let x_cam2 = rot_b * p_world + cam_b.translation;
            let Ok(u2) = cam_b.project(&x_cam2) else {
                continue;
            };
            if !hdr_t2.sample_bilinear(u2.x, u2.y, &mut sampled) {
                continue;
            }
            hdr_t2.sample_bilinear_grad_pos(u2.x, u2.y, &mut dx, &mut dy);
            let mut g_u2 = Vector2::zeros();
            for k in 0..c {
                let Some((l, _, db)) = ratio_term(hdr_t.at(y, x, k), sampled[k]) else {
                    continue;
                };
                sum += l;
                count += 1;
                g_u2.x += db * dx[k];
                g_u2.y += db * dy[k];
            }
            let jac = cam_b.projection_jacobian(&x_cam2)?;
            let g_x2 = jac.transpose() * g_u2;
            grads.translations[t2] += g_x2;
            g_rot_b += g_x2 * p_world.transpose();
            let g_pw = rot_b.transpose() * g_x2;
            grads.translations[t] -= rot_a * g_pw;
            g_rot_a += (x_cam - cam_a.translation) * g_pw.transpose();
        }
    }
    if count == 0 {
        return Ok((0.0, grads));
    }
    grads.rotations[t] += quat::rotmat_backward(&poses.rotations[t], &g_rot_a);
    grads.rotations[t2] += quat::rotmat_backward(&poses.rotations[t2], &g_rot_b);
    let inv = 1.0 / count as f64;
    grads.scale(inv);
    Ok((sum * inv, grads))
}
