//! Analytic adjoints of the tiled renderer.
//!
//! Phase A re-walks per-pixel blending (tile-parallel, merged in fixed tile
//! order for determinism) and accumulates gradients at the 2D-splat level:
//! mean, inverse covariance, opacity, irradiance, view depth, displacement.
//! Phase B chains those through projection, covariance construction, motion
//! evaluation and the camera extrinsics.

use super::{bin_tiles, gather_pixel, prepare, FlowTarget, Splat2D, SIGMA_CLAMP, TILE};
use crate::geometry::{hermite_weights, quat, Camera, SplineWeights};
use crate::img::Image;
use crate::scene::{covariance_backward, GaussianSet};
use crate::{Error, Result};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

/// Upstream gradients on the render output; absent channels contribute
/// nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderUpstream<'a> {
    pub hdr: Option<&'a Image>,
    pub depth: Option<&'a Image>,
    pub alpha: Option<&'a Image>,
    pub flow: Option<&'a Image>,
}

/// Gradients for every Gaussian attribute and the camera extrinsics.
/// Attribute vectors are indexed dynamic-first, matching `GaussianSet`.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub ctrl: Vec<Vector3<f64>>,
    pub quat_coeffs: Vec<Vector4<f64>>,
    pub static_position: Vec<Vector3<f64>>,
    pub static_rotation: Vec<Vector4<f64>>,
    pub log_scaling: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub log_irradiance: Vec<Vector3<f64>>,
    /// Gradient with respect to the camera's stored rotation quaternion.
    pub cam_rotation: Vector4<f64>,
    pub cam_translation: Vector3<f64>,
    /// Extrinsics of the flow-target camera, when one was given.
    pub cam2_rotation: Vector4<f64>,
    pub cam2_translation: Vector3<f64>,
    /// Norm of each Gaussian's accumulated 2D-mean gradient (densification
    /// statistic); zero for Gaussians that did not contribute to any pixel.
    pub mean2d_norm: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(set: &GaussianSet) -> Self {
        let nd = set.dynamics.len();
        let nk = set.dynamics.n_knots();
        let ns = set.statics.len();
        RenderGrads {
            ctrl: vec![Vector3::zeros(); nd * nk],
            quat_coeffs: vec![Vector4::zeros(); nd * 4],
            static_position: vec![Vector3::zeros(); ns],
            static_rotation: vec![Vector4::zeros(); ns],
            log_scaling: vec![Vector3::zeros(); nd + ns],
            logit_opacity: vec![0.0; nd + ns],
            log_irradiance: vec![Vector3::zeros(); nd + ns],
            cam_rotation: Vector4::zeros(),
            cam_translation: Vector3::zeros(),
            cam2_rotation: Vector4::zeros(),
            cam2_translation: Vector3::zeros(),
            mean2d_norm: vec![0.0; nd + ns],
        }
    }

    pub fn add(&mut self, other: &RenderGrads) {
        for (a, b) in self.ctrl.iter_mut().zip(&other.ctrl) {
            *a += b;
        }
        for (a, b) in self.quat_coeffs.iter_mut().zip(&other.quat_coeffs) {
            *a += b;
        }
        for (a, b) in self.static_position.iter_mut().zip(&other.static_position) {
            *a += b;
        }
        for (a, b) in self.static_rotation.iter_mut().zip(&other.static_rotation) {
            *a += b;
        }
        for (a, b) in self.log_scaling.iter_mut().zip(&other.log_scaling) {
            *a += b;
        }
        for (a, b) in self.logit_opacity.iter_mut().zip(&other.logit_opacity) {
            *a += b;
        }
        for (a, b) in self.log_irradiance.iter_mut().zip(&other.log_irradiance) {
            *a += b;
        }
        self.cam_rotation += other.cam_rotation;
        self.cam_translation += other.cam_translation;
        self.cam2_rotation += other.cam2_rotation;
        self.cam2_translation += other.cam2_translation;
        for (a, b) in self.mean2d_norm.iter_mut().zip(&other.mean2d_norm) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for v in &mut self.ctrl {
            *v *= f;
        }
        for v in &mut self.quat_coeffs {
            *v *= f;
        }
        for v in &mut self.static_position {
            *v *= f;
        }
        for v in &mut self.static_rotation {
            *v *= f;
        }
        for v in &mut self.log_scaling {
            *v *= f;
        }
        for v in &mut self.logit_opacity {
            *v *= f;
        }
        for v in &mut self.log_irradiance {
            *v *= f;
        }
        self.cam_rotation *= f;
        self.cam_translation *= f;
        self.cam2_rotation *= f;
        self.cam2_translation *= f;
        for v in &mut self.mean2d_norm {
            *v *= f.abs();
        }
    }
}

/// Gradient accumulator at the prepared-splat level.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    /// Gradient with respect to the inverse 2D covariance.
    g_inv: Matrix2<f64>,
    rgb: Vector3<f64>,
    alpha: f64,
    view_depth: f64,
    disp: Vector2<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.g_inv += o.g_inv;
        self.rgb += o.rgb;
        self.alpha += o.alpha;
        self.view_depth += o.view_depth;
        self.disp += o.disp;
    }
}

pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    flow: Option<&FlowTarget>,
    upstream: &RenderUpstream,
) -> Result<RenderGrads> {
    let (h, w) = (cam.height, cam.width);
    for (img, c, name) in [
        (upstream.hdr, 3usize, "hdr"),
        (upstream.depth, 1, "depth"),
        (upstream.alpha, 1, "alpha"),
        (upstream.flow, 2, "flow"),
    ]
    .into_iter()
    .filter_map(|(o, c, n)| o.map(|i| (i, c, n)))
    {
        if img.h != h || img.w != w || img.c != c {
            return Err(Error::ShapeMismatch(format!(
                "upstream {name}: {}x{}x{} vs render {h}x{w}x{c}",
                img.h, img.w, img.c
            )));
        }
    }
    if upstream.flow.is_some() && flow.is_none() {
        return Err(Error::StateMismatch(
            "flow upstream without a flow target".into(),
        ));
    }
    let mut grads = RenderGrads::zeros(set);
    if set.is_empty() {
        return Ok(grads);
    }

    let splats = prepare(set, cam, t, flow)?;
    let bins = bin_tiles(&splats, w, h);

    // Phase A: tile-parallel blending backward; per-tile partials indexed by
    // the tile's candidate list, merged sequentially in tile order.
    let tile_grads: Vec<Vec<SplatGrad>> = (0..bins.tx * bins.ty)
        .into_par_iter()
        .map(|ti| {
            let x0 = (ti % bins.tx) * TILE;
            let y0 = (ti / bins.tx) * TILE;
            let tw = TILE.min(w - x0);
            let th = TILE.min(h - y0);
            let cand = &bins.lists[ti];
            let mut local = vec![SplatGrad::default(); cand.len()];
            if cand.is_empty() {
                return local;
            }
            // candidate slot lookup for this tile
            let mut slot_of = std::collections::HashMap::with_capacity(cand.len());
            for (slot, &s) in cand.iter().enumerate() {
                slot_of.insert(s, slot);
            }
            let mut contribs = Vec::new();
            for yy in 0..th {
                for xx in 0..tw {
                    let (x, y) = (x0 + xx, y0 + yy);
                    let g_hdr = upstream.hdr.map_or(Vector3::zeros(), |im| {
                        Vector3::new(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2))
                    });
                    let g_depth = upstream.depth.map_or(0.0, |im| im.at(y, x, 0));
                    let g_alpha = upstream.alpha.map_or(0.0, |im| im.at(y, x, 0));
                    let g_flow = upstream.flow.map_or(Vector2::zeros(), |im| {
                        Vector2::new(im.at(y, x, 0), im.at(y, x, 1))
                    });
                    if g_hdr == Vector3::zeros()
                        && g_depth == 0.0
                        && g_alpha == 0.0
                        && g_flow == Vector2::zeros()
                    {
                        continue;
                    }
                    gather_pixel(x as f64, y as f64, &splats, cand, &mut contribs);
                    pixel_backward(
                        x as f64, y as f64, &splats, &contribs, &g_hdr, g_depth, g_alpha, &g_flow,
                        &slot_of, &mut local,
                    );
                }
            }
            local
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    for (ti, local) in tile_grads.iter().enumerate() {
        for (slot, g) in local.iter().enumerate() {
            splat_grads[bins.lists[ti][slot]].add(g);
        }
    }

    // Phase B: chain splat-level gradients to parameters.
    let nd = set.dynamics.len();
    let weights: Option<SplineWeights> = if nd > 0 {
        Some(hermite_weights(&set.dynamics.knot_times, t)?)
    } else {
        None
    };
    let weights2: Option<SplineWeights> = match (nd > 0, flow) {
        (true, Some(f)) => Some(hermite_weights(&set.dynamics.knot_times, f.t2)?),
        _ => None,
    };
    let nk = set.dynamics.n_knots();
    let w_mat = cam.rot_matrix();
    let t_pows = [1.0, t, t * t, t * t * t];

    for (sp, g) in splats.iter().zip(&splat_grads) {
        let i = sp.index;
        grads.mean2d_norm[i] += g.mean2d.norm();
        let a_inv = sp.inv_cov;
        // d L / d cov2d = -A G A (A symmetric, G symmetric by construction).
        let g_cov = -a_inv * g.g_inv * a_inv;
        let j = cam
            .projection_jacobian(&sp.x_cam)
            .expect("splat was projectable");
        let p = j * w_mat;
        let sigma3 = crate::scene::build_covariance(&sp.q_raw, &get_log_scaling(set, i));
        // cov2d = P Sigma P^T + reg
        let g_sigma3 = p.transpose() * g_cov * p;
        let g_p = (g_cov + g_cov.transpose()) * p * sigma3;
        let g_j = g_p * w_mat.transpose();
        let mut g_w: Matrix3<f64> = j.transpose() * g_p;

        // Displacement splits into the two projections.
        let g_mean = if sp.flow_valid {
            g.mean2d - g.disp
        } else {
            g.mean2d
        };
        let mut g_xcam = j.transpose() * g_mean;
        g_xcam.z += g.view_depth;
        let j_partials = cam.projection_jacobian_partials(&sp.x_cam);
        for k in 0..3 {
            g_xcam[k] += g_j.component_mul(&j_partials[k]).sum();
        }
        g_w += g_xcam * sp.pos_world.transpose();
        let g_pos = w_mat.transpose() * g_xcam;
        grads.cam_translation += g_xcam;
        grads.cam_rotation += quat::rotmat_backward(&cam.rotation, &g_w);

        // Covariance chain to rotation and scaling.
        let (g_q, g_ls) = covariance_backward(&sp.q_raw, &get_log_scaling(set, i), &g_sigma3);

        // Flow-target projection chain.
        let mut g_pos2 = Vector3::zeros();
        if let Some(f) = flow {
            if sp.flow_valid && g.disp != Vector2::zeros() {
                let j2 = f
                    .cam2
                    .projection_jacobian(&sp.x_cam2)
                    .expect("flow projection valid");
                let g_xcam2 = j2.transpose() * g.disp;
                let w2 = f.cam2.rot_matrix();
                g_pos2 = w2.transpose() * g_xcam2;
                grads.cam2_translation += g_xcam2;
                let g_w2 = g_xcam2 * sp.pos_world2.transpose();
                grads.cam2_rotation += quat::rotmat_backward(&f.cam2.rotation, &g_w2);
            }
        }

        // Attribute gradients.
        let alpha = sp.alpha;
        grads.logit_opacity[i] += g.alpha * alpha * (1.0 - alpha);
        grads.log_irradiance[i] += g.rgb.component_mul(&sp.rgb);
        grads.log_scaling[i] += g_ls;

        if i < nd {
            let wts = weights.as_ref().unwrap();
            for k in 0..wts.count {
                grads.ctrl[i * nk + wts.first + k] += g_pos * wts.w[k];
            }
            if g_pos2 != Vector3::zeros() {
                let wts2 = weights2.as_ref().unwrap();
                for k in 0..wts2.count {
                    grads.ctrl[i * nk + wts2.first + k] += g_pos2 * wts2.w[k];
                }
            }
            for (jj, tp) in t_pows.iter().enumerate() {
                grads.quat_coeffs[i * 4 + jj] += g_q * *tp;
            }
        } else {
            let si = i - nd;
            grads.static_position[si] += g_pos + g_pos2;
            grads.static_rotation[si] += g_q;
        }
    }
    Ok(grads)
}

fn get_log_scaling(set: &GaussianSet, i: usize) -> Vector3<f64> {
    let nd = set.dynamics.len();
    if i < nd {
        set.dynamics.log_scaling[i]
    } else {
        set.statics.log_scaling[i - nd]
    }
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    px: f64,
    py: f64,
    splats: &[Splat2D],
    contribs: &[super::Contrib],
    g_hdr: &Vector3<f64>,
    g_depth: f64,
    g_alpha: f64,
    g_flow: &Vector2<f64>,
    slot_of: &std::collections::HashMap<usize, usize>,
    local: &mut [SplatGrad],
) {
    let mut s_hdr = Vector3::zeros();
    let mut s_depth = 0.0;
    let mut s_alpha = 0.0;
    let mut s_flow = Vector2::zeros();
    for c in contribs.iter().rev() {
        let sp = &splats[c.s];
        let w = c.sigma * c.trans;
        let slot = slot_of[&c.s];
        let g = &mut local[slot];
        g.rgb += g_hdr * w;
        g.view_depth += g_depth * w;
        g.disp += g_flow * w;

        let om = 1.0 - c.sigma;
        let d_sigma = g_hdr.dot(&(sp.rgb * c.trans - s_hdr / om))
            + g_depth * (sp.view_depth * c.trans - s_depth / om)
            + g_alpha * (c.trans - s_alpha / om)
            + g_flow.dot(&(sp.disp * c.trans - s_flow / om));

        s_hdr += sp.rgb * w;
        s_depth += sp.view_depth * w;
        s_alpha += w;
        s_flow += sp.disp * w;

        if c.sigma >= SIGMA_CLAMP {
            continue; // clamped: locally constant in all inputs
        }
        let gauss = c.sigma / sp.alpha;
        g.alpha += d_sigma * gauss;
        // sigma = alpha * exp(-q/2): dL/dq = -sigma/2 * dL/dsigma
        let d_q = -0.5 * c.sigma * d_sigma;
        let delta = Vector2::new(px - sp.mean2d.x, py - sp.mean2d.y);
        let a_delta = sp.inv_cov * delta;
        g.mean2d += a_delta * (-2.0 * d_q);
        g.g_inv += delta * delta.transpose() * d_q;
    }
}
