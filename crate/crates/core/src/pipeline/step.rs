//! One training iteration's loss assembly, shared by both stages.
//!
//! Renders the sampled frame (with a flow target), evaluates every active
//! loss, and chains all image-space gradients back to Gaussian, camera and
//! tone-mapper parameters. The reprojection loss is stage-2-only and handled
//! by the caller since it touches poses rather than renders.

use super::axpy;
use crate::geometry::Camera;
use crate::img::Image;
use crate::losses::motion::{arap_loss, smoothness_losses, ArapGraph};
use crate::losses::warp::tlr_loss;
use crate::losses::{depth_loss, rgb_loss, track_flow_loss, LossBreakdown, LossWeights};
use crate::rasterizer::{render, render_backward, FlowTarget, RenderGrads, RenderUpstream};
use crate::scene::{FlowPair, GaussianSet};
use crate::tonemap::{synthetic_crf_c0, ToneMapper, ToneMapperGrad, HIDDEN};
use crate::Result;
use nalgebra::{Vector3, Vector4};

pub(crate) struct StepInput<'a> {
    pub set: &'a GaussianSet,
    pub cam: &'a Camera,
    pub cam2: &'a Camera,
    pub t: f64,
    pub t2: f64,
    pub gt_ldr: &'a Image,
    pub exposure: f64,
    pub prior_depth: &'a Image,
    pub flow_pair: &'a FlowPair,
    /// Sparse flow supervision rasterized from the tracks (flow, valid).
    pub track_flow: &'a (Image, Image),
    pub graph: &'a ArapGraph,
    pub tlr_active: bool,
    pub weights: &'a LossWeights,
    pub tone_mapper: &'a ToneMapper,
}

pub(crate) struct StepOutput {
    /// All loss terms except the caller-managed reprojection term.
    pub breakdown: LossBreakdown,
    /// Parameter gradients of both renders; camera fields refer to the
    /// primary frame's camera and the flow-target camera.
    pub grads: RenderGrads,
    /// Extrinsics gradient of the neighbor render (TLR), if it happened.
    pub cam2_render_grad: Option<(Vector4<f64>, Vector3<f64>)>,
    pub tm_grad: ToneMapperGrad,
}

/// dst += k * src over tone-mapper gradients.
pub(crate) fn tm_axpy(dst: &mut ToneMapperGrad, src: &ToneMapperGrad, k: f64) {
    for c in 0..3 {
        for i in 0..HIDDEN {
            dst.channels[c].w1[i] += k * src.channels[c].w1[i];
            dst.channels[c].b1[i] += k * src.channels[c].b1[i];
            dst.channels[c].w2[i] += k * src.channels[c].w2[i];
        }
        dst.channels[c].b2 += k * src.channels[c].b2;
    }
}

pub(crate) fn train_step(input: &StepInput) -> Result<StepOutput> {
    let w = input.weights;
    let flow_target = FlowTarget {
        t2: input.t2,
        cam2: input.cam2.clone(),
    };
    let out = render(input.set, input.cam, input.t, Some(&flow_target))?;
    let flow_img = out.flow.as_ref().expect("flow target given");

    // Photometric loss through the tone mapper.
    let ldr = input.tone_mapper.tone_map(&out.hdr, input.exposure);
    let (l_rgb, g_ldr) = rgb_loss(&ldr, input.gt_ldr)?;
    let (g_hdr_rgb, g_tm_rgb) =
        input
            .tone_mapper
            .tone_map_backward(&out.hdr, input.exposure, &g_ldr);
    let (l_ue, g_tm_ue) = input.tone_mapper.unit_exposure_loss(synthetic_crf_c0());
    let mut tm_grad = ToneMapperGrad::zeros();
    tm_axpy(&mut tm_grad, &g_tm_rgb, w.rgb);
    tm_axpy(&mut tm_grad, &g_tm_ue, w.ue);

    let (l_dep, g_depth) = depth_loss(&out.depth, input.prior_depth)?;

    // Flow supervision: dense prior flow and sparse track flow, half each.
    let (l_flow, g_flow, _) =
        track_flow_loss(flow_img, &input.flow_pair.flow, &input.flow_pair.valid)?;
    let (l_track, g_track, _) =
        track_flow_loss(flow_img, &input.track_flow.0, &input.track_flow.1)?;
    let l_track_term = 0.5 * l_flow + 0.5 * l_track;

    let (l_arap, g_arap) = arap_loss(&input.set.dynamics, input.graph, input.t, input.t2)?;
    let sm = smoothness_losses(&input.set.dynamics, input.set.n_frames)?;

    // Temporal luminance regularization against the neighbor frame.
    let mut l_tlr = 0.0;
    let mut out2 = None;
    let mut g_tlr = None;
    if input.tlr_active {
        let o2 = render(input.set, input.cam2, input.t2, None)?;
        let (l, g_a, g_b) = tlr_loss(&out.hdr, &o2.hdr, flow_img, &out.depth, &o2.depth)?;
        l_tlr = l;
        g_tlr = Some((g_a, g_b));
        out2 = Some(o2);
    }

    // Compose weighted image-space upstreams and run the renderer backward.
    let mut up_hdr = Image::zeros(out.hdr.h, out.hdr.w, 3);
    axpy(&mut up_hdr, &g_hdr_rgb, w.rgb);
    if let Some((g_a, _)) = &g_tlr {
        axpy(&mut up_hdr, g_a, w.tlr);
    }
    let mut up_depth = Image::zeros(out.depth.h, out.depth.w, 1);
    axpy(&mut up_depth, &g_depth, w.dep);
    let mut up_flow = Image::zeros(flow_img.h, flow_img.w, 2);
    axpy(&mut up_flow, &g_flow, 0.5 * w.track);
    axpy(&mut up_flow, &g_track, 0.5 * w.track);

    let upstream = RenderUpstream {
        hdr: Some(&up_hdr),
        depth: Some(&up_depth),
        alpha: None,
        flow: Some(&up_flow),
    };
    let mut grads = render_backward(input.set, input.cam, input.t, Some(&flow_target), &upstream)?;

    let mut cam2_render_grad = None;
    if let (Some((_, g_b)), Some(_)) = (&g_tlr, &out2) {
        let mut up2 = Image::zeros(out.hdr.h, out.hdr.w, 3);
        axpy(&mut up2, g_b, w.tlr);
        let upstream2 = RenderUpstream {
            hdr: Some(&up2),
            depth: None,
            alpha: None,
            flow: None,
        };
        let mut g2 = render_backward(input.set, input.cam2, input.t2, None, &upstream2)?;
        cam2_render_grad = Some((g2.cam_rotation, g2.cam_translation));
        g2.cam_rotation = Vector4::zeros();
        g2.cam_translation = Vector3::zeros();
        grads.add(&g2);
    }

    // Motion regularizers act directly on control points and coefficients.
    for (k, g) in g_arap.iter().enumerate() {
        grads.ctrl[k] += w.arap * g;
    }
    for (k, v) in grads.ctrl.iter_mut().enumerate() {
        *v += w.vel * sm.grad_ctrl_vel[k] + w.acc * sm.grad_ctrl_acc[k];
    }
    for (k, v) in grads.quat_coeffs.iter_mut().enumerate() {
        *v += w.vel * sm.grad_quat_vel[k] + w.acc * sm.grad_quat_acc[k];
    }

    Ok(StepOutput {
        breakdown: LossBreakdown {
            rgb: l_rgb,
            ue: l_ue,
            dep: l_dep,
            track: l_track_term,
            arap: l_arap,
            vel: sm.vel,
            acc: sm.acc,
            tlr: l_tlr,
            pr: 0.0,
        },
        grads,
        cam2_render_grad,
        tm_grad,
    })
}

/// Rasterize each prior flow pair's track correspondences into a sparse flow
/// image plus validity mask (nearest pixel of the source position).
pub(crate) fn build_track_flow_images(priors: &crate::scene::PriorBundle) -> Vec<(Image, Image)> {
    priors
        .flows
        .iter()
        .map(|pair| {
            let mut flow = Image::zeros(priors.height, priors.width, 2);
            let mut valid = Image::zeros(priors.height, priors.width, 1);
            for tr in &priors.tracks {
                if !tr.visible[pair.from] || !tr.visible[pair.to] {
                    continue;
                }
                let p = tr.pos[pair.from];
                let x = p.x.round();
                let y = p.y.round();
                if x < 0.0 || y < 0.0 || x >= priors.width as f64 || y >= priors.height as f64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let d = tr.pos[pair.to] - p;
                *flow.at_mut(y, x, 0) = d.x;
                *flow.at_mut(y, x, 1) = d.y;
                *valid.at_mut(y, x, 0) = 1.0;
            }
            (flow, valid)
        })
        .collect()
}

/// Flow-pair indices grouped by source frame.
pub(crate) fn pairs_by_from(priors: &crate::scene::PriorBundle) -> Vec<Vec<usize>> {
    let mut by_from = vec![Vec::new(); priors.n_frames];
    for (k, pair) in priors.flows.iter().enumerate() {
        by_from[pair.from].push(k);
    }
    by_from
}
