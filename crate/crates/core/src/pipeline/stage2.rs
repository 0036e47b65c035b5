//! Stage 2: video-to-world transform, then joint refinement of world
//! Gaussians, camera poses and the tone mapper under perspective rendering.

use super::densify::{
    densify_and_prune, prune_dynamic_world, reset_opacity, Blocks, DensifyOpts, GradAccum,
};
use super::step::{build_track_flow_images, pairs_by_from, train_step, StepInput};
use super::{
    adam_step_tone_mapper, adam_step_vec3, adam_step_vec4, normalize_backward, scene_extent,
    BlockOptims, LogRow, TrainConfig, TM_PARAMS,
};
use crate::geometry::pose::PoseSet;
use crate::geometry::Camera;
use crate::img::Image;
use crate::losses::motion::{ArapGraph, ARAP_K};
use crate::losses::total_loss;
use crate::losses::warp::{reprojection_loss, PoseGrads};
use crate::optim::Adam;
use crate::rasterizer::render;
use crate::scene::{FrameBundle, GaussianSet, PriorBundle, Space};
use crate::tonemap::ToneMapper;
use crate::v2w::{transform_set, IdentificationReport, V2wConfig};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub set: GaussianSet,
    pub poses: PoseSet,
    pub tone_mapper: ToneMapper,
    pub log: Vec<LogRow>,
    pub v2w_report: IdentificationReport,
}

#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    video_set: &GaussianSet,
    poses_init: &PoseSet,
    frames: &[FrameBundle],
    priors: &PriorBundle,
    stage1_hdr: &[Image],
    tone_mapper: &ToneMapper,
    config: &TrainConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    let nf = priors.n_frames;
    if video_set.space != Space::Video {
        return Err(Error::InvalidConfig(
            "stage 2 starts from a video set".into(),
        ));
    }
    if frames.len() != nf || stage1_hdr.len() != nf || poses_init.n_frames() != nf {
        return Err(Error::ShapeMismatch(format!(
            "{nf} prior frames vs {} frames / {} stage-1 HDR / {} poses",
            frames.len(),
            stage1_hdr.len(),
            poses_init.n_frames()
        )));
    }
    let pairs = pairs_by_from(priors);
    if pairs.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyInput("a frame has no flow pair".into()));
    }

    // Video-to-world transform against the stage-1 rendered depths.
    let ortho = Camera::orthographic(priors.width, priors.height);
    let mut video_depths = Vec::with_capacity(nf);
    for f in 0..nf {
        video_depths.push(render(video_set, &ortho, video_set.frame_time(f), None)?.depth);
    }
    let (mut set, v2w_report) = transform_set(
        video_set,
        poses_init,
        &priors.masks,
        &video_depths,
        &V2wConfig {
            dynamic_threshold: config.dynamic_threshold,
            ctrl_every: config.ctrl_every,
            ..Default::default()
        },
    )?;
    log::info!(
        "stage 2: {} dynamic + {} static world Gaussians",
        set.dynamics.len(),
        set.statics.len()
    );

    let mut poses = poses_init.clone();
    let mut tone_mapper = tone_mapper.clone();
    let extent = scene_extent(&set);
    let lr_position = config.lr.position * extent;
    let track_flow_images = build_track_flow_images(priors);

    let mut optims = BlockOptims::new(&set);
    let mut tm_adam = Adam::new(TM_PARAMS);
    let mut rot_adam = Adam::new(nf * 4);
    let mut trans_adam = Adam::new(nf * 3);
    let mut graph = ArapGraph::build(&set.dynamics, 0.5, ARAP_K)?;
    let mut accum = GradAccum::new(set.len());
    let mut rng = StdRng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..nf).collect();
    let mut epoch_pos = order.len();
    let mut rows = Vec::with_capacity(config.stage2_iters);

    for iter in 1..=config.stage2_iters {
        if epoch_pos >= order.len() {
            order.shuffle(&mut rng);
            epoch_pos = 0;
        }
        let i = order[epoch_pos];
        epoch_pos += 1;
        let pair_idx = pairs[i][rng.gen_range(0..pairs[i].len())];
        let pair = &priors.flows[pair_idx];
        let j = pair.to;
        let cam_i = poses.camera(i);
        let cam_j = poses.camera(j);

        let out = train_step(&StepInput {
            set: &set,
            cam: &cam_i,
            cam2: &cam_j,
            t: set.frame_time(i),
            t2: set.frame_time(j),
            gt_ldr: &frames[i].ldr,
            exposure: frames[i].exposure,
            prior_depth: &priors.depths[i],
            flow_pair: pair,
            track_flow: &track_flow_images[pair_idx],
            graph: &graph,
            tlr_active: iter > config.stage2_densify_until,
            weights: &config.weights,
            tone_mapper: &tone_mapper,
        })?;

        // Reprojection consistency on the detached stage-1 HDR frames; the
        // only trainable inputs are the poses.
        let (l_pr, mut pose_grads) = reprojection_loss(
            &stage1_hdr[i],
            &stage1_hdr[j],
            &poses,
            i,
            j,
            &priors.depths[i],
            &priors.masks[i],
        )?;
        let mut breakdown = out.breakdown;
        breakdown.pr = l_pr;
        let total = total_loss(&breakdown, &config.weights).map_err(|e| Error::Diverged {
            iter,
            what: e.to_string(),
        })?;

        pose_grads.scale(config.weights.pr);
        route_camera_grads(&mut pose_grads, &poses, i, j, &out);

        optims.step(&mut set, &out.grads, &config.lr, lr_position)?;
        adam_step_tone_mapper(
            &mut tm_adam,
            &mut tone_mapper,
            &out.tm_grad,
            1.0,
            config.lr.mlp,
        )?;
        adam_step_vec4(
            &mut rot_adam,
            &mut poses.rotations,
            &pose_grads.rotations,
            config.lr.pose,
            "pose_rotations",
        )?;
        adam_step_vec3(
            &mut trans_adam,
            &mut poses.translations,
            &pose_grads.translations,
            config.lr.pose,
            "pose_translations",
        )?;
        accum.accumulate(&out.grads.mean2d_norm);
        rows.push(LogRow {
            iter,
            total,
            breakdown,
            n_gaussians: set.len(),
        });

        if iter <= config.stage2_densify_until {
            let do_dyn = iter % config.stage2_dynamic_densify_interval == 0;
            let do_static = iter % config.stage2_static_densify_interval == 0;
            if do_dyn || do_static {
                let blocks = match (do_dyn, do_static) {
                    (true, true) => Blocks::Both,
                    (true, false) => Blocks::Dynamic,
                    _ => Blocks::Static,
                };
                let report = densify_and_prune(
                    &mut set,
                    &accum,
                    &DensifyOpts {
                        grad_threshold: config.densify_grad_threshold,
                        split_scale: config.split_scale_frac * extent,
                        prune_opacity: config.prune_opacity,
                    },
                    blocks,
                    &mut rng,
                );
                if blocks != Blocks::Static {
                    optims.remap_dynamic(&report.keep_dyn, report.new_dyn, set.dynamics.n_knots());
                    graph = ArapGraph::build(&set.dynamics, 0.5, ARAP_K)?;
                }
                if blocks != Blocks::Dynamic {
                    optims.remap_static(&report.keep_static, report.new_static);
                }
                accum = GradAccum::new(set.len());
            }
        }
        if iter % config.dynamic_prune_interval == 0 && !set.dynamics.is_empty() {
            let mut depths = Vec::with_capacity(nf);
            for f in 0..nf {
                depths.push(render(&set, &poses.camera(f), set.frame_time(f), None)?.depth);
            }
            let (removed, keep) = prune_dynamic_world(
                &mut set,
                &priors.masks,
                &poses,
                &depths,
                config.dynamic_threshold,
            )?;
            if removed > 0 {
                optims.remap_dynamic(&keep, 0, set.dynamics.n_knots());
                graph = ArapGraph::build(&set.dynamics, 0.5, ARAP_K)?;
                accum = GradAccum::new(set.len());
                log::debug!("iter {iter}: reclassification removed {removed} dynamic Gaussians");
            }
        }
        if iter % config.stage2_opacity_reset_interval == 0 && iter < config.stage2_iters {
            reset_opacity(&mut set, config.opacity_reset_value);
            optims.reset_opacity_state();
        }
    }

    Ok(Stage2Output {
        set,
        poses,
        tone_mapper,
        log: rows,
        v2w_report,
    })
}

/// Add the renderer's camera-extrinsics gradients (taken with respect to the
/// normalized quaternions the cameras store) onto the raw pose gradients.
fn route_camera_grads(
    pose_grads: &mut PoseGrads,
    poses: &PoseSet,
    i: usize,
    j: usize,
    out: &super::step::StepOutput,
) {
    pose_grads.rotations[i] += normalize_backward(&poses.rotations[i], &out.grads.cam_rotation);
    pose_grads.translations[i] += out.grads.cam_translation;
    pose_grads.rotations[j] += normalize_backward(&poses.rotations[j], &out.grads.cam2_rotation);
    pose_grads.translations[j] += out.grads.cam2_translation;
    if let Some((g_rot, g_trans)) = &out.cam2_render_grad {
        pose_grads.rotations[j] += normalize_backward(&poses.rotations[j], g_rot);
        pose_grads.translations[j] += g_trans;
    }
}
