//! Stage 1: fully dynamic video-Gaussian training in orthographic space.

use super::densify::{densify_and_prune, reset_opacity, Blocks, DensifyOpts, GradAccum};
use super::step::{build_track_flow_images, pairs_by_from, train_step, StepInput};
use super::{adam_step_tone_mapper, scene_extent, BlockOptims, LogRow, TrainConfig, TM_PARAMS};
use crate::geometry::Camera;
use crate::img::Image;
use crate::losses::motion::{ArapGraph, ARAP_K};
use crate::losses::total_loss;
use crate::optim::Adam;
use crate::rasterizer::render;
use crate::scene::init::{init_video_gaussians, InitConfig, InitReport};
use crate::scene::{FrameBundle, GaussianSet, PriorBundle};
use crate::tonemap::ToneMapper;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub set: GaussianSet,
    pub tone_mapper: ToneMapper,
    /// Detached HDR renders of every training frame, for stage 2.
    pub hdr_frames: Vec<Image>,
    pub log: Vec<LogRow>,
    pub init_report: InitReport,
}

pub fn run_stage1(
    frames: &[FrameBundle],
    priors: &PriorBundle,
    config: &TrainConfig,
) -> Result<Stage1Output> {
    config.validate()?;
    if frames.len() != priors.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} prior frames",
            frames.len(),
            priors.n_frames
        )));
    }
    let pairs = pairs_by_from(priors);
    if pairs.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyInput("a frame has no flow pair".into()));
    }

    let ldr: Vec<Image> = frames.iter().map(|f| f.ldr.clone()).collect();
    let mut tone_mapper = ToneMapper::new(config.seed);
    let (mut set, init_report) = init_video_gaussians(
        priors,
        &ldr,
        &tone_mapper,
        &InitConfig {
            ctrl_every: config.ctrl_every,
            ..Default::default()
        },
    )?;
    log::info!(
        "stage 1: {} video Gaussians from {} tracks",
        set.len(),
        priors.tracks.len()
    );

    let cam = Camera::orthographic(priors.width, priors.height);
    let extent = scene_extent(&set);
    let lr_position = config.lr.position * extent;
    let track_flow_images = build_track_flow_images(priors);

    let mut optims = BlockOptims::new(&set);
    let mut tm_adam = Adam::new(TM_PARAMS);
    let mut graph = ArapGraph::build(&set.dynamics, 0.5, ARAP_K)?;
    let mut accum = GradAccum::new(set.len());
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..priors.n_frames).collect();
    let mut epoch_pos = order.len();
    let mut rows = Vec::with_capacity(config.stage1_iters);

    for iter in 1..=config.stage1_iters {
        if epoch_pos >= order.len() {
            order.shuffle(&mut rng);
            epoch_pos = 0;
        }
        let i = order[epoch_pos];
        epoch_pos += 1;
        let pair_idx = pairs[i][rng.gen_range(0..pairs[i].len())];
        let pair = &priors.flows[pair_idx];
        let j = pair.to;

        let out = train_step(&StepInput {
            set: &set,
            cam: &cam,
            cam2: &cam,
            t: set.frame_time(i),
            t2: set.frame_time(j),
            gt_ldr: &frames[i].ldr,
            exposure: frames[i].exposure,
            prior_depth: &priors.depths[i],
            flow_pair: pair,
            track_flow: &track_flow_images[pair_idx],
            graph: &graph,
            tlr_active: iter > config.stage1_densify_until,
            weights: &config.weights,
            tone_mapper: &tone_mapper,
        })?;
        let total = total_loss(&out.breakdown, &config.weights).map_err(|e| Error::Diverged {
            iter,
            what: e.to_string(),
        })?;

        optims.step(&mut set, &out.grads, &config.lr, lr_position)?;
        adam_step_tone_mapper(
            &mut tm_adam,
            &mut tone_mapper,
            &out.tm_grad,
            1.0,
            config.lr.mlp,
        )?;
        accum.accumulate(&out.grads.mean2d_norm);
        rows.push(LogRow {
            iter,
            total,
            breakdown: out.breakdown,
            n_gaussians: set.len(),
        });

        if iter % config.stage1_densify_interval == 0 && iter <= config.stage1_densify_until {
            let report = densify_and_prune(
                &mut set,
                &accum,
                &DensifyOpts {
                    grad_threshold: config.densify_grad_threshold,
                    split_scale: config.split_scale_frac * extent,
                    prune_opacity: config.prune_opacity,
                },
                Blocks::Dynamic,
                &mut rng,
            );
            optims.remap_dynamic(&report.keep_dyn, report.new_dyn, set.dynamics.n_knots());
            graph = ArapGraph::build(&set.dynamics, 0.5, ARAP_K)?;
            accum = GradAccum::new(set.len());
            log::debug!(
                "iter {iter}: densify +{} clones +{} splits -{} pruned -> {}",
                report.clones,
                report.splits,
                report.pruned,
                set.len()
            );
        }
        if iter % config.stage1_opacity_reset_interval == 0 && iter < config.stage1_iters {
            reset_opacity(&mut set, config.opacity_reset_value);
            optims.reset_opacity_state();
        }
    }

    let mut hdr_frames = Vec::with_capacity(priors.n_frames);
    for f in 0..priors.n_frames {
        hdr_frames.push(render(&set, &cam, set.frame_time(f), None)?.hdr);
    }
    Ok(Stage1Output {
        set,
        tone_mapper,
        hdr_frames,
        log: rows,
        init_report,
    })
}
