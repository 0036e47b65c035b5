use anyhow::{bail, Context, Result};
use serde::Serialize;
use splat4d::geometry::Camera;
use splat4d::img::Image;
use splat4d::pipeline::{log_to_csv, run_stage1, run_stage2};
use splat4d::rasterizer::render;
use splat4d::scene::{GaussianSet, Space};
use splat4d::tonemap::ToneMapper;
use std::path::PathBuf;

use crate::checkpoint::{save, Checkpoint};
use crate::cmd::noised_poses;
use crate::config::{load_config, RunConfig};
use crate::dataset::load_dataset;
use crate::io::atomic_write;

pub struct Args {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub stage1_only: bool,
    pub stage2_only: bool,
    pub stage1_checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a RunConfig,
    seed: u64,
    version: &'static str,
    stages: Vec<&'static str>,
    /// The only non-deterministic field.
    created: String,
}

/// CRF lookup table: per-channel tone-mapper output over a log-exposure grid.
pub fn crf_csv(tm: &ToneMapper) -> String {
    let mut out = String::from("log_exposure,r,g,b\n");
    for i in 0..=128 {
        let x = -12.0 + 20.0 * i as f64 / 128.0;
        out.push_str(&format!(
            "{x:.6},{:.6},{:.6},{:.6}\n",
            tm.phi(0, x),
            tm.phi(1, x),
            tm.phi(2, x)
        ));
    }
    out
}

/// Detached orthographic HDR renders of every training frame, as stage 2
/// consumes them for the reprojection loss.
pub fn render_video_hdr(set: &GaussianSet, width: usize, height: usize) -> Result<Vec<Image>> {
    let cam = Camera::orthographic(width, height);
    (0..set.n_frames)
        .map(|i| Ok(render(set, &cam, set.frame_time(i), None)?.hdr))
        .collect()
}

pub fn run(args: Args) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    config.train.validate()?;
    let ds = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    let mut stages = Vec::new();

    let (video_set, tone_mapper, hdr_frames) = if args.stage2_only {
        let path = args
            .stage1_checkpoint
            .as_deref()
            .expect("clap enforces the pairing");
        let ckpt = crate::checkpoint::load(path)
            .with_context(|| format!("stage-1 checkpoint {}", path.display()))?;
        if ckpt.set.space != Space::Video {
            bail!("stage-1 checkpoint must hold video-space Gaussians");
        }
        let hdr = render_video_hdr(&ckpt.set, ds.spec.width, ds.spec.height)?;
        (ckpt.set, ckpt.tone_mapper, hdr)
    } else {
        log::info!("stage 1: {} iterations", config.train.stage1_iters);
        let s1 = run_stage1(&ds.frames, &ds.priors, &config.train)?;
        log::info!(
            "stage 1 done: {} Gaussians ({} initialized)",
            s1.set.len(),
            s1.init_report.n_gaussians
        );
        save(
            &args.out.join("stage1.ckpt"),
            &Checkpoint {
                set: s1.set.clone(),
                tone_mapper: s1.tone_mapper.clone(),
                poses: None,
            },
        )?;
        atomic_write(
            &args.out.join("stage1_loss.csv"),
            log_to_csv(&s1.log).as_bytes(),
        )?;
        stages.push("stage1");
        (s1.set, s1.tone_mapper, s1.hdr_frames)
    };

    if !args.stage1_only {
        let poses_init = noised_poses(&ds.gt_poses, &config.pose_init)?;
        log::info!("stage 2: {} iterations", config.train.stage2_iters);
        let s2 = run_stage2(
            &video_set,
            &poses_init,
            &ds.frames,
            &ds.priors,
            &hdr_frames,
            &tone_mapper,
            &config.train,
        )?;
        log::info!(
            "stage 2 done: {} dynamic + {} static Gaussians",
            s2.set.dynamics.len(),
            s2.set.statics.len()
        );
        save(
            &args.out.join("stage2.ckpt"),
            &Checkpoint {
                set: s2.set,
                tone_mapper: s2.tone_mapper.clone(),
                poses: Some(s2.poses),
            },
        )?;
        atomic_write(
            &args.out.join("stage2_loss.csv"),
            log_to_csv(&s2.log).as_bytes(),
        )?;
        atomic_write(
            &args.out.join("crf.csv"),
            crf_csv(&s2.tone_mapper).as_bytes(),
        )?;
        stages.push("stage2");
    } else {
        atomic_write(&args.out.join("crf.csv"), crf_csv(&tone_mapper).as_bytes())?;
    }

    let manifest = RunManifest {
        config: &config,
        seed: config.train.seed,
        version: env!("CARGO_PKG_VERSION"),
        stages,
        created: crate::dataset::timestamp(),
    };
    atomic_write(
        &args.out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}
