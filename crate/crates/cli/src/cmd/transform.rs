use anyhow::{bail, Context, Result};
use splat4d::geometry::Camera;
use splat4d::rasterizer::render;
use splat4d::scene::Space;
use splat4d::v2w::{transform_set, V2wConfig};
use std::path::Path;

use crate::checkpoint::{load, save, Checkpoint};
use crate::cmd::noised_poses;
use crate::config::load_config;
use crate::dataset::load_dataset;

pub fn run(config: Option<&Path>, data: &Path, stage1_ckpt: &Path, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let ds = load_dataset(data)?;
    let ckpt = load(stage1_ckpt)
        .with_context(|| format!("stage-1 checkpoint {}", stage1_ckpt.display()))?;
    if ckpt.set.space != Space::Video {
        bail!("transform expects a video-space checkpoint");
    }
    if ckpt.set.n_frames != ds.frames.len() {
        bail!(
            "checkpoint covers {} frames, dataset has {}",
            ckpt.set.n_frames,
            ds.frames.len()
        );
    }
    let poses = noised_poses(&ds.gt_poses, &config.pose_init)?;
    let cam = Camera::orthographic(ds.spec.width, ds.spec.height);
    let depths: Vec<_> = (0..ckpt.set.n_frames)
        .map(|i| Ok(render(&ckpt.set, &cam, ckpt.set.frame_time(i), None)?.depth))
        .collect::<Result<_>>()?;
    let v2w = V2wConfig {
        dynamic_threshold: config.train.dynamic_threshold,
        ctrl_every: config.train.ctrl_every,
        ..Default::default()
    };
    let (world, report) = transform_set(&ckpt.set, &poses, &ds.priors.masks, &depths, &v2w)?;
    log::info!(
        "transformed {} dynamic + {} static Gaussians ({} dropped, {} refit cap hits)",
        report.n_dynamic,
        report.n_static,
        report.n_dropped,
        report.refit_unconverged
    );
    save(
        out,
        &Checkpoint {
            set: world,
            tone_mapper: ckpt.tone_mapper,
            poses: Some(poses),
        },
    )
}
