use anyhow::{bail, Result};
use splat4d::geometry::pose::interpolate_test_pose;
use splat4d::geometry::Camera;
use splat4d::rasterizer::render;
use splat4d::scene::Space;
use std::path::Path;

use crate::checkpoint::load;
use crate::config::load_config;
use crate::io::{write_pfm, write_png};

/// Render HDR (PFM) and tone-mapped LDR (PNG) images at the requested
/// normalized times and exposures. World checkpoints interpolate the stored
/// camera trajectory; video checkpoints render orthographically.
pub fn run(
    config: Option<&Path>,
    checkpoint: &Path,
    out: &Path,
    times: &[f64],
    exposures: &[f64],
) -> Result<()> {
    let config = load_config(config)?;
    let ckpt = load(checkpoint)?;
    let times = if times.is_empty() {
        config.render.times.clone()
    } else {
        times.to_vec()
    };
    let exposures = if exposures.is_empty() {
        config.render.exposures.clone()
    } else {
        exposures.to_vec()
    };
    if times.is_empty() {
        bail!("no render times given (flags or [render] config section)");
    }
    if exposures.is_empty() {
        bail!("no exposures given (flags or [render] config section)");
    }
    std::fs::create_dir_all(out)?;
    for (ti, &t) in times.iter().enumerate() {
        let cam = match (ckpt.set.space, &ckpt.poses) {
            (Space::World, Some(poses)) => {
                let (q, tr) = interpolate_test_pose(poses, t)?;
                Camera::perspective(&poses.intrinsics, q, tr)?
            }
            (Space::Video, _) => {
                let side = 256;
                Camera::orthographic(side, side * 3 / 5)
            }
            (Space::World, None) => bail!("world checkpoint without poses"),
        };
        let rendered = render(&ckpt.set, &cam, t, None)?;
        write_pfm(&out.join(format!("hdr_t{ti}.pfm")), &rendered.hdr)?;
        write_pfm(&out.join(format!("depth_t{ti}.pfm")), &rendered.depth)?;
        for (ei, &e) in exposures.iter().enumerate() {
            if e <= 0.0 {
                bail!("exposure must be positive, got {e}");
            }
            let ldr = ckpt
                .tone_mapper
                .tone_map(&rendered.hdr, e)
                .map(|v| v.clamp(0.0, 1.0));
            write_png(&out.join(format!("ldr_t{ti}_e{ei}.png")), &ldr)?;
        }
    }
    log::info!(
        "rendered {} times x {} exposures to {}",
        times.len(),
        exposures.len(),
        out.display()
    );
    Ok(())
}
