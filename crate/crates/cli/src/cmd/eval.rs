use anyhow::{bail, Context, Result};
use splat4d::geometry::pose::interpolate_test_pose;
use splat4d::geometry::quat::quat_angle;
use splat4d::geometry::Camera;
use splat4d::img::Image;
use splat4d::metrics::{hdr_tae, mu_law, psnr, scale_align_channels, ssim, MetricReport};
use splat4d::rasterizer::render;
use splat4d::scene::Space;
use splat4d::synthdata::{adjacent_eval_flows, Dataset};
use splat4d::tonemap::{synthetic_crf, ToneMapper};
use std::path::Path;

use crate::checkpoint::{load, Checkpoint};
use crate::dataset::load_dataset;
use crate::io::atomic_write;

fn ldr_clamped(tm: &ToneMapper, hdr: &Image, dt: f64) -> Image {
    tm.tone_map(hdr, dt).map(|v| v.clamp(0.0, 1.0))
}

/// Full evaluation of a world checkpoint against dataset ground truth:
/// train-frame LDR at observed exposures, test-frame LDR plus novel-exposure
/// LDR, per-channel-scale-aligned mu-law HDR, and HDR-TAE over the rendered
/// train sequence with oracle adjacent-frame flows.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<MetricReport> {
    if ckpt.set.space != Space::World {
        bail!("eval expects a world-space checkpoint (run the full pipeline first)");
    }
    let poses = ckpt
        .poses
        .as_ref()
        .context("world checkpoint without poses")?;
    if poses.n_frames() != ds.frames.len() {
        bail!(
            "checkpoint covers {} frames, dataset has {}",
            poses.n_frames(),
            ds.frames.len()
        );
    }
    // A geometric-mean exposure is never a member of the observed cycle for
    // alternating exposures; GT comes from the synthetic CRF on GT HDR.
    let e_novel = ds
        .spec
        .exposures
        .iter()
        .fold(1.0, |acc, &e| acc * e)
        .powf(1.0 / ds.spec.exposures.len() as f64);

    let mut report = MetricReport::default();
    let mut hdr_seq = Vec::with_capacity(ds.frames.len());
    for (i, f) in ds.frames.iter().enumerate() {
        let out = render(&ckpt.set, &poses.camera(i), ckpt.set.frame_time(i), None)?;
        let ldr = ldr_clamped(&ckpt.tone_mapper, &out.hdr, f.exposure);
        report.ldr_oe.push(psnr(&ldr, &f.ldr)?, ssim(&ldr, &f.ldr)?);
        let gt = &ds.gt_hdr[i];
        let mu_pred = mu_law(&scale_align_channels(&out.hdr, gt)?);
        let mu_gt = mu_law(gt);
        report
            .hdr_mu
            .push(psnr(&mu_pred, &mu_gt)?, ssim(&mu_pred, &mu_gt)?);
        hdr_seq.push(out.hdr);
    }
    for tf in &ds.test_frames {
        let (q, tr) = interpolate_test_pose(poses, tf.time)?;
        let cam = Camera::perspective(&poses.intrinsics, q, tr)?;
        let out = render(&ckpt.set, &cam, tf.time, None)?;
        let ldr = ldr_clamped(&ckpt.tone_mapper, &out.hdr, e_novel);
        let gt_ldr = synth_ldr(&tf.gt_hdr, e_novel);
        report
            .ldr_ne
            .push(psnr(&ldr, &gt_ldr)?, ssim(&ldr, &gt_ldr)?);
    }
    let flows = adjacent_eval_flows(&ds.spec)?;
    report.hdr_tae = Some(hdr_tae(
        &hdr_seq,
        &flows.fwd,
        &flows.bwd,
        &flows.mask_fwd,
        &flows.mask_bwd,
    )?);
    let gt = ds.gt_poses.normalized();
    let refined = poses.normalized();
    let mean_rad = (0..gt.n_frames())
        .map(|i| quat_angle(&gt.rotations[i], &refined.rotations[i]))
        .sum::<f64>()
        / gt.n_frames() as f64;
    report.pose_rot_err_deg = Some(mean_rad.to_degrees());
    Ok(report)
}

/// Ground-truth LDR at an arbitrary exposure from GT HDR (no quantization).
fn synth_ldr(hdr: &Image, dt: f64) -> Image {
    hdr.map(|v| synthetic_crf(v, dt))
}

pub fn run(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = load(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate(&ckpt, &ds)?;
    print!("{}", report.table());
    if let Some(path) = out {
        atomic_write(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}
