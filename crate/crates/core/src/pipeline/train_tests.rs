//! Short end-to-end training runs on a small synthetic scene. Absolute
//! quality targets live in the acceptance suite; these runs check the
//! training-loop contracts: improvement, determinism, descent, bookkeeping.

use super::*;
use crate::geometry::pose::PoseSet;
use crate::geometry::Camera;
use crate::metrics::psnr;
use crate::rasterizer::render;
use crate::scene::init::{init_video_gaussians, InitConfig};
use crate::synthdata::{generate_scene, Dataset, SceneSpec};
use crate::tonemap::ToneMapper;

fn small_dataset() -> Dataset {
    generate_scene(&SceneSpec {
        width: 64,
        height: 40,
        n_frames: 8,
        fx: 96.0,
        fy: 96.0,
        track_grid_x: 8,
        track_grid_y: 5,
        test_times: vec![0.5],
        ..Default::default()
    })
    .unwrap()
}

fn test_config() -> TrainConfig {
    TrainConfig {
        stage1_iters: 300,
        stage1_densify_until: 200,
        stage1_densify_interval: 100,
        stage1_opacity_reset_interval: 100_000,
        stage2_iters: 150,
        stage2_densify_until: 100,
        stage2_static_densify_interval: 50,
        stage2_dynamic_densify_interval: 50,
        stage2_opacity_reset_interval: 100_000,
        dynamic_prune_interval: 75,
        seed: 11,
        ..TrainConfig::desk()
    }
}

/// Mean train-frame LDR PSNR of a video set + tone mapper.
fn stage1_psnr(ds: &Dataset, set: &crate::scene::GaussianSet, tm: &ToneMapper) -> f64 {
    let cam = Camera::orthographic(ds.spec.width, ds.spec.height);
    let mut acc = 0.0;
    for (i, f) in ds.frames.iter().enumerate() {
        let hdr = render(set, &cam, set.frame_time(i), None).unwrap().hdr;
        let ldr = tm.tone_map(&hdr, f.exposure);
        acc += psnr(&ldr.map(|v| v.clamp(0.0, 1.0)), &f.ldr).unwrap();
    }
    acc / ds.frames.len() as f64
}

#[test]
fn stage1_improves_over_initialization() {
    let ds = small_dataset();
    let config = test_config();
    let out = run_stage1(&ds.frames, &ds.priors, &config).unwrap();

    // Reconstruct the exact initial state for the baseline.
    let tm0 = ToneMapper::new(config.seed);
    let ldr: Vec<_> = ds.frames.iter().map(|f| f.ldr.clone()).collect();
    let (set0, _) = init_video_gaussians(
        &ds.priors,
        &ldr,
        &tm0,
        &InitConfig {
            ctrl_every: config.ctrl_every,
            ..Default::default()
        },
    )
    .unwrap();
    let before = stage1_psnr(&ds, &set0, &tm0);
    let after = stage1_psnr(&ds, &out.set, &out.tone_mapper);
    assert!(
        after > before + 3.0,
        "LDR PSNR {before:.2} -> {after:.2} dB"
    );
}

#[test]
fn stage1_is_deterministic_and_hdr_is_sane() {
    let ds = small_dataset();
    let config = test_config();
    let a = run_stage1(&ds.frames, &ds.priors, &config).unwrap();
    let b = run_stage1(&ds.frames, &ds.priors, &config).unwrap();
    assert_eq!(a.set, b.set);
    assert_eq!(a.tone_mapper, b.tone_mapper);
    assert_eq!(a.hdr_frames, b.hdr_frames);
    assert_eq!(a.log.len(), b.log.len());
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
    for hdr in &a.hdr_frames {
        assert!(hdr.all_finite());
        assert!(hdr.data.iter().all(|&v| v >= 0.0));
        let covered = hdr.data.iter().filter(|&&v| v > 0.0).count();
        assert!(covered * 2 > hdr.data.len(), "HDR mostly uncovered");
    }
}

#[test]
fn stage1_loss_medians_descend() {
    let ds = small_dataset();
    let out = run_stage1(&ds.frames, &ds.priors, &test_config()).unwrap();
    let median = |rows: &[LogRow]| {
        let mut v: Vec<f64> = rows.iter().map(|r| r.total).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let n = out.log.len();
    let first = median(&out.log[..n / 4]);
    let last = median(&out.log[3 * n / 4..]);
    assert!(last < first, "median total {first:.4} -> {last:.4}");
}

#[test]
fn stage1_gaussian_count_is_logged_consistently() {
    let ds = small_dataset();
    let out = run_stage1(&ds.frames, &ds.priors, &test_config()).unwrap();
    assert_eq!(out.log.last().unwrap().n_gaussians, out.set.len());
    assert!(out.set.validate().is_ok());
}

fn run_both(ds: &Dataset, config: &TrainConfig, poses: &PoseSet) -> (Stage1Output, Stage2Output) {
    let s1 = run_stage1(&ds.frames, &ds.priors, config).unwrap();
    let s2 = run_stage2(
        &s1.set,
        poses,
        &ds.frames,
        &ds.priors,
        &s1.hdr_frames,
        &s1.tone_mapper,
        config,
    )
    .unwrap();
    (s1, s2)
}

#[test]
fn stage2_runs_deterministically_and_preserves_stage1_hdr() {
    let ds = small_dataset();
    let config = test_config();
    let (s1a, s2a) = run_both(&ds, &config, &ds.gt_poses);
    let checksum: f64 = s1a.hdr_frames.iter().flat_map(|h| h.data.iter()).sum();
    let (s1b, s2b) = run_both(&ds, &config, &ds.gt_poses);
    assert_eq!(s2a.set, s2b.set);
    assert_eq!(s2a.poses.rotations, s2b.poses.rotations);
    assert_eq!(s2a.poses.translations, s2b.poses.translations);
    assert_eq!(s2a.tone_mapper, s2b.tone_mapper);
    // Stage 2 never mutates the detached stage-1 HDR frames.
    let checksum_after: f64 = s1b.hdr_frames.iter().flat_map(|h| h.data.iter()).sum();
    assert_eq!(checksum.to_bits(), checksum_after.to_bits());
    // The world set carries both blocks and the reprojection term is active.
    assert!(s2a.set.validate().is_ok());
    assert!(s2a.log.iter().any(|r| r.breakdown.pr > 0.0));
    assert!(s2a.v2w_report.n_dynamic + s2a.v2w_report.n_static > 0);
}

#[test]
fn stage2_rejects_mismatched_inputs() {
    let ds = small_dataset();
    let config = test_config();
    let s1 = run_stage1(&ds.frames, &ds.priors, &config).unwrap();
    let bad_hdr = vec![s1.hdr_frames[0].clone(); 3];
    let err = run_stage2(
        &s1.set,
        &ds.gt_poses,
        &ds.frames,
        &ds.priors,
        &bad_hdr,
        &s1.tone_mapper,
        &config,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}
