//! Lift track/depth priors into the initial set of video Gaussians.

use crate::geometry::Camera;
use crate::geometry::QuatPolynomial;
use crate::img::Image;
use crate::scene::gaussian::{encode_opacity, DynBlock, GaussianSet, Space, StaticBlock};
use crate::scene::priors::{PriorBundle, Track};
use crate::tonemap::ToneMapper;
use crate::{Error, Result};
use nalgebra::{Vector2, Vector3};

#[derive(Debug, Clone)]
pub struct InitConfig {
    /// Place a spline control point every this many frames (the last frame
    /// is always included).
    pub ctrl_every: usize,
    /// Neighbors used for the isotropic scaling estimate.
    pub knn: usize,
    /// Initial opacity (stored as logit).
    pub init_opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            ctrl_every: 4,
            knn: 3,
            init_opacity: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InitReport {
    pub n_gaussians: usize,
    /// Tracks dropped because they are never visible.
    pub n_skipped: usize,
}

/// Knot frame indices: 0, N_s, 2 N_s, ... plus the final frame.
pub fn knot_frames(n_frames: usize, ctrl_every: usize) -> Vec<usize> {
    let mut frames: Vec<usize> = (0..n_frames).step_by(ctrl_every.max(1)).collect();
    if *frames.last().unwrap() != n_frames - 1 {
        frames.push(n_frames - 1);
    }
    frames
}

/// Track position at frame f, interpolated from the nearest visible frames
/// when the track is occluded there.
fn track_pos_at(track: &Track, f: usize) -> Option<Vector2<f64>> {
    if track.visible[f] {
        return Some(track.pos[f]);
    }
    let prev = (0..f).rev().find(|&i| track.visible[i]);
    let next = (f + 1..track.visible.len()).find(|&i| track.visible[i]);
    match (prev, next) {
        (Some(a), Some(b)) => {
            let w = (f - a) as f64 / (b - a) as f64;
            Some(track.pos[a] * (1.0 - w) + track.pos[b] * w)
        }
        (Some(a), None) => Some(track.pos[a]),
        (None, Some(b)) => Some(track.pos[b]),
        (None, None) => None,
    }
}

/// One dynamic video Gaussian per usable tracklet. Positions are lifted to
/// the orthographic video space ((x, y) in [-1, 1]^2, z = prior depth),
/// rotations start at identity, opacity at `init_opacity`, scaling from the
/// mean distance to the nearest lifted neighbors at t = 0, and irradiance
/// from the first visible LDR sample inverse-mapped through the tone mapper
/// at that frame's exposure.
pub fn init_video_gaussians(
    priors: &PriorBundle,
    ldr_frames: &[Image],
    tone_mapper: &ToneMapper,
    config: &InitConfig,
) -> Result<(GaussianSet, InitReport)> {
    if priors.tracks.is_empty() {
        return Err(Error::EmptyInput("no tracks to lift".into()));
    }
    if ldr_frames.len() != priors.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "{} LDR frames for {} prior frames",
            ldr_frames.len(),
            priors.n_frames
        )));
    }
    let cam = Camera::orthographic(priors.width, priors.height);
    let frames = knot_frames(priors.n_frames, config.ctrl_every);
    let knot_times: Vec<f64> = frames.iter().map(|&f| priors.frame_time(f)).collect();

    let mut report = InitReport::default();
    let mut ctrl_all: Vec<Vec<Vector3<f64>>> = Vec::new();
    let mut irradiance_all: Vec<Vector3<f64>> = Vec::new();

    for track in &priors.tracks {
        if track.visible.iter().all(|v| !v) {
            report.n_skipped += 1;
            continue;
        }
        let mut ctrl = Vec::with_capacity(frames.len());
        for &f in &frames {
            let p = track_pos_at(track, f).expect("track has a visible frame");
            let x = p.x.clamp(0.0, priors.width as f64 - 1.0);
            let y = p.y.clamp(0.0, priors.height as f64 - 1.0);
            let mut d = [0.0];
            priors.depths[f].sample_bilinear(x, y, &mut d);
            ctrl.push(cam.unproject(&Vector2::new(x, y), d[0].max(1e-6))?);
        }
        // Irradiance from the first visible frame's LDR pixel.
        let f0 = track.visible.iter().position(|&v| v).unwrap();
        let p0 = track.pos[f0];
        let mut rgb = [0.0; 3];
        ldr_frames[f0].sample_bilinear(
            p0.x.clamp(0.0, priors.width as f64 - 1.0),
            p0.y.clamp(0.0, priors.height as f64 - 1.0),
            &mut rgb,
        );
        let dt = priors.exposures[f0];
        let mut log_e = Vector3::zeros();
        for c in 0..3 {
            let ldr = rgb[c].clamp(1e-4, 1.0 - 1e-4);
            log_e[c] = tone_mapper.invert(c, ldr, dt).max(1e-6).ln();
        }
        irradiance_all.push(log_e);
        ctrl_all.push(ctrl);
    }
    if ctrl_all.is_empty() {
        return Err(Error::EmptyInput("all tracks skipped".into()));
    }

    // Isotropic scaling from mean distance to nearest neighbors at t = 0.
    let p0: Vec<Vector3<f64>> = ctrl_all.iter().map(|c| c[0]).collect();
    let scalings = knn_scalings(&p0, config.knn);

    let mut dynamics = DynBlock {
        knot_times,
        ..Default::default()
    };
    for (i, ctrl) in ctrl_all.iter().enumerate() {
        dynamics.push(
            ctrl,
            &QuatPolynomial::identity(),
            Vector3::repeat(scalings[i].ln()),
            encode_opacity(config.init_opacity),
            irradiance_all[i],
        );
    }
    report.n_gaussians = dynamics.len();
    let set = GaussianSet {
        space: Space::Video,
        n_frames: priors.n_frames,
        dynamics,
        statics: StaticBlock::default(),
    };
    set.validate()?;
    Ok((set, report))
}

fn knn_scalings(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    const FALLBACK: f64 = 0.1;
    let n = points.len();
    let mut out = vec![FALLBACK; n];
    if n < 2 {
        return out;
    }
    let k = k.min(n - 1);
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        for j in 0..n {
            if j != i {
                dists.push((points[i] - points[j]).norm());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean: f64 = dists[..k].iter().sum::<f64>() / k as f64;
        out[i] = mean.max(1e-6);
    }
    out
}
