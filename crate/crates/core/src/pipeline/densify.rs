//! Adaptive density control: clone, split, prune, opacity resets, and the
//! stage-2 dynamic-Gaussian reclassification cleanup.

use crate::geometry::pose::PoseSet;
use crate::geometry::quat;
use crate::img::Image;
use crate::scene::{decode_opacity, decode_scaling, encode_opacity, GaussianSet};
use crate::v2w::{classify_dynamic, Classification};
use crate::Result;
use nalgebra::{Vector3, Vector4};
use rand::rngs::StdRng;
use rand::Rng;

/// Scale divisor applied to split children.
pub const SPLIT_FACTOR: f64 = 1.6;

/// Mean 2D positional gradient accumulated between densification calls.
/// Indices are dynamic-first, matching `GaussianSet`.
#[derive(Debug, Clone)]
pub struct GradAccum {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        GradAccum {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Add one iteration's per-Gaussian gradient norms; zero norm means the
    /// Gaussian contributed to no pixel and is not counted.
    pub fn accumulate(&mut self, norms: &[f64]) {
        debug_assert_eq!(norms.len(), self.sum.len());
        for (i, &g) in norms.iter().enumerate() {
            if g > 0.0 {
                self.sum[i] += g;
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Which blocks a densification call touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocks {
    Dynamic,
    Static,
    Both,
}

#[derive(Debug, Clone, Copy)]
pub struct DensifyOpts {
    pub grad_threshold: f64,
    /// Max scale above which a selected Gaussian splits instead of cloning.
    pub split_scale: f64,
    pub prune_opacity: f64,
}

/// Outcome plus the remapping data optimizer state needs to follow along.
#[derive(Debug, Clone)]
pub struct DensifyReport {
    pub clones: usize,
    pub splits: usize,
    pub pruned: usize,
    pub n_before: usize,
    pub n_after: usize,
    pub keep_dyn: Vec<bool>,
    pub keep_static: Vec<bool>,
    pub new_dyn: usize,
    pub new_static: usize,
}

/// Sample an offset distributed as N(0, Sigma) of the given Gaussian.
pub(crate) fn sample_offset(
    rotation: &Vector4<f64>,
    log_scaling: &Vector3<f64>,
    rng: &mut StdRng,
) -> Vector3<f64> {
    let s = decode_scaling(log_scaling);
    let n = Vector3::new(normal(rng), normal(rng), normal(rng));
    quat::rotmat(rotation) * n.component_mul(&s)
}

fn normal(rng: &mut StdRng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Clone/split Gaussians whose accumulated positional gradient exceeds the
/// threshold and prune transparent ones. Children append after the surviving
/// originals of their block; `keep_*` plus `new_*` describe the remapping.
pub fn densify_and_prune(
    set: &mut GaussianSet,
    accum: &GradAccum,
    opts: &DensifyOpts,
    blocks: Blocks,
    rng: &mut StdRng,
) -> DensifyReport {
    let nd = set.dynamics.len();
    let ns = set.statics.len();
    let nk = set.dynamics.n_knots();
    let mut report = DensifyReport {
        clones: 0,
        splits: 0,
        pruned: 0,
        n_before: set.len(),
        n_after: 0,
        keep_dyn: vec![true; nd],
        keep_static: vec![true; ns],
        new_dyn: 0,
        new_static: 0,
    };
    let log_split = SPLIT_FACTOR.ln();

    if blocks != Blocks::Static {
        for i in 0..nd {
            if decode_opacity(set.dynamics.logit_opacity[i]) < opts.prune_opacity {
                report.keep_dyn[i] = false;
                report.pruned += 1;
                continue;
            }
            if accum.mean(i) <= opts.grad_threshold {
                continue;
            }
            let ls = set.dynamics.log_scaling[i];
            let ctrl: Vec<Vector3<f64>> = set.dynamics.ctrl_of(i).to_vec();
            let poly = set.dynamics.quat_poly(i);
            let op = set.dynamics.logit_opacity[i];
            let irr = set.dynamics.log_irradiance[i];
            if decode_scaling(&ls).max() <= opts.split_scale {
                set.dynamics.push(&ctrl, &poly, ls, op, irr);
                report.clones += 1;
                report.new_dyn += 1;
            } else {
                report.keep_dyn[i] = false;
                report.splits += 1;
                let q = poly.eval(0.5).unwrap_or(Vector4::new(1.0, 0.0, 0.0, 0.0));
                let ls_child = ls.map(|v| v - log_split);
                for _ in 0..2 {
                    let d = sample_offset(&q, &ls, rng);
                    let ctrl_child: Vec<Vector3<f64>> = ctrl.iter().map(|c| c + d).collect();
                    set.dynamics.push(&ctrl_child, &poly, ls_child, op, irr);
                    report.new_dyn += 1;
                }
            }
        }
        let _ = nk;
        let mut keep_full = report.keep_dyn.clone();
        keep_full.extend(std::iter::repeat(true).take(report.new_dyn));
        set.dynamics.retain(&keep_full);
    }

    if blocks != Blocks::Dynamic {
        for i in 0..ns {
            if decode_opacity(set.statics.logit_opacity[i]) < opts.prune_opacity {
                report.keep_static[i] = false;
                report.pruned += 1;
                continue;
            }
            if accum.mean(nd + i) <= opts.grad_threshold {
                continue;
            }
            let ls = set.statics.log_scaling[i];
            let pos = set.statics.position[i];
            let rot = set.statics.rotation[i];
            let op = set.statics.logit_opacity[i];
            let irr = set.statics.log_irradiance[i];
            if decode_scaling(&ls).max() <= opts.split_scale {
                set.statics.push(pos, rot, ls, op, irr);
                report.clones += 1;
                report.new_static += 1;
            } else {
                report.keep_static[i] = false;
                report.splits += 1;
                let ls_child = ls.map(|v| v - log_split);
                for _ in 0..2 {
                    let d = sample_offset(&rot, &ls, rng);
                    set.statics.push(pos + d, rot, ls_child, op, irr);
                    report.new_static += 1;
                }
            }
        }
        let mut keep_full = report.keep_static.clone();
        keep_full.extend(std::iter::repeat(true).take(report.new_static));
        set.statics.retain(&keep_full);
    }

    report.n_after = set.len();
    debug_assert_eq!(
        report.n_after,
        report.n_before + report.clones + 2 * report.splits - report.splits - report.pruned
    );
    report
}

/// Clamp every opacity to at most `max_alpha` (the periodic opacity reset).
pub fn reset_opacity(set: &mut GaussianSet, max_alpha: f64) {
    let cap = encode_opacity(max_alpha);
    for o in set
        .dynamics
        .logit_opacity
        .iter_mut()
        .chain(set.statics.logit_opacity.iter_mut())
    {
        *o = o.min(cap);
    }
}

/// Reclassify every dynamic world Gaussian by projecting its trajectory into
/// the per-frame cameras and reapplying the dynamic/static identification;
/// Gaussians that come out static are removed. Returns the removal count and
/// the keep mask (for optimizer-state remapping).
pub fn prune_dynamic_world(
    set: &mut GaussianSet,
    masks: &[Image],
    poses: &PoseSet,
    rendered_depths: &[Image],
    threshold: f64,
) -> Result<(usize, Vec<bool>)> {
    let nd = set.dynamics.len();
    let nf = set.n_frames;
    let mut keep = vec![true; nd];
    for i in 0..nd {
        let traj = set.dynamics.trajectory(i);
        let mut video_pos = Vec::with_capacity(nf);
        for f in 0..nf {
            let cam = poses.camera(f);
            let x_cam = cam.to_camera(&traj.eval(set.frame_time(f))?);
            if x_cam.z <= 1e-4 {
                // Behind the camera: counts as out of frame.
                video_pos.push(Vector3::new(10.0, 10.0, 1.0));
                continue;
            }
            let px = cam.fx * x_cam.x / x_cam.z + cam.cx;
            let py = cam.fy * x_cam.y / x_cam.z + cam.cy;
            video_pos.push(Vector3::new(
                2.0 * px / cam.width as f64 - 1.0,
                2.0 * py / cam.height as f64 - 1.0,
                x_cam.z,
            ));
        }
        let (class, _, _) = classify_dynamic(&video_pos, masks, rendered_depths, threshold);
        keep[i] = class == Classification::Dynamic;
    }
    let removed = keep.iter().filter(|&&k| !k).count();
    if removed > 0 {
        set.dynamics.retain(&keep);
    }
    Ok((removed, keep))
}
