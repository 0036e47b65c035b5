//! Video-to-world transform: turn trained video Gaussians into the initial
//! world Gaussian set.
//!
//! Each video Gaussian is classified dynamic or static from its trajectory
//! through the dynamic masks (with occlusion handling against the rendered
//! depths), its trajectory is mapped through the camera poses into world
//! space, static Gaussians collapse to a single pose, dynamic ones are
//! re-fit as spline + quaternion polynomial, and scalings are re-fit so the
//! projected 2D covariance is preserved. Opacity and irradiance are
//! inherited unchanged.

use crate::geometry::camera::Camera;
use crate::geometry::pose::PoseSet;
use crate::geometry::quat::{self, quat_conj, quat_mul, QuatPolynomial};
use crate::geometry::spline::SplineTrajectory;
use crate::img::Image;
use crate::rasterizer::project_gaussian_2d;
use crate::scene::init::knot_frames;
use crate::scene::{covariance_backward, GaussianSet, Space, StaticBlock};
use crate::{Error, Result};
use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// A Gaussian is dynamic when it spends more than this fraction of frames in
/// the dynamic mask (strict inequality).
pub const DYNAMIC_THRESHOLD: f64 = 0.1;
/// Relative slack when testing occlusion against the rendered depth: the
/// Gaussian itself contributes to that depth, so an exact comparison would
/// mark surface Gaussians as occluded.
pub const OCCLUSION_MARGIN: f64 = 0.05;
/// Scaling refit: initial gradient step, iteration cap, relative-decrease stop.
pub const REFIT_STEP: f64 = 1e-2;
pub const REFIT_MAX_ITERS: usize = 1000;
pub const REFIT_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct V2wConfig {
    pub dynamic_threshold: f64,
    /// Control-point spacing (frames) when re-sampling dynamic trajectories.
    pub ctrl_every: usize,
    pub refit_max_iters: usize,
}

impl Default for V2wConfig {
    fn default() -> Self {
        V2wConfig {
            dynamic_threshold: DYNAMIC_THRESHOLD,
            ctrl_every: 4,
            refit_max_iters: REFIT_MAX_ITERS,
        }
    }
}

/// Per-set classification summary emitted after the transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub n_frames: usize,
    pub threshold: f64,
    pub n_dynamic: usize,
    pub n_static: usize,
    pub n_dropped: usize,
    /// Frames counted dynamic, per surviving Gaussian (dynamic-first order).
    pub nd_counts: Vec<usize>,
    /// Frames where the Gaussian was occluded, per surviving Gaussian.
    pub occluded_counts: Vec<usize>,
    /// Scaling refits that hit the iteration cap without converging.
    pub refit_unconverged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Dynamic,
    Static,
}

/// Classify one trajectory from its per-frame video-space positions.
///
/// A frame counts toward N_d when the projected position lands on a
/// dynamic-mask pixel (nearest lookup) and the trajectory depth does not
/// exceed the rendered depth there by more than the occlusion margin.
pub fn classify_dynamic(
    video_positions: &[Vector3<f64>],
    masks: &[Image],
    rendered_depths: &[Image],
    threshold: f64,
) -> (Classification, usize, usize) {
    let n_frames = video_positions.len();
    let mut n_d = 0usize;
    let mut occluded = 0usize;
    for (t, p) in video_positions.iter().enumerate() {
        let mask = &masks[t];
        let (w, h) = (mask.w, mask.h);
        let px = (p.x + 1.0) * w as f64 / 2.0;
        let py = (p.y + 1.0) * h as f64 / 2.0;
        let xi = px.round();
        let yi = py.round();
        if xi < 0.0 || yi < 0.0 || xi as usize >= w || yi as usize >= h {
            continue;
        }
        let (xi, yi) = (xi as usize, yi as usize);
        let d = rendered_depths[t].at(yi, xi, 0);
        if p.z > d * (1.0 + OCCLUSION_MARGIN) {
            occluded += 1;
            continue;
        }
        if mask.at(yi, xi, 0) > 0.5 {
            n_d += 1;
        }
    }
    let class = if (n_d as f64) / (n_frames as f64) > threshold {
        Classification::Dynamic
    } else {
        Classification::Static
    };
    (class, n_d, occluded)
}

/// Map a video trajectory (positions and unit rotations per frame) to world
/// space through the per-frame poses: the video position is unprojected with
/// the shared intrinsics, then carried camera-to-world.
pub fn transform_trajectory(
    video_positions: &[Vector3<f64>],
    video_rotations: &[Vector4<f64>],
    poses: &PoseSet,
) -> Result<Vec<(Vector3<f64>, Vector4<f64>)>> {
    if video_positions.len() != poses.n_frames() || video_rotations.len() != poses.n_frames() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory of {} frames vs {} poses",
            video_positions.len(),
            poses.n_frames()
        )));
    }
    let (w, h) = (poses.intrinsics.w as f64, poses.intrinsics.h as f64);
    let mut out = Vec::with_capacity(video_positions.len());
    for (t, (p, q)) in video_positions.iter().zip(video_rotations).enumerate() {
        let cam = poses.camera(t);
        let u = Vector2::new((p.x + 1.0) * w / 2.0, (p.y + 1.0) * h / 2.0);
        let x_cam = cam.unproject(&u, p.z)?;
        // Camera-to-world is the inverse of the stored world-to-camera pose.
        let rot = cam.rot_matrix();
        let pos_w = rot.transpose() * (x_cam - cam.translation);
        let q_c2w = quat_conj(&cam.rotation);
        let q_w = quat_mul(&q_c2w, &(q / q.norm()));
        out.push((pos_w, q_w));
    }
    Ok(out)
}

/// Project a world position back into video space under one pose (used for
/// round-trip checks and dynamic re-identification in world space).
pub fn world_to_video(pos_w: &Vector3<f64>, cam: &Camera) -> Result<Vector3<f64>> {
    let x_cam = cam.to_camera(pos_w);
    let u = cam.project(&x_cam)?;
    Ok(Vector3::new(
        u.x * 2.0 / cam.width as f64 - 1.0,
        u.y * 2.0 / cam.height as f64 - 1.0,
        x_cam.z,
    ))
}

/// Collapse a world trajectory of a static Gaussian to one position and
/// rotation: arithmetic mean and rotation average.
pub fn collapse_static(
    world: &[(Vector3<f64>, Vector4<f64>)],
) -> Result<(Vector3<f64>, Vector4<f64>)> {
    if world.is_empty() {
        return Err(Error::EmptyInput("collapse_static".into()));
    }
    let mean: Vector3<f64> =
        world.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / world.len() as f64;
    let quats: Vec<Vector4<f64>> = world.iter().map(|(_, q)| q / q.norm()).collect();
    let rot = quat::quat_average(&quats)?;
    Ok((mean, rot))
}

/// Re-fit a dynamic world trajectory: control points sampled every
/// `ctrl_every` frames (last frame always included) and a least-squares
/// cubic quaternion polynomial over all frames.
pub fn refit_dynamic(
    world: &[(Vector3<f64>, Vector4<f64>)],
    ctrl_every: usize,
) -> Result<(SplineTrajectory, QuatPolynomial)> {
    let n = world.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let frames = knot_frames(n, ctrl_every);
    let times: Vec<f64> = frames.iter().map(|&f| f as f64 / (n - 1) as f64).collect();
    let points: Vec<Vector3<f64>> = frames.iter().map(|&f| world[f].0).collect();
    let traj = SplineTrajectory::new(times, points)?;
    let samples: Vec<(f64, Vector4<f64>)> = world
        .iter()
        .enumerate()
        .map(|(t, (_, q))| (t as f64 / (n - 1) as f64, q / q.norm()))
        .collect();
    let fit = quat::quat_poly_fit(&samples)?;
    Ok((traj, fit.poly))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingRefitReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Re-fit the log scalings of one world Gaussian so its projected 2D
/// covariance matches the recorded video 2D covariance in every frame, by
/// monotone line-searched gradient descent on the summed Frobenius residual.
pub fn refit_scaling(
    video_cov2d: &[Option<Matrix2<f64>>],
    world_frames: &[(Vector3<f64>, Vector4<f64>)],
    poses: &PoseSet,
    init_log_scaling: Vector3<f64>,
    max_iters: usize,
) -> (Vector3<f64>, ScalingRefitReport) {
    let eval = |ls: &Vector3<f64>| -> (f64, Vector3<f64>) {
        let mut f = 0.0;
        let mut g = Vector3::zeros();
        for (t, vc) in video_cov2d.iter().enumerate() {
            let Some(vc) = vc else { continue };
            let (pos, rot) = &world_frames[t];
            let cam = poses.camera(t);
            let Some((_, wc, _)) = project_gaussian_2d(pos, rot, ls, &cam) else {
                continue;
            };
            let d = vc - wc;
            let norm = d.norm();
            f += norm;
            if norm > 1e-12 {
                // d||D||/d cov_w = -D / ||D||, chained through P sigma P^T.
                let g2 = -d / norm;
                let x_cam = cam.to_camera(pos);
                let Ok(j) = cam.projection_jacobian(&x_cam) else {
                    continue;
                };
                let p = j * cam.rot_matrix();
                let g_sigma = p.transpose() * g2 * p;
                let (_, gls) = covariance_backward(rot, ls, &g_sigma);
                g += gls;
            }
        }
        (f, g)
    };
    let mut ls = init_log_scaling;
    let (mut f, mut g) = eval(&ls);
    let initial = f;
    let mut step = REFIT_STEP;
    let mut converged = false;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let cand = ls - g * step;
        let (fc, gc) = eval(&cand);
        if fc <= f {
            let rel = (f - fc) / f.max(1e-300);
            ls = cand;
            f = fc;
            g = gc;
            step = (step * 1.5).min(1.0);
            if rel < REFIT_REL_TOL {
                converged = true;
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-14 {
                converged = true;
                break;
            }
        }
    }
    (
        ls,
        ScalingRefitReport {
            initial_residual: initial,
            final_residual: f,
            iters,
            converged,
        },
    )
}

/// Full transform of a trained video set into the initial world set.
///
/// Per Gaussian: evaluate the video trajectory at all frame times, classify,
/// transform to world, collapse or re-fit, re-fit scalings, and inherit
/// opacity and irradiance unchanged. Gaussians whose evaluation or re-fit
/// fails are dropped and counted.
pub fn transform_set(
    video: &GaussianSet,
    poses: &PoseSet,
    masks: &[Image],
    rendered_depths: &[Image],
    config: &V2wConfig,
) -> Result<(GaussianSet, IdentificationReport)> {
    if video.space != Space::Video {
        return Err(Error::InvalidConfig(
            "transform_set expects a video set".into(),
        ));
    }
    let nf = video.n_frames;
    if masks.len() != nf || rendered_depths.len() != nf || poses.n_frames() != nf {
        return Err(Error::ShapeMismatch(format!(
            "{nf} frames vs {} masks / {} depths / {} poses",
            masks.len(),
            rendered_depths.len(),
            poses.n_frames()
        )));
    }
    let times: Vec<f64> = (0..nf).map(|t| video.frame_time(t)).collect();
    let knots = knot_frames(nf, config.ctrl_every);
    let knot_times: Vec<f64> = knots.iter().map(|&f| times[f]).collect();
    let ortho = Camera::orthographic(poses.intrinsics.w, poses.intrinsics.h);

    struct DynOut {
        traj: SplineTrajectory,
        poly: QuatPolynomial,
        log_scaling: Vector3<f64>,
        logit_opacity: f64,
        log_irradiance: Vector3<f64>,
        n_d: usize,
        occluded: usize,
    }
    struct StaticOut {
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scaling: Vector3<f64>,
        logit_opacity: f64,
        log_irradiance: Vector3<f64>,
        n_d: usize,
        occluded: usize,
    }

    let mut dyn_out: Vec<DynOut> = Vec::new();
    let mut static_out: Vec<StaticOut> = Vec::new();
    let mut n_dropped = 0usize;
    let mut refit_unconverged = 0usize;
    for i in 0..video.len() {
        let g = video.gaussian(i);
        let frames: Result<Vec<(Vector3<f64>, Vector4<f64>)>> =
            times.iter().map(|&t| g.eval_at_time(t)).collect();
        let Ok(frames) = frames else {
            n_dropped += 1;
            continue;
        };
        let video_pos: Vec<Vector3<f64>> = frames.iter().map(|f| f.0).collect();
        let video_rot: Vec<Vector4<f64>> = frames.iter().map(|f| f.1).collect();
        let video_cov: Vec<Option<Matrix2<f64>>> = frames
            .iter()
            .map(|(p, q)| project_gaussian_2d(p, q, &g.log_scaling, &ortho).map(|r| r.1))
            .collect();
        let (class, n_d, occluded) =
            classify_dynamic(&video_pos, masks, rendered_depths, config.dynamic_threshold);
        let Ok(world) = transform_trajectory(&video_pos, &video_rot, poses) else {
            n_dropped += 1;
            continue;
        };
        match class {
            Classification::Static => {
                let Ok((position, rotation)) = collapse_static(&world) else {
                    n_dropped += 1;
                    continue;
                };
                let world_frames = vec![(position, rotation); nf];
                let (ls, rep) = refit_scaling(
                    &video_cov,
                    &world_frames,
                    poses,
                    g.log_scaling,
                    config.refit_max_iters,
                );
                if !rep.converged {
                    refit_unconverged += 1;
                }
                static_out.push(StaticOut {
                    position,
                    rotation,
                    log_scaling: ls,
                    logit_opacity: g.logit_opacity,
                    log_irradiance: g.log_irradiance,
                    n_d,
                    occluded,
                });
            }
            Classification::Dynamic => {
                let Ok((traj, poly)) = refit_dynamic(&world, config.ctrl_every) else {
                    n_dropped += 1;
                    continue;
                };
                let refit_frames: Result<Vec<(Vector3<f64>, Vector4<f64>)>> = times
                    .iter()
                    .map(|&t| Ok((traj.eval(t)?, poly.eval(t)?)))
                    .collect();
                let Ok(refit_frames) = refit_frames else {
                    n_dropped += 1;
                    continue;
                };
                let (ls, rep) = refit_scaling(
                    &video_cov,
                    &refit_frames,
                    poses,
                    g.log_scaling,
                    config.refit_max_iters,
                );
                if !rep.converged {
                    refit_unconverged += 1;
                }
                dyn_out.push(DynOut {
                    traj,
                    poly,
                    log_scaling: ls,
                    logit_opacity: g.logit_opacity,
                    log_irradiance: g.log_irradiance,
                    n_d,
                    occluded,
                });
            }
        }
    }

    let mut world = GaussianSet {
        space: Space::World,
        n_frames: nf,
        dynamics: crate::scene::DynBlock {
            knot_times: knot_times.clone(),
            ..Default::default()
        },
        statics: StaticBlock::default(),
    };
    let mut nd_counts = Vec::with_capacity(dyn_out.len() + static_out.len());
    let mut occluded_counts = Vec::with_capacity(dyn_out.len() + static_out.len());
    for d in &dyn_out {
        world.dynamics.push(
            &d.traj.points,
            &d.poly,
            d.log_scaling,
            d.logit_opacity,
            d.log_irradiance,
        );
        nd_counts.push(d.n_d);
        occluded_counts.push(d.occluded);
    }
    for s in &static_out {
        world.statics.push(
            s.position,
            s.rotation,
            s.log_scaling,
            s.logit_opacity,
            s.log_irradiance,
        );
        nd_counts.push(s.n_d);
        occluded_counts.push(s.occluded);
    }
    world.validate()?;
    let report = IdentificationReport {
        n_frames: nf,
        threshold: config.dynamic_threshold,
        n_dynamic: dyn_out.len(),
        n_static: static_out.len(),
        n_dropped,
        nd_counts,
        occluded_counts,
        refit_unconverged,
    };
    Ok((world, report))
}
