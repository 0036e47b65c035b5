//! Runtime finite-difference verification of every analytic gradient path,
//! printing one pass/fail line per suite.
//!
//! Convention: central differences with step 1e-4 (1e-6 where a perturbation
//! moves warp sampling points), pass when |g − fd| ≤ 1e-4·|fd| + 1e-6.
//!
//! Several differentiated functions are only piecewise smooth: the renderer
//! has hard contribution and Mahalanobis cutoffs, the tone mapper uses ReLU
//! units, and the pixel losses have L1 kinks. A probe that happens to
//! straddle such a boundary produces a meaningless finite difference, so each
//! probe is evaluated at two step sizes and skipped as non-smooth when the
//! two estimates disagree; skips are reported but are not failures.

use anyhow::{bail, Result};
use nalgebra::{Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use splat4d::geometry::pose::PoseSet;
use splat4d::geometry::{Camera, Intrinsics, QuatPolynomial};
use splat4d::img::Image;
use splat4d::losses::motion::{arap_loss, smoothness_losses, ArapGraph};
use splat4d::losses::warp::{reprojection_loss, tlr_loss};
use splat4d::losses::{depth_loss, rgb_loss, track_flow_loss};
use splat4d::rasterizer::{render, render_backward, FlowTarget, RenderUpstream};
use splat4d::scene::{GaussianSet, Space};
use splat4d::tonemap::{ToneMapper, HIDDEN};

const STEP: f64 = 1e-4;
/// Step for perturbations that move warp sampling points across pixels.
const WARP_STEP: f64 = 1e-6;

struct Suite {
    name: &'static str,
    worst: f64,
    failed: usize,
    checked: usize,
    skipped: usize,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Suite {
            name,
            worst: 0.0,
            failed: 0,
            checked: 0,
            skipped: 0,
        }
    }

    /// Check analytic gradient `g` against a central difference of the scalar
    /// `f`, where `f(h)` evaluates the loss with the parameter offset by `h`.
    /// The difference is formed at `step` and `step/2`; disagreement between
    /// the two marks the sample point as non-smooth and skips the check.
    fn probe(&mut self, g: f64, step: f64, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<()> {
        let full = (f(step)? - f(-step)?) / (2.0 * step);
        let half = (f(step / 2.0)? - f(-step / 2.0)?) / step;
        if (full - half).abs() > 1e-3 * full.abs().max(half.abs()) + 1e-4 {
            log::debug!(
                "{} #{}: non-smooth (fd {full} vs {half})",
                self.name,
                self.checked
            );
            self.skipped += 1;
            return Ok(());
        }
        let err = (g - half).abs();
        let tol = 1e-4 * half.abs() + 1e-6;
        self.checked += 1;
        if err - tol > self.worst {
            self.worst = err - tol;
            if err > tol {
                log::debug!(
                    "{} #{}: analytic {g} vs fd {half}",
                    self.name,
                    self.checked - 1
                );
            }
        }
        if err > tol {
            self.failed += 1;
        }
        Ok(())
    }

    /// Print the verdict; returns whether the suite passed.
    fn report(&self) -> bool {
        let skips = if self.skipped > 0 {
            format!(", {} skipped as non-smooth", self.skipped)
        } else {
            String::new()
        };
        if self.failed == 0 && self.checked > 0 {
            println!("PASS {} ({} gradients{})", self.name, self.checked, skips);
            true
        } else {
            println!(
                "FAIL {} ({} of {} gradients, worst excess {:.3e}{})",
                self.name, self.failed, self.checked, self.worst, skips
            );
            false
        }
    }
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut StdRng) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Small world-space scene with dynamic and static Gaussians in front of a
/// perspective camera; splats a couple of pixels across.
fn random_scene(rng: &mut StdRng) -> (GaussianSet, Camera, Camera) {
    let knots = vec![0.0, 0.5, 1.0];
    let nk = knots.len();
    let mut set = GaussianSet::empty(Space::World, 4, knots);
    for _ in 0..5 {
        let base = Vector3::new(
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(0.8..3.0),
        );
        let ctrl: Vec<Vector3<f64>> = (0..nk)
            .map(|_| {
                base + Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                )
            })
            .collect();
        let quat = QuatPolynomial {
            coeffs: [
                Vector4::new(
                    1.0,
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                ),
                Vector4::new(0.0, rng.gen_range(-0.1..0.1), 0.0, 0.0),
                Vector4::zeros(),
                Vector4::zeros(),
            ],
        };
        set.dynamics.push(
            &ctrl,
            &quat,
            Vector3::new(
                rng.gen_range(-3.2..-2.2),
                rng.gen_range(-3.2..-2.2),
                rng.gen_range(-3.2..-2.2),
            ),
            rng.gen_range(-0.5..1.5),
            Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
        );
    }
    for _ in 0..4 {
        set.statics.push(
            Vector3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(0.8..3.0),
            ),
            Vector4::new(
                1.0,
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ),
            Vector3::new(
                rng.gen_range(-3.2..-2.2),
                rng.gen_range(-3.2..-2.2),
                rng.gen_range(-3.2..-2.2),
            ),
            rng.gen_range(-0.5..1.5),
            Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ),
        );
    }
    let intr = Intrinsics {
        fx: 24.0,
        fy: 24.0,
        cx: 12.0,
        cy: 8.0,
        w: 24,
        h: 16,
    };
    let cam = Camera::perspective(
        &intr,
        Vector4::new(
            1.0,
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            0.0,
        ),
        Vector3::new(rng.gen_range(-0.05..0.05), 0.0, 0.0),
    )
    .unwrap();
    let cam2 = Camera::perspective(
        &intr,
        Vector4::new(1.0, 0.0, rng.gen_range(-0.05..0.05), 0.0),
        Vector3::new(0.05, rng.gen_range(-0.05..0.05), 0.0),
    )
    .unwrap();
    (set, cam, cam2)
}

fn intr_of(cam: &Camera) -> Intrinsics {
    Intrinsics {
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        w: cam.width,
        h: cam.height,
    }
}

fn rasterizer_suites(seed: u64) -> Result<Vec<Suite>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (set, cam, cam2) = random_scene(&mut rng);
    let t = 0.35;
    let target = FlowTarget {
        t2: 0.7,
        cam2: cam2.clone(),
    };
    let up_hdr = random_image(16, 24, 3, &mut rng);
    let up_depth = random_image(16, 24, 1, &mut rng);
    let up_flow = random_image(16, 24, 2, &mut rng);

    let scalar = |set: &GaussianSet, cam: &Camera, cam2: &Camera| -> Result<f64> {
        let target = FlowTarget {
            t2: 0.7,
            cam2: cam2.clone(),
        };
        let out = render(set, cam, t, Some(&target))?;
        let flow = out.flow.as_ref().unwrap();
        let mut l = 0.0;
        for (a, b) in out.hdr.data.iter().zip(&up_hdr.data) {
            l += a * b;
        }
        for (a, b) in out.depth.data.iter().zip(&up_depth.data) {
            l += a * b;
        }
        for (a, b) in flow.data.iter().zip(&up_flow.data) {
            l += a * b;
        }
        Ok(l)
    };
    let upstream = RenderUpstream {
        hdr: Some(&up_hdr),
        depth: Some(&up_depth),
        alpha: None,
        flow: Some(&up_flow),
    };
    let grads = render_backward(&set, &cam, t, Some(&target), &upstream)?;

    let mut params = Suite::new("rasterizer parameter gradients");
    // Probes over a subset of Gaussians exercise every parameter kind while
    // keeping the full suite fast.
    let nk = set.dynamics.n_knots();
    for i in [0usize, 2, 4] {
        for k in 0..nk {
            for c in 0..3 {
                params.probe(grads.ctrl[i * nk + k][c], STEP, &mut |h| {
                    let mut p = set.clone();
                    p.dynamics.ctrl[i * nk + k][c] += h;
                    scalar(&p, &cam, &cam2)
                })?;
            }
        }
        for k in 0..2 {
            for c in 0..4 {
                params.probe(grads.quat_coeffs[i * 4 + k][c], STEP, &mut |h| {
                    let mut p = set.clone();
                    p.dynamics.quat_coeffs[i * 4 + k][c] += h;
                    scalar(&p, &cam, &cam2)
                })?;
            }
        }
        for c in 0..3 {
            params.probe(grads.log_scaling[i][c], STEP, &mut |h| {
                let mut p = set.clone();
                p.dynamics.log_scaling[i][c] += h;
                scalar(&p, &cam, &cam2)
            })?;
            params.probe(grads.log_irradiance[i][c], STEP, &mut |h| {
                let mut p = set.clone();
                p.dynamics.log_irradiance[i][c] += h;
                scalar(&p, &cam, &cam2)
            })?;
        }
        params.probe(grads.logit_opacity[i], STEP, &mut |h| {
            let mut p = set.clone();
            p.dynamics.logit_opacity[i] += h;
            scalar(&p, &cam, &cam2)
        })?;
    }
    let nd = set.dynamics.len();
    for j in [0usize, 3] {
        for c in 0..3 {
            params.probe(grads.static_position[j][c], STEP, &mut |h| {
                let mut p = set.clone();
                p.statics.position[j][c] += h;
                scalar(&p, &cam, &cam2)
            })?;
        }
        for c in 0..4 {
            params.probe(grads.static_rotation[j][c], STEP, &mut |h| {
                let mut p = set.clone();
                p.statics.rotation[j][c] += h;
                scalar(&p, &cam, &cam2)
            })?;
        }
        params.probe(grads.logit_opacity[nd + j], STEP, &mut |h| {
            let mut p = set.clone();
            p.statics.logit_opacity[j] += h;
            scalar(&p, &cam, &cam2)
        })?;
    }

    let mut campose = Suite::new("rasterizer camera gradients");
    for c in 0..4 {
        // Perturb the raw quaternion; renormalization is part of the
        // constructor, matching the gradient's convention.
        campose.probe(grads.cam_rotation[c], STEP, &mut |h| {
            let mut q = cam.rotation;
            q[c] += h;
            let p = Camera::perspective(&intr_of(&cam), q, cam.translation)?;
            scalar(&set, &p, &cam2)
        })?;
    }
    for c in 0..3 {
        campose.probe(grads.cam_translation[c], STEP, &mut |h| {
            let mut tr = cam.translation;
            tr[c] += h;
            let p = Camera::perspective(&intr_of(&cam), cam.rotation, tr)?;
            scalar(&set, &p, &cam2)
        })?;
    }
    for c in 0..3 {
        campose.probe(grads.cam2_translation[c], STEP, &mut |h| {
            let mut tr = cam2.translation;
            tr[c] += h;
            let p = Camera::perspective(&intr_of(&cam2), cam2.rotation, tr)?;
            scalar(&set, &cam, &p)
        })?;
    }
    Ok(vec![params, campose])
}

fn tonemap_suite(seed: u64) -> Result<Suite> {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(101));
    let mut suite = Suite::new("tone mapper gradients");
    let hdr = random_image(6, 7, 3, &mut rng).map(|v| v + 0.05);
    let up = random_image(6, 7, 3, &mut rng);
    let tm = ToneMapper::new(seed);
    let dt = 0.4;
    let scalar = |tm: &ToneMapper, hdr: &Image| -> f64 {
        tm.tone_map(hdr, dt)
            .data
            .iter()
            .zip(&up.data)
            .map(|(a, b)| a * b)
            .sum()
    };
    let (g_hdr, g_tm) = tm.tone_map_backward(&hdr, dt, &up);
    for idx in [0usize, 17, 40, hdr.data.len() - 1] {
        suite.probe(g_hdr.data[idx], WARP_STEP, &mut |h| {
            let mut p = hdr.clone();
            p.data[idx] += h;
            Ok(scalar(&tm, &p))
        })?;
    }
    for ch in 0..3 {
        for i in [0usize, HIDDEN / 2, HIDDEN - 1] {
            for which in 0..3 {
                let g = match which {
                    0 => g_tm.channels[ch].w1[i],
                    1 => g_tm.channels[ch].b1[i],
                    _ => g_tm.channels[ch].w2[i],
                };
                suite.probe(g, WARP_STEP, &mut |h| {
                    let mut p = tm.clone();
                    match which {
                        0 => p.channels[ch].w1[i] += h,
                        1 => p.channels[ch].b1[i] += h,
                        _ => p.channels[ch].w2[i] += h,
                    }
                    Ok(scalar(&p, &hdr))
                })?;
            }
        }
        suite.probe(g_tm.channels[ch].b2, WARP_STEP, &mut |h| {
            let mut p = tm.clone();
            p.channels[ch].b2 += h;
            Ok(scalar(&p, &hdr))
        })?;
    }
    // Unit-exposure loss closes over the weights only.
    let (_, g_ue) = tm.unit_exposure_loss(0.73);
    suite.probe(g_ue.channels[1].b2, WARP_STEP, &mut |h| {
        let mut p = tm.clone();
        p.channels[1].b2 += h;
        Ok(p.unit_exposure_loss(0.73).0)
    })?;
    Ok(suite)
}

fn loss_suites(seed: u64) -> Result<Vec<Suite>> {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(202));
    let mut img_losses = Suite::new("image loss gradients");
    let (h, w) = (14, 13);
    let a = random_image(h, w, 3, &mut rng);
    let b = random_image(h, w, 3, &mut rng);
    let (_, g) = rgb_loss(&a, &b)?;
    for idx in [0usize, 100, a.data.len() - 1] {
        img_losses.probe(g.data[idx], STEP, &mut |s| {
            let mut p = a.clone();
            p.data[idx] += s;
            Ok(rgb_loss(&p, &b)?.0)
        })?;
    }
    let d = random_image(h, w, 1, &mut rng).map(|v| v + 0.5);
    let dp = random_image(h, w, 1, &mut rng).map(|v| v + 0.5);
    let (_, gd) = depth_loss(&d, &dp)?;
    for idx in [3usize, 77] {
        img_losses.probe(gd.data[idx], STEP, &mut |s| {
            let mut p = d.clone();
            p.data[idx] += s;
            Ok(depth_loss(&p, &dp)?.0)
        })?;
    }
    let f = random_image(h, w, 2, &mut rng);
    let ft = random_image(h, w, 2, &mut rng);
    let valid = Image::from_fn(h, w, 1, |y, x, _| ((y + x) % 3 != 0) as usize as f64);
    let (_, gf, _) = track_flow_loss(&f, &ft, &valid)?;
    for idx in [2usize, 51, 200] {
        img_losses.probe(gf.data[idx], STEP, &mut |s| {
            let mut p = f.clone();
            p.data[idx] += s;
            Ok(track_flow_loss(&p, &ft, &valid)?.0)
        })?;
    }

    let mut motion = Suite::new("motion loss gradients");
    let (set, _, _) = random_scene(&mut rng);
    let block = &set.dynamics;
    let graph = ArapGraph::build(block, 0.5, 3)?;
    let (t, t2) = (0.3, 0.6);
    let (_, g_arap) = arap_loss(block, &graph, t, t2)?;
    let nk = block.n_knots();
    for (i, k, c) in [(0usize, 0usize, 0usize), (1, 1, 1), (3, 2, 2)] {
        motion.probe(g_arap[i * nk + k][c], STEP, &mut |s| {
            let mut p = block.clone();
            p.ctrl[i * nk + k][c] += s;
            Ok(arap_loss(&p, &graph, t, t2)?.0)
        })?;
    }
    let sm = smoothness_losses(block, set.n_frames)?;
    for (i, k, c) in [(0usize, 1usize, 0usize), (2, 0, 2)] {
        motion.probe(sm.grad_ctrl_vel[i * nk + k][c], STEP, &mut |s| {
            let mut p = block.clone();
            p.ctrl[i * nk + k][c] += s;
            Ok(smoothness_losses(&p, set.n_frames)?.vel)
        })?;
        motion.probe(sm.grad_ctrl_acc[i * nk + k][c], STEP, &mut |s| {
            let mut p = block.clone();
            p.ctrl[i * nk + k][c] += s;
            Ok(smoothness_losses(&p, set.n_frames)?.acc)
        })?;
    }
    for (i, k, c) in [(1usize, 0usize, 1usize), (4, 1, 3)] {
        motion.probe(sm.grad_quat_vel[i * 4 + k][c], STEP, &mut |s| {
            let mut p = block.clone();
            p.quat_coeffs[i * 4 + k][c] += s;
            Ok(smoothness_losses(&p, set.n_frames)?.vel)
        })?;
    }

    let mut warp = Suite::new("warp loss gradients");
    let hdr_a = random_image(h, w, 3, &mut rng).map(|v| v + 0.2);
    let hdr_b = random_image(h, w, 3, &mut rng).map(|v| v + 0.2);
    let flow = random_image(h, w, 2, &mut rng).map(|v| 2.0 * v - 1.0);
    let dep_a = random_image(h, w, 1, &mut rng).map(|v| v + 1.0);
    let dep_b = random_image(h, w, 1, &mut rng).map(|v| v + 1.0);
    let (_, ga, gb) = tlr_loss(&hdr_a, &hdr_b, &flow, &dep_a, &dep_b)?;
    for idx in [5usize, 60, 300] {
        warp.probe(ga.data[idx], STEP, &mut |s| {
            let mut p = hdr_a.clone();
            p.data[idx] += s;
            Ok(tlr_loss(&p, &hdr_b, &flow, &dep_a, &dep_b)?.0)
        })?;
        warp.probe(gb.data[idx], STEP, &mut |s| {
            let mut p = hdr_b.clone();
            p.data[idx] += s;
            Ok(tlr_loss(&hdr_a, &p, &flow, &dep_a, &dep_b)?.0)
        })?;
    }
    let intr = Intrinsics {
        fx: 20.0,
        fy: 20.0,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        w,
        h,
    };
    let mut poses = PoseSet::identity(intr, 3);
    for (i, q) in poses.rotations.iter_mut().enumerate() {
        q[1] += 0.03 * i as f64;
        q[3] -= 0.02 * i as f64;
    }
    for (i, tr) in poses.translations.iter_mut().enumerate() {
        tr.x = 0.05 * i as f64;
    }
    let mask = Image::from_fn(h, w, 1, |y, _, _| (y < 3) as usize as f64);
    let (_, pg) = reprojection_loss(&hdr_a, &hdr_b, &poses, 0, 1, &dep_a, &mask)?;
    for (frame, c) in [(0usize, 0usize), (0, 2), (1, 1), (1, 3)] {
        warp.probe(pg.rotations[frame][c], WARP_STEP, &mut |s| {
            let mut p = poses.clone();
            p.rotations[frame][c] += s;
            Ok(reprojection_loss(&hdr_a, &hdr_b, &p, 0, 1, &dep_a, &mask)?.0)
        })?;
    }
    for (frame, c) in [(0usize, 0usize), (1, 2)] {
        warp.probe(pg.translations[frame][c], WARP_STEP, &mut |s| {
            let mut p = poses.clone();
            p.translations[frame][c] += s;
            Ok(reprojection_loss(&hdr_a, &hdr_b, &p, 0, 1, &dep_a, &mask)?.0)
        })?;
    }
    Ok(vec![img_losses, motion, warp])
}

pub fn run(seed: u64) -> Result<()> {
    let mut all = rasterizer_suites(seed)?;
    all.push(tonemap_suite(seed)?);
    all.extend(loss_suites(seed)?);
    let ok = all.iter().map(|s| s.report()).fold(true, |a, b| a && b);
    if !ok {
        bail!("gradient checks failed");
    }
    Ok(())
}
