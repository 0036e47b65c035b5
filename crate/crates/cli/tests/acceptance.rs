//! The acceptance gate: nine criteria covering gradients, rasterizer
//! correctness, the video-to-world oracles, an end-to-end desk-scale
//! reconstruction, ablation directions, determinism, and the unit-exposure
//! anchor. Each criterion prints one PASS/FAIL line (run with
//! `cargo test --test acceptance -- --nocapture` to see them); the test
//! fails if any criterion fails.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use splat4d::geometry::{Camera, Intrinsics, QuatPolynomial};
use splat4d::metrics::MetricReport;
use splat4d::pipeline::{run_stage2, TrainConfig};
use splat4d::rasterizer::{project_gaussian_2d, render, render_brute, FlowTarget};
use splat4d::scene::init::{init_video_gaussians, InitConfig};
use splat4d::scene::{GaussianSet, Space};
use splat4d::synthdata::generate_scene;
use splat4d::tonemap::ToneMapper;
use splat4d::v2w::{classify_dynamic, refit_scaling, Classification, REFIT_MAX_ITERS};
use splat4d_cli::checkpoint::{load, Checkpoint};
use splat4d_cli::cmd::eval::evaluate;
use splat4d_cli::cmd::noised_poses;
use splat4d_cli::config::RunConfig;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

#[derive(Default)]
struct Criteria {
    failures: Vec<String>,
}

impl Criteria {
    fn record(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {verdict} — {name}: {detail}");
        if !pass {
            self.failures
                .push(format!("criterion {n} ({name}): {detail}"));
        }
    }
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(args)
        .output()
        .expect("spawn")
}

fn bin_ok(args: &[&str]) {
    let out = bin(args);
    assert!(
        out.status.success(),
        "`splat4d {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_report(path: &Path) -> MetricReport {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Random scene for the tiled-vs-brute-force comparison: up to 100 Gaussians
/// in front of a 64x64 camera, video or world space.
fn random_render_set(seed: u64, n_dyn: usize, n_static: usize, space: Space) -> GaussianSet {
    let mut rng = StdRng::seed_from_u64(seed);
    let knots = vec![0.0, 0.4, 1.0];
    let nk = knots.len();
    let mut set = GaussianSet::empty(space, 4, knots);
    for _ in 0..n_dyn {
        let base = Vector3::new(
            rng.gen_range(-0.8..0.8),
            rng.gen_range(-0.8..0.8),
            rng.gen_range(0.5..3.0),
        );
        let ctrl: Vec<Vector3<f64>> = (0..nk)
            .map(|_| {
                base + Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.2..0.2),
                )
            })
            .collect();
        let quat = QuatPolynomial {
            coeffs: [
                Vector4::new(
                    1.0,
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ),
                Vector4::new(0.0, rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0),
                Vector4::zeros(),
                Vector4::zeros(),
            ],
        };
        set.dynamics.push(
            &ctrl,
            &quat,
            Vector3::new(
                rng.gen_range(-3.5..-1.8),
                rng.gen_range(-3.5..-1.8),
                rng.gen_range(-3.5..-1.8),
            ),
            rng.gen_range(-1.0..2.0),
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        );
    }
    for _ in 0..n_static {
        set.statics.push(
            Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(0.5..3.0),
            ),
            Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            ),
            Vector3::new(
                rng.gen_range(-3.5..-1.8),
                rng.gen_range(-3.5..-1.8),
                rng.gen_range(-3.5..-1.8),
            ),
            rng.gen_range(-1.0..2.0),
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        );
    }
    set
}

fn max_abs_diff(a: &splat4d::img::Image, b: &splat4d::img::Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Criterion 2: tiled renderer equals the brute-force reference.
fn rasterizer_oracle(c: &mut Criteria) {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let world = s % 2 == 1;
        let (set, cam) = if world {
            let intr = Intrinsics {
                fx: 64.0,
                fy: 64.0,
                cx: 32.0,
                cy: 32.0,
                w: 64,
                h: 64,
            };
            let cam = Camera::perspective(
                &intr,
                Vector4::new(0.95, 0.05, -0.1, 0.02),
                Vector3::new(0.05, -0.03, 0.1),
            )
            .unwrap();
            (
                random_render_set(
                    1000 + s,
                    30 + (s as usize) * 2,
                    20 + s as usize,
                    Space::World,
                ),
                cam,
            )
        } else {
            (
                random_render_set(1000 + s, 60 + (s as usize) * 2, 0, Space::Video),
                Camera::orthographic(64, 64),
            )
        };
        let t = (s as f64) / 20.0;
        let flow = FlowTarget {
            t2: (t + 0.35).min(1.0),
            cam2: cam.clone(),
        };
        let a = render(&set, &cam, t, Some(&flow)).unwrap();
        let b = render_brute(&set, &cam, t, Some(&flow)).unwrap();
        worst = worst
            .max(max_abs_diff(&a.hdr, &b.hdr))
            .max(max_abs_diff(&a.depth, &b.depth))
            .max(max_abs_diff(&a.alpha, &b.alpha))
            .max(max_abs_diff(
                a.flow.as_ref().unwrap(),
                b.flow.as_ref().unwrap(),
            ));
    }
    let dt = t0.elapsed().as_secs_f64();
    c.record(
        2,
        "tiled render equals brute-force reference",
        worst <= 1e-6 && dt < 120.0,
        format!("20 scenes, max abs diff {worst:.2e}, {dt:.1}s"),
    );
}

/// Criterion 3: the on-axis scaling refit recovers the closed form
/// s_x = sigma_v (w/2) z / f_x within 1%.
fn refit_oracle(c: &mut Criteria) {
    let t0 = Instant::now();
    let intr = Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 32.0,
        cy: 24.0,
        w: 64,
        h: 48,
    };
    let nf = 4;
    let poses = splat4d::geometry::pose::PoseSet::identity(intr, nf);
    let z = 2.0;
    let sigma_v = 0.05f64;
    let id = Vector4::new(1.0, 0.0, 0.0, 0.0);
    let ortho = Camera::orthographic(intr.w, intr.h);
    let ls_v = Vector3::repeat(sigma_v.ln());
    let video_cov: Vec<_> = (0..nf)
        .map(|_| project_gaussian_2d(&Vector3::new(0.0, 0.0, z), &id, &ls_v, &ortho).map(|r| r.1))
        .collect();
    let world_frames = vec![(Vector3::new(0.0, 0.0, z), id); nf];
    let sx = sigma_v * (intr.w as f64 / 2.0) * z / intr.fx;
    let sy = sigma_v * (intr.h as f64 / 2.0) * z / intr.fy;
    let (ls, rep) = refit_scaling(
        &video_cov,
        &world_frames,
        &poses,
        Vector3::repeat(sigma_v.ln()),
        REFIT_MAX_ITERS,
    );
    let ex = (ls.x.exp() - sx).abs() / sx;
    let ey = (ls.y.exp() - sy).abs() / sy;
    let dt = t0.elapsed().as_secs_f64();
    c.record(
        3,
        "scaling refit matches the closed form",
        ex < 0.01 && ey < 0.01 && rep.iters <= 1000 && dt < 60.0,
        format!("rel err x {ex:.4} y {ey:.4}, {} iters, {dt:.2}s", rep.iters),
    );
}

/// Criterion 4: dynamic/static identification against ground-truth object
/// membership on the default scene, plus the always-occluded construction.
fn identification_oracle(c: &mut Criteria, ds: &splat4d::synthdata::Dataset, threshold: f64) {
    let spec = &ds.spec;
    let nf = spec.n_frames;
    let poses = ds.gt_poses.normalized();
    let mut total = 0usize;
    let mut agree = 0usize;

    // Static probes: unproject background pixels of frame 0 and carry the
    // fixed world point through every pose.
    let cam0 = poses.camera(0);
    let (rot0, tr0) = (cam0.rot_matrix(), cam0.translation);
    let mask0 = &ds.priors.masks[0];
    let depth0 = &ds.priors.depths[0];
    for py in (4..spec.height - 4).step_by(12) {
        for px in (4..spec.width - 4).step_by(12) {
            if mask0.at(py, px, 0) > 0.5 {
                continue;
            }
            let z = depth0.at(py, px, 0);
            let x_cam = Vector3::new(
                (px as f64 + 0.5 - cam0.cx) / cam0.fx * z,
                (py as f64 + 0.5 - cam0.cy) / cam0.fy * z,
                z,
            );
            let world = rot0.transpose() * (x_cam - tr0);
            let traj: Vec<_> = (0..nf)
                .map(|t| splat4d::v2w::world_to_video(&world, &poses.camera(t)).unwrap())
                .collect();
            let (class, _, _) =
                classify_dynamic(&traj, &ds.priors.masks, &ds.priors.depths, threshold);
            total += 1;
            if class == Classification::Static {
                agree += 1;
            }
        }
    }

    // Dynamic probes: material points on the camera-facing face of each box,
    // moved rigidly by the box motion (linear translation + y-axis spin).
    let mut occluded_probe: Option<Vec<Vector3<f64>>> = None;
    for b in &spec.boxes {
        let h = b.half_extent;
        let c0 = Vector3::from(b.center_start);
        let c1 = Vector3::from(b.center_end);
        for ia in 0..4 {
            for ib in 0..4 {
                let a = -0.7 * h + 1.4 * h * ia as f64 / 3.0;
                let bb = -0.7 * h + 1.4 * h * ib as f64 / 3.0;
                let body = Vector3::new(a, bb, -h);
                let traj: Vec<_> = (0..nf)
                    .map(|t| {
                        let f = spec.frame_time(t);
                        let ang = b.spin_degrees.to_radians() * f;
                        let rot = Matrix3::new(
                            ang.cos(),
                            0.0,
                            ang.sin(),
                            0.0,
                            1.0,
                            0.0,
                            -ang.sin(),
                            0.0,
                            ang.cos(),
                        );
                        let world = rot * body + c0 + (c1 - c0) * f;
                        splat4d::v2w::world_to_video(&world, &poses.camera(t)).unwrap()
                    })
                    .collect();
                let (class, _, _) =
                    classify_dynamic(&traj, &ds.priors.masks, &ds.priors.depths, threshold);
                total += 1;
                if class == Classification::Dynamic {
                    agree += 1;
                }
                occluded_probe.get_or_insert_with(|| traj.clone());
            }
        }
    }
    let frac = agree as f64 / total as f64;

    // Pushing a dynamic trajectory behind the rendered surface must count
    // zero dynamic frames (occlusion handling).
    let hidden: Vec<_> = occluded_probe
        .unwrap()
        .iter()
        .map(|p| Vector3::new(p.x, p.y, p.z * 1.3))
        .collect();
    let (_, n_d, occ) = classify_dynamic(&hidden, &ds.priors.masks, &ds.priors.depths, threshold);
    c.record(
        4,
        "identification matches GT membership",
        frac >= 0.95 && n_d == 0,
        format!(
            "{agree}/{total} agree ({:.1}%), occluded probe N_d={n_d} (occluded {occ}/{nf})",
            100.0 * frac
        ),
    );
}

/// Criterion 7: skipping stage 1 (world Gaussians initialized straight from
/// lifted priors) must end with strictly lower held-out PSNR.
fn skip_stage1_ablation(
    ds: &splat4d::synthdata::Dataset,
    config: &RunConfig,
) -> anyhow::Result<MetricReport> {
    let train: &TrainConfig = &config.train;
    let tone_mapper = ToneMapper::new(train.seed);
    let ldr: Vec<_> = ds.frames.iter().map(|f| f.ldr.clone()).collect();
    let (video_set, _) = init_video_gaussians(
        &ds.priors,
        &ldr,
        &tone_mapper,
        &InitConfig {
            ctrl_every: train.ctrl_every,
            ..Default::default()
        },
    )?;
    let cam = Camera::orthographic(ds.spec.width, ds.spec.height);
    let hdr: Vec<_> = (0..ds.frames.len())
        .map(|i| Ok(render(&video_set, &cam, video_set.frame_time(i), None)?.hdr))
        .collect::<Result<_, splat4d::Error>>()?;
    let poses = noised_poses(&ds.gt_poses, &config.pose_init)?;
    let out = run_stage2(
        &video_set,
        &poses,
        &ds.frames,
        &ds.priors,
        &hdr,
        &tone_mapper,
        train,
    )?;
    evaluate(
        &Checkpoint {
            set: out.set,
            tone_mapper: out.tone_mapper,
            poses: Some(out.poses),
        },
        ds,
    )
}

#[test]
fn acceptance_criteria() {
    let mut c = Criteria::default();
    let tmp = tempfile::tempdir().unwrap();

    // Shared configuration: the default desk-scale scene and schedule with
    // 1-degree pose noise, written out explicitly so ablation configs can
    // differ in exactly one knob.
    let mut base_cfg = RunConfig::default();
    base_cfg.pose_init.rotation_noise_degrees = 1.0;
    base_cfg.pose_init.noise_seed = 99;
    let base_toml = tmp.path().join("base.toml");
    std::fs::write(&base_toml, toml::to_string(&base_cfg).unwrap()).unwrap();
    let mut tlr0_cfg = base_cfg.clone();
    tlr0_cfg.train.weights.tlr = 0.0;
    let tlr0_toml = tmp.path().join("tlr0.toml");
    std::fs::write(&tlr0_toml, toml::to_string(&tlr0_cfg).unwrap()).unwrap();

    // Criterion 1: the gradient suite.
    let t0 = Instant::now();
    let grad = bin(&["gradcheck", "--seed", "17"]);
    let dt = t0.elapsed().as_secs_f64();
    c.record(
        1,
        "finite-difference gradient suite",
        grad.status.success() && dt < 300.0,
        format!(
            "exit {}, {dt:.1}s: {}",
            grad.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&grad.stdout).replace('\n', "; ")
        ),
    );

    rasterizer_oracle(&mut c);
    refit_oracle(&mut c);

    // The default synthetic scene, both in-process and on disk (identical
    // content; generation is deterministic).
    let ds = generate_scene(&base_cfg.scene).unwrap();
    identification_oracle(&mut c, &ds, base_cfg.train.dynamic_threshold);

    let data = tmp.path().join("data");
    let cfg = base_toml.to_str().unwrap();
    bin_ok(&["generate", "--config", cfg, "--out", data.to_str().unwrap()]);

    // Criterion 5: end-to-end desk-scale run.
    let run_a = tmp.path().join("run_a");
    let t0 = Instant::now();
    bin_ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_a.to_str().unwrap(),
    ]);
    let train_secs = t0.elapsed().as_secs_f64();
    let metrics_a = run_a.join("metrics.json");
    bin_ok(&[
        "eval",
        "--checkpoint",
        run_a.join("stage2.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        metrics_a.to_str().unwrap(),
    ]);
    let rep_a = read_report(&metrics_a);
    let train_psnr = rep_a.ldr_oe.mean_psnr();
    let hdr_psnr = rep_a.hdr_mu.mean_psnr();
    let test_psnr = rep_a.ldr_ne.mean_psnr();
    let pose_err = rep_a.pose_rot_err_deg.unwrap();
    c.record(
        5,
        "end-to-end desk-scale reconstruction",
        train_psnr >= 28.0
            && hdr_psnr >= 25.0
            && (train_psnr - test_psnr).abs() <= 3.0
            && pose_err < 1.0
            && train_secs < 1800.0,
        format!(
            "train LDR {train_psnr:.2} dB (>=28), mu-law HDR {hdr_psnr:.2} dB (>=25), held-out {test_psnr:.2} dB (within 3), pose err {pose_err:.3} deg (<1 from 1.0), {train_secs:.0}s (<1800)"
        ),
    );

    // Criterion 6: disabling temporal luminance regularization must strictly
    // worsen (increase) HDR-TAE. Stage 2 reruns from the same stage-1
    // checkpoint with only the TLR weight changed.
    let run_tlr0 = tmp.path().join("run_tlr0");
    bin_ok(&[
        "train",
        "--config",
        tlr0_toml.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_tlr0.to_str().unwrap(),
        "--stage2-only",
        "--stage1-checkpoint",
        run_a.join("stage1.ckpt").to_str().unwrap(),
    ]);
    let metrics_t = run_tlr0.join("metrics.json");
    bin_ok(&[
        "eval",
        "--checkpoint",
        run_tlr0.join("stage2.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        metrics_t.to_str().unwrap(),
    ]);
    let tae_base = rep_a.hdr_tae.unwrap();
    let tae_ablate = read_report(&metrics_t).hdr_tae.unwrap();
    c.record(
        6,
        "TLR ablation degrades temporal stability",
        tae_ablate > tae_base,
        format!("HDR-TAE {tae_base:.5} with TLR vs {tae_ablate:.5} without"),
    );

    // Criterion 7: skipping stage 1 must end strictly worse on held-out
    // frames.
    let rep_skip = skip_stage1_ablation(&ds, &base_cfg).unwrap();
    let skip_psnr = rep_skip.ldr_ne.mean_psnr();
    c.record(
        7,
        "stage-1 initialization ablation",
        skip_psnr < test_psnr,
        format!("held-out {skip_psnr:.2} dB without stage 1 vs {test_psnr:.2} dB with"),
    );

    // Criterion 8: a second identical run must be byte-identical in
    // checkpoints and metric reports.
    let run_b = tmp.path().join("run_b");
    bin_ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_b.to_str().unwrap(),
    ]);
    let metrics_b = run_b.join("metrics.json");
    bin_ok(&[
        "eval",
        "--checkpoint",
        run_b.join("stage2.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        metrics_b.to_str().unwrap(),
    ]);
    let mut identical = Vec::new();
    let mut differing = Vec::new();
    for f in [
        "stage1.ckpt",
        "stage1.ckpt.json",
        "stage2.ckpt",
        "stage2.ckpt.json",
        "stage1_loss.csv",
        "stage2_loss.csv",
        "crf.csv",
        "metrics.json",
    ] {
        let same = std::fs::read(run_a.join(f)).unwrap() == std::fs::read(run_b.join(f)).unwrap();
        if same {
            identical.push(f)
        } else {
            differing.push(f)
        }
    }
    c.record(
        8,
        "determinism across full runs",
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical", identical.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    );

    // Criterion 9: the stage-1 tone mapper is anchored at phi(0) ~ C0.
    let stage1 = load(&run_a.join("stage1.ckpt")).unwrap();
    let phis: Vec<f64> = (0..3).map(|ch| stage1.tone_mapper.phi(ch, 0.0)).collect();
    let worst = phis
        .iter()
        .map(|p| (p - 0.7297f64).abs())
        .fold(0.0, f64::max);
    c.record(
        9,
        "unit-exposure anchor phi(0)",
        worst <= 0.02,
        format!(
            "phi(0) = [{:.4}, {:.4}, {:.4}], max |dev| {worst:.4} (<=0.02)",
            phis[0], phis[1], phis[2]
        ),
    );

    assert!(
        c.failures.is_empty(),
        "failed criteria:\n{}",
        c.failures.join("\n")
    );
}
