//! Scratch diagnostics of the video-to-world dynamic classification on a
//! trained stage-1 model. Not part of the suite (ignored).

use splat4d::geometry::Camera;
use splat4d::pipeline::run_stage1;
use splat4d::rasterizer::render;
use splat4d::v2w::{classify_dynamic, Classification};
use splat4d_cli::config::RunConfig;
use std::process::Command;

fn bin_ok(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
#[ignore]
fn diagnose_classification() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let toml_path = tmp.path().join("cfg.toml");
    std::fs::write(&toml_path, toml::to_string(&cfg).unwrap()).unwrap();
    let data = tmp.path().join("data");
    bin_ok(&[
        "generate",
        "--config",
        toml_path.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    let ds = splat4d_cli::dataset::load_dataset(&data).unwrap();

    let s1 = run_stage1(&ds.frames, &ds.priors, &cfg.train).unwrap();
    let set = &s1.set;
    let nf = ds.frames.len();
    let cam = Camera::orthographic(ds.spec.width, ds.spec.height);
    let depths: Vec<_> = (0..nf)
        .map(|f| render(set, &cam, set.frame_time(f), None).unwrap().depth)
        .collect();

    let mut hist = [0usize; 8]; // n_d buckets 0,1,2,3,4,5,6-10,>10
    let mut n_dyn = 0;
    let mut z_dyn = Vec::new();
    let mut occ_total = 0usize;
    for i in 0..set.dynamics.len() {
        let traj = set.dynamics.trajectory(i);
        let positions: Vec<_> = (0..nf)
            .map(|f| traj.eval(set.frame_time(f)).unwrap())
            .collect();
        let (class, n_d, occ) =
            classify_dynamic(&positions, &ds.priors.masks, &depths, cfg.train.dynamic_threshold);
        occ_total += occ;
        let b = match n_d {
            0..=5 => n_d,
            6..=10 => 6,
            _ => 7,
        };
        hist[b] += 1;
        if class == Classification::Dynamic {
            n_dyn += 1;
            if z_dyn.len() < 25 {
                z_dyn.push((n_d, occ, positions[0].z, positions[nf / 2].z));
            }
        }
    }
    println!("n {} dynamic {} mean-occluded {:.2}", set.dynamics.len(), n_dyn, occ_total as f64 / set.dynamics.len() as f64);
    println!("n_d hist (0,1,2,3,4,5,6-10,>10): {hist:?}");
    println!("sample dynamics (n_d, occ, z@0, z@mid): {z_dyn:?}");
    // Reference depths in the prior maps.
    let d0 = &ds.priors.depths[0];
    println!(
        "prior depth corners/center: {:.2} {:.2} {:.2}",
        d0.at(2, 2, 0),
        d0.at(d0.h / 2, d0.w / 2, 0),
        d0.at(d0.h - 3, d0.w - 3, 0)
    );
}
