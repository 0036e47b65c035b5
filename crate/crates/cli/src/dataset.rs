//! On-disk dataset tree for synthetic scenes.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json            spec echo, seed, exposure pattern, file list
//! frames/ldr_###.png       observed 8-bit LDR frames
//! frames/depth_###.pfm     prior depth maps
//! frames/mask_###.png      prior dynamic masks
//! gt/hdr_###.pfm           ground-truth HDR radiance
//! flows/flow_###_###.pfm   prior flow (2 channels, zero-padded PFM)
//! flows/valid_###_###.png  flow validity masks
//! tracks.json              sparse tracks with visibility
//! poses.json               ground-truth camera poses + intrinsics
//! test/ldr_#.png, hdr_#.pfm  held-out frames (poses in manifest)
//! ```
//!
//! LDR frames are already 8-bit quantized at generation time, so the PNG
//! round trip is exact; float maps round to f32.

use anyhow::{bail, Context, Result};
use nalgebra::{Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use splat4d::geometry::pose::PoseSet;
use splat4d::geometry::Intrinsics;
use splat4d::img::Image;
use splat4d::scene::{FlowPair, FrameBundle, PriorBundle, Track};
use splat4d::synthdata::{Dataset, SceneSpec, TestFrame};
use std::path::{Path, PathBuf};

use crate::io::{atomic_write, read_pfm, read_png, write_pfm, write_png};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub seed: u64,
    /// Per-frame exposure times.
    pub exposures: Vec<f64>,
    pub n_frames: usize,
    pub flow_pairs: Vec<[usize; 2]>,
    pub test_frames: Vec<TestFrameMeta>,
    pub files: Vec<String>,
    /// Wall-clock creation time; the only non-deterministic field.
    pub created: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestFrameMeta {
    pub time: f64,
    pub exposure: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTrack {
    pos: Vec<[f64; 2]>,
    visible: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonPoses {
    intrinsics: Intrinsics,
    rotations: Vec<[f64; 4]>,
    translations: Vec<[f64; 3]>,
}

pub(crate) fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let mut files = Vec::new();
    let mut emit = |rel: String| -> PathBuf {
        files.push(rel.clone());
        dir.join(rel)
    };
    for (i, f) in ds.frames.iter().enumerate() {
        write_png(&emit(format!("frames/ldr_{i:03}.png")), &f.ldr)?;
        write_pfm(
            &emit(format!("frames/depth_{i:03}.pfm")),
            &ds.priors.depths[i],
        )?;
        write_png(
            &emit(format!("frames/mask_{i:03}.png")),
            &ds.priors.masks[i],
        )?;
        write_pfm(&emit(format!("gt/hdr_{i:03}.pfm")), &ds.gt_hdr[i])?;
    }
    for pair in &ds.priors.flows {
        write_pfm(
            &emit(format!("flows/flow_{:03}_{:03}.pfm", pair.from, pair.to)),
            &pair.flow,
        )?;
        write_png(
            &emit(format!("flows/valid_{:03}_{:03}.png", pair.from, pair.to)),
            &pair.valid,
        )?;
    }
    let tracks: Vec<JsonTrack> = ds
        .priors
        .tracks
        .iter()
        .map(|t| JsonTrack {
            pos: t.pos.iter().map(|p| [p.x, p.y]).collect(),
            visible: t.visible.clone(),
        })
        .collect();
    atomic_write(
        &emit("tracks.json".into()),
        serde_json::to_string(&tracks)?.as_bytes(),
    )?;
    let poses = JsonPoses {
        intrinsics: ds.gt_poses.intrinsics,
        rotations: ds
            .gt_poses
            .rotations
            .iter()
            .map(|q| [q[0], q[1], q[2], q[3]])
            .collect(),
        translations: ds
            .gt_poses
            .translations
            .iter()
            .map(|t| [t.x, t.y, t.z])
            .collect(),
    };
    atomic_write(
        &emit("poses.json".into()),
        serde_json::to_string_pretty(&poses)?.as_bytes(),
    )?;
    for (j, tf) in ds.test_frames.iter().enumerate() {
        write_png(&emit(format!("test/ldr_{j}.png")), &tf.gt_ldr)?;
        write_pfm(&emit(format!("test/hdr_{j}.pfm")), &tf.gt_hdr)?;
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
        exposures: ds.frames.iter().map(|f| f.exposure).collect(),
        n_frames: ds.frames.len(),
        flow_pairs: ds.priors.flows.iter().map(|p| [p.from, p.to]).collect(),
        test_frames: ds
            .test_frames
            .iter()
            .map(|tf| TestFrameMeta {
                time: tf.time,
                exposure: tf.exposure,
                rotation: [
                    tf.rotation[0],
                    tf.rotation[1],
                    tf.rotation[2],
                    tf.rotation[3],
                ],
                translation: [tf.translation.x, tf.translation.y, tf.translation.z],
            })
            .collect(),
        files,
        created: timestamp(),
    };
    atomic_write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let spec = manifest.spec.clone();
    let n = manifest.n_frames;
    if manifest.exposures.len() != n {
        bail!(
            "manifest lists {} exposures for {n} frames",
            manifest.exposures.len()
        );
    }
    let mut frames = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut gt_hdr = Vec::with_capacity(n);
    for i in 0..n {
        let ldr = read_png(&dir.join(format!("frames/ldr_{i:03}.png")))?;
        check_dims(&ldr, &spec, 3, "ldr")?;
        frames.push(FrameBundle {
            ldr,
            exposure: manifest.exposures[i],
        });
        depths.push(read_pfm(&dir.join(format!("frames/depth_{i:03}.pfm")), 1)?);
        masks.push(read_png(&dir.join(format!("frames/mask_{i:03}.png")))?);
        gt_hdr.push(read_pfm(&dir.join(format!("gt/hdr_{i:03}.pfm")), 3)?);
    }
    let mut flows = Vec::new();
    for &[from, to] in &manifest.flow_pairs {
        flows.push(FlowPair {
            from,
            to,
            flow: read_pfm(&dir.join(format!("flows/flow_{from:03}_{to:03}.pfm")), 2)?,
            valid: read_png(&dir.join(format!("flows/valid_{from:03}_{to:03}.png")))?,
        });
    }
    let tracks_json: Vec<JsonTrack> =
        serde_json::from_slice(&std::fs::read(dir.join("tracks.json"))?)?;
    let tracks: Vec<Track> = tracks_json
        .into_iter()
        .map(|t| Track {
            pos: t.pos.iter().map(|p| Vector2::new(p[0], p[1])).collect(),
            visible: t.visible,
        })
        .collect();
    let poses_json: JsonPoses = serde_json::from_slice(&std::fs::read(dir.join("poses.json"))?)?;
    let gt_poses = PoseSet {
        intrinsics: poses_json.intrinsics,
        rotations: poses_json
            .rotations
            .iter()
            .map(|q| Vector4::new(q[0], q[1], q[2], q[3]))
            .collect(),
        translations: poses_json
            .translations
            .iter()
            .map(|t| Vector3::new(t[0], t[1], t[2]))
            .collect(),
    };
    let mut test_frames = Vec::new();
    for (j, meta) in manifest.test_frames.iter().enumerate() {
        test_frames.push(TestFrame {
            time: meta.time,
            rotation: Vector4::new(
                meta.rotation[0],
                meta.rotation[1],
                meta.rotation[2],
                meta.rotation[3],
            ),
            translation: Vector3::new(
                meta.translation[0],
                meta.translation[1],
                meta.translation[2],
            ),
            exposure: meta.exposure,
            gt_hdr: read_pfm(&dir.join(format!("test/hdr_{j}.pfm")), 3)?,
            gt_ldr: read_png(&dir.join(format!("test/ldr_{j}.png")))?,
        });
    }
    let priors = PriorBundle {
        width: spec.width,
        height: spec.height,
        n_frames: n,
        depths,
        tracks,
        flows,
        masks,
        exposures: manifest.exposures.clone(),
    };
    Ok(Dataset {
        spec,
        frames,
        priors,
        gt_hdr,
        gt_poses,
        test_frames,
    })
}

fn check_dims(img: &Image, spec: &SceneSpec, c: usize, what: &str) -> Result<()> {
    if img.h != spec.height || img.w != spec.width || img.c != c {
        bail!(
            "{what}: {}x{}x{} does not match spec {}x{}x{c}",
            img.h,
            img.w,
            img.c,
            spec.height,
            spec.width
        );
    }
    Ok(())
}
