//! Scene checkpoints: versioned binary attribute arrays plus a JSON sidecar.
//!
//! Layout (all integers and floats little endian):
//!
//! ```text
//! magic   b"S4DG"
//! version u32 (currently 1)
//! space   u8  (0 = video, 1 = world)
//! flags   u8  (bit 0: pose set present)
//! n_frames, n_knots, n_dyn, n_static  u32 each
//! f32 arrays, in order:
//!   knot_times                 [n_knots]
//!   dynamic ctrl               [n_dyn * n_knots * 3]
//!   dynamic quat coefficients  [n_dyn * 4 * 4]
//!   dynamic log scaling        [n_dyn * 3]
//!   dynamic logit opacity      [n_dyn]
//!   dynamic log irradiance     [n_dyn * 3]
//!   static position            [n_static * 3]
//!   static rotation            [n_static * 4]
//!   static log scaling         [n_static * 3]
//!   static logit opacity       [n_static]
//!   static log irradiance      [n_static * 3]
//!   tone mapper, per channel:  w1 [128], b1 [128], w2 [128], b2 [1]
//! if poses present:
//!   fx, fy, cx, cy             f32 each
//!   width, height              u32 each
//!   rotations                  [n_frames * 4]
//!   translations               [n_frames * 3]
//! ```
//!
//! The sidecar `<path>.json` records counts, the space tag and the covered
//! time range for inspection without parsing the binary.

use anyhow::{bail, Context, Result};
use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use splat4d::geometry::pose::PoseSet;
use splat4d::geometry::Intrinsics;
use splat4d::scene::{DynBlock, GaussianSet, Space, StaticBlock};
use splat4d::tonemap::{ToneMapper, HIDDEN};
use std::path::Path;

use crate::io::atomic_write;

const MAGIC: &[u8; 4] = b"S4DG";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub set: GaussianSet,
    pub tone_mapper: ToneMapper,
    pub poses: Option<PoseSet>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub space: String,
    pub n_frames: usize,
    pub n_knots: usize,
    pub n_dynamic: usize,
    pub n_static: usize,
    pub has_poses: bool,
    pub time_range: [f64; 2],
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn vec3s(&mut self, vs: &[Vector3<f64>]) {
        for v in vs {
            for k in 0..3 {
                self.f32(v[k]);
            }
        }
    }

    fn vec4s(&mut self, vs: &[Vector4<f64>]) {
        for v in vs {
            for k in 0..4 {
                self.f32(v[k]);
            }
        }
    }

    fn scalars(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("truncated checkpoint at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<Vector3<f64>>> {
        (0..n)
            .map(|_| Ok(Vector3::new(self.f32()?, self.f32()?, self.f32()?)))
            .collect()
    }

    fn vec4s(&mut self, n: usize) -> Result<Vec<Vector4<f64>>> {
        (0..n)
            .map(|_| {
                Ok(Vector4::new(
                    self.f32()?,
                    self.f32()?,
                    self.f32()?,
                    self.f32()?,
                ))
            })
            .collect()
    }

    fn scalars(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let set = &ckpt.set;
    let (nd, ns, nk) = (
        set.dynamics.len(),
        set.statics.len(),
        set.dynamics.n_knots(),
    );
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes.push(match set.space {
        Space::Video => 0,
        Space::World => 1,
    });
    w.bytes.push(ckpt.poses.is_some() as u8);
    w.u32(set.n_frames as u32);
    w.u32(nk as u32);
    w.u32(nd as u32);
    w.u32(ns as u32);

    w.scalars(&set.dynamics.knot_times);
    w.vec3s(&set.dynamics.ctrl);
    w.vec4s(&set.dynamics.quat_coeffs);
    w.vec3s(&set.dynamics.log_scaling);
    w.scalars(&set.dynamics.logit_opacity);
    w.vec3s(&set.dynamics.log_irradiance);
    w.vec3s(&set.statics.position);
    w.vec4s(&set.statics.rotation);
    w.vec3s(&set.statics.log_scaling);
    w.scalars(&set.statics.logit_opacity);
    w.vec3s(&set.statics.log_irradiance);
    for mlp in &ckpt.tone_mapper.channels {
        w.scalars(&mlp.w1);
        w.scalars(&mlp.b1);
        w.scalars(&mlp.w2);
        w.f32(mlp.b2);
    }
    if let Some(poses) = &ckpt.poses {
        if poses.rotations.len() != set.n_frames {
            bail!(
                "pose set covers {} frames, scene has {}",
                poses.rotations.len(),
                set.n_frames
            );
        }
        let i = &poses.intrinsics;
        w.f32(i.fx);
        w.f32(i.fy);
        w.f32(i.cx);
        w.f32(i.cy);
        w.u32(i.w as u32);
        w.u32(i.h as u32);
        w.vec4s(&poses.rotations);
        w.vec3s(&poses.translations);
    }
    atomic_write(path, &w.bytes)?;

    let sidecar = Sidecar {
        version: VERSION,
        space: match set.space {
            Space::Video => "video".into(),
            Space::World => "world".into(),
        },
        n_frames: set.n_frames,
        n_knots: nk,
        n_dynamic: nd,
        n_static: ns,
        has_poses: ckpt.poses.is_some(),
        time_range: [
            set.dynamics.knot_times.first().copied().unwrap_or(0.0),
            set.dynamics.knot_times.last().copied().unwrap_or(1.0),
        ],
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    atomic_write(&sidecar_path(path), json.as_bytes())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let space = match r.u8()? {
        0 => Space::Video,
        1 => Space::World,
        s => bail!("unknown space tag {s}"),
    };
    let has_poses = match r.u8()? {
        0 => false,
        1 => true,
        f => bail!("unknown flags {f}"),
    };
    let n_frames = r.u32()? as usize;
    let nk = r.u32()? as usize;
    let nd = r.u32()? as usize;
    let ns = r.u32()? as usize;

    let dynamics = DynBlock {
        knot_times: r.scalars(nk)?,
        ctrl: r.vec3s(nd * nk)?,
        quat_coeffs: r.vec4s(nd * 4)?,
        log_scaling: r.vec3s(nd)?,
        logit_opacity: r.scalars(nd)?,
        log_irradiance: r.vec3s(nd)?,
    };
    let statics = StaticBlock {
        position: r.vec3s(ns)?,
        rotation: r.vec4s(ns)?,
        log_scaling: r.vec3s(ns)?,
        logit_opacity: r.scalars(ns)?,
        log_irradiance: r.vec3s(ns)?,
    };
    let mut tone_mapper = ToneMapper::new(0);
    for mlp in &mut tone_mapper.channels {
        mlp.w1 = r.scalars(HIDDEN)?;
        mlp.b1 = r.scalars(HIDDEN)?;
        mlp.w2 = r.scalars(HIDDEN)?;
        mlp.b2 = r.f32()?;
    }
    let poses = if has_poses {
        let (fx, fy, cx, cy) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        let (w, h) = (r.u32()? as usize, r.u32()? as usize);
        Some(PoseSet {
            intrinsics: Intrinsics {
                fx,
                fy,
                cx,
                cy,
                w,
                h,
            },
            rotations: r.vec4s(n_frames)?,
            translations: r.vec3s(n_frames)?,
        })
    } else {
        None
    };
    if r.pos != bytes.len() {
        bail!("{} trailing bytes in checkpoint", bytes.len() - r.pos);
    }
    let set = GaussianSet {
        space,
        n_frames,
        dynamics,
        statics,
    };
    set.validate()
        .map_err(|e| anyhow::anyhow!("invalid checkpoint contents: {e}"))?;
    Ok(Checkpoint {
        set,
        tone_mapper,
        poses,
    })
}
