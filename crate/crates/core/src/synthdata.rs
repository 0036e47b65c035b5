//! Procedural alternating-exposure datasets with exact oracle priors.
//!
//! Scenes are textured rectangles (a static background wall plus rigidly
//! moving boxes) rendered by exact ray casting, so ground-truth HDR, depth,
//! optical flow, sparse tracks, dynamic masks and camera poses all come from
//! the same closed-form geometry. LDR observations apply the synthetic CRF
//! and 8-bit quantization. Everything is deterministic given the seed.

use crate::geometry::camera::Intrinsics;
use crate::geometry::pose::PoseSet;
use crate::img::Image;
use crate::scene::{FlowPair, FrameBundle, PriorBundle, Track};
use crate::tonemap::synthetic_crf;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

/// Texture contrast exponent: texel values span 2^(2*amp) ~ 3+ stops.
const TEX_AMP: f64 = 1.6;
/// Relative depth agreement for the exact visibility test.
const VIS_REL_TOL: f64 = 1e-6;

/// One rigidly moving box, linear translation plus spin about the y axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center_start: [f64; 3],
    pub center_end: [f64; 3],
    pub half_extent: f64,
    pub spin_degrees: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Exposure times; frame i uses `exposures[i % len]`.
    pub exposures: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    /// Camera orbit about the world origin in the z < 0 half space.
    pub orbit_radius: f64,
    pub orbit_degrees: f64,
    pub boxes: Vec<BoxSpec>,
    pub track_grid_x: usize,
    pub track_grid_y: usize,
    /// Fractional timestamps of held-out test views.
    pub test_times: Vec<f64>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 160,
            height: 96,
            n_frames: 24,
            exposures: vec![0.125, 1.0],
            fx: 240.0,
            fy: 240.0,
            orbit_radius: 4.0,
            orbit_degrees: 15.0,
            boxes: vec![BoxSpec {
                center_start: [-1.2, -0.1, 2.5],
                center_end: [1.2, 0.3, 2.5],
                half_extent: 0.45,
                spin_degrees: 40.0,
            }],
            track_grid_x: 16,
            track_grid_y: 10,
            test_times: vec![3.5 / 23.0, 9.5 / 23.0, 15.5 / 23.0, 21.5 / 23.0],
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            w: self.width,
            h: self.height,
        }
    }

    pub fn exposure_for(&self, frame: usize) -> f64 {
        self.exposures[frame % self.exposures.len()]
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            i as f64 / (self.n_frames - 1) as f64
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_frames < 2 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("degenerate scene dimensions".into()));
        }
        if self.exposures.is_empty() || self.exposures.iter().any(|&e| e <= 0.0) {
            return Err(Error::InvalidConfig("exposures must be positive".into()));
        }
        if self.boxes.is_empty() && self.orbit_degrees == 0.0 {
            log::warn!("static camera and no moving objects: fully static dataset");
        }
        Ok(())
    }
}

/// World-to-camera pose on the orbit at normalized time t.
pub fn orbit_pose(spec: &SceneSpec, t: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let half = spec.orbit_degrees.to_radians();
    let theta = -half + 2.0 * half * t;
    let eye = Vector3::new(
        spec.orbit_radius * theta.sin(),
        0.0,
        -spec.orbit_radius * theta.cos(),
    );
    // Look at the origin; +y is down in both world and image.
    let z_f = (-eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x_r = up.cross(&z_f).normalize();
    let y_d = z_f.cross(&x_r);
    let r = Matrix3::from_rows(&[x_r.transpose(), y_d.transpose(), z_f.transpose()]);
    (r, -r * eye)
}

fn quat_from_rotmat(r: &Matrix3<f64>) -> Vector4<f64> {
    // Shepperd's method, scalar-first.
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q / q.norm()
}

/// Finite textured rectangle in body coordinates.
#[derive(Debug, Clone)]
struct Rect {
    q: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    normal: Vector3<f64>,
    inv_l1sq: f64,
    inv_l2sq: f64,
}

impl Rect {
    fn new(q: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>) -> Self {
        let normal = e1.cross(&e2).normalize();
        Rect {
            q,
            e1,
            e2,
            normal,
            inv_l1sq: 1.0 / e1.norm_squared(),
            inv_l2sq: 1.0 / e2.norm_squared(),
        }
    }

    /// Ray-rectangle intersection; `s` is in units of the ray direction.
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let dn = d.dot(&self.normal);
        if dn.abs() < 1e-12 {
            return None;
        }
        let s = (self.q - o).dot(&self.normal) / dn;
        if s <= 1e-6 {
            return None;
        }
        let p = o + d * s - self.q;
        let a = p.dot(&self.e1) * self.inv_l1sq;
        let b = p.dot(&self.e2) * self.inv_l2sq;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return None;
        }
        Some((s, a, b))
    }
}

/// Procedural HDR texture of one rectangle: log-space sinusoid per channel.
#[derive(Debug, Clone)]
struct Tex {
    base: [f64; 3],
    f1: f64,
    f2: f64,
    phase: [f64; 3],
}

impl Tex {
    fn random(rng: &mut StdRng) -> Self {
        Tex {
            base: [
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..0.9),
            ],
            f1: rng.gen_range(2.0..5.0),
            f2: rng.gen_range(2.0..5.0),
            phase: [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ],
        }
    }

    fn sample(&self, a: f64, b: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let wave = (std::f64::consts::TAU * self.f1 * a + self.phase[c]).sin()
                * (std::f64::consts::TAU * self.f2 * b).cos();
            out[c] = self.base[c] * (TEX_AMP * wave).exp2();
        }
        out
    }
}

/// A rigid body: rectangles in body coordinates plus an optional motion.
#[derive(Debug, Clone)]
struct Body {
    rects: Vec<Rect>,
    texs: Vec<Tex>,
    motion: Option<BoxSpec>,
}

impl Body {
    /// Body-to-world pose at normalized time t.
    fn pose(&self, t: f64) -> (Matrix3<f64>, Vector3<f64>) {
        match &self.motion {
            None => (Matrix3::identity(), Vector3::zeros()),
            Some(m) => {
                let c0 = Vector3::from(m.center_start);
                let c1 = Vector3::from(m.center_end);
                let c = c0 + (c1 - c0) * t;
                let ang = m.spin_degrees.to_radians() * t;
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
                (rot, c)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Hit {
    body: usize,
    rect: usize,
    s: f64,
    a: f64,
    b: f64,
    /// Hit point in the body frame: a material point that moves rigidly.
    body_point: Vector3<f64>,
}

struct World {
    bodies: Vec<Body>,
}

impl World {
    fn build(spec: &SceneSpec) -> World {
        let mut rng = StdRng::seed_from_u64(spec.seed ^ 0x5eed_7e37);
        let mut bodies = Vec::new();
        // Static background wall: oversized so every pixel ray hits it.
        let wall = Rect::new(
            Vector3::new(-12.0, -6.0, 6.0),
            Vector3::new(24.0, 0.0, 0.0),
            Vector3::new(0.0, 12.0, 0.0),
        );
        bodies.push(Body {
            texs: vec![Tex::random(&mut rng)],
            rects: vec![wall],
            motion: None,
        });
        for b in &spec.boxes {
            let h = b.half_extent;
            let mut rects = Vec::new();
            let mut texs = Vec::new();
            // Six faces of an axis-aligned cube in body coordinates.
            let faces = [
                (
                    Vector3::new(-h, -h, -h),
                    Vector3::new(2.0 * h, 0.0, 0.0),
                    Vector3::new(0.0, 2.0 * h, 0.0),
                ),
                (
                    Vector3::new(-h, -h, h),
                    Vector3::new(2.0 * h, 0.0, 0.0),
                    Vector3::new(0.0, 2.0 * h, 0.0),
                ),
                (
                    Vector3::new(-h, -h, -h),
                    Vector3::new(0.0, 2.0 * h, 0.0),
                    Vector3::new(0.0, 0.0, 2.0 * h),
                ),
                (
                    Vector3::new(h, -h, -h),
                    Vector3::new(0.0, 2.0 * h, 0.0),
                    Vector3::new(0.0, 0.0, 2.0 * h),
                ),
                (
                    Vector3::new(-h, -h, -h),
                    Vector3::new(2.0 * h, 0.0, 0.0),
                    Vector3::new(0.0, 0.0, 2.0 * h),
                ),
                (
                    Vector3::new(-h, h, -h),
                    Vector3::new(2.0 * h, 0.0, 0.0),
                    Vector3::new(0.0, 0.0, 2.0 * h),
                ),
            ];
            for (q, e1, e2) in faces {
                rects.push(Rect::new(q, e1, e2));
                texs.push(Tex::random(&mut rng));
            }
            bodies.push(Body {
                rects,
                texs,
                motion: Some(b.clone()),
            });
        }
        World { bodies }
    }

    /// Closest intersection of a world-space ray at normalized time t.
    fn cast(&self, t: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (bi, body) in self.bodies.iter().enumerate() {
            let (rot, c) = body.pose(t);
            let ob = rot.transpose() * (o - c);
            let db = rot.transpose() * d;
            for (ri, rect) in body.rects.iter().enumerate() {
                if let Some((s, a, b)) = rect.hit(&ob, &db) {
                    if best.as_ref().map_or(true, |h| s < h.s) {
                        best = Some(Hit {
                            body: bi,
                            rect: ri,
                            s,
                            a,
                            b,
                            body_point: ob + db * s,
                        });
                    }
                }
            }
        }
        best
    }

    fn radiance(&self, hit: &Hit) -> [f64; 3] {
        self.bodies[hit.body].texs[hit.rect].sample(hit.a, hit.b)
    }

    /// World position of a hit's material point at another time.
    fn point_at(&self, hit: &Hit, t: f64) -> Vector3<f64> {
        let (rot, c) = self.bodies[hit.body].pose(t);
        rot * hit.body_point + c
    }

    /// Exact visibility of a material point at time t under the given pose:
    /// it must project in front of the camera and be the closest hit.
    fn visible(
        &self,
        hit: &Hit,
        t: f64,
        rot: &Matrix3<f64>,
        trans: &Vector3<f64>,
        intr: &Intrinsics,
    ) -> Option<Vector2<f64>> {
        let p_w = self.point_at(hit, t);
        let p_cam = rot * p_w + trans;
        if p_cam.z <= 1e-4 {
            return None;
        }
        let u = Vector2::new(
            intr.fx * p_cam.x / p_cam.z + intr.cx,
            intr.fy * p_cam.y / p_cam.z + intr.cy,
        );
        let o = -rot.transpose() * trans;
        let d = rot.transpose()
            * Vector3::new((u.x - intr.cx) / intr.fx, (u.y - intr.cy) / intr.fy, 1.0);
        let front = self.cast(t, &o, &d)?;
        if front.body == hit.body && (front.s - p_cam.z).abs() <= VIS_REL_TOL * p_cam.z {
            Some(u)
        } else {
            None
        }
    }
}

/// A held-out evaluation view at a fractional timestamp.
#[derive(Debug, Clone)]
pub struct TestFrame {
    pub time: f64,
    pub rotation: Vector4<f64>,
    pub translation: Vector3<f64>,
    pub exposure: f64,
    pub gt_hdr: Image,
    pub gt_ldr: Image,
}

/// Everything `generate_scene` produces.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub frames: Vec<FrameBundle>,
    pub priors: PriorBundle,
    pub gt_hdr: Vec<Image>,
    pub gt_poses: PoseSet,
    pub test_frames: Vec<TestFrame>,
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn ldr_from_hdr(hdr: &Image, dt: f64) -> Image {
    hdr.map(|e| quantize8(synthetic_crf(e, dt)))
}

/// Render HDR, depth, dynamic mask and the per-pixel hits of one view.
fn render_view(
    world: &World,
    t: f64,
    rot: &Matrix3<f64>,
    trans: &Vector3<f64>,
    intr: &Intrinsics,
) -> (Image, Image, Image, Vec<Option<Hit>>) {
    let (w, h) = (intr.w, intr.h);
    let mut hdr = Image::zeros(h, w, 3);
    let mut depth = Image::zeros(h, w, 1);
    let mut mask = Image::zeros(h, w, 1);
    let mut hits = vec![None; w * h];
    let o = -rot.transpose() * trans;
    for y in 0..h {
        for x in 0..w {
            let d = rot.transpose()
                * Vector3::new(
                    (x as f64 - intr.cx) / intr.fx,
                    (y as f64 - intr.cy) / intr.fy,
                    1.0,
                );
            if let Some(hit) = world.cast(t, &o, &d) {
                let rad = world.radiance(&hit);
                for c in 0..3 {
                    *hdr.at_mut(y, x, c) = rad[c];
                }
                *depth.at_mut(y, x, 0) = hit.s;
                if world.bodies[hit.body].motion.is_some() {
                    *mask.at_mut(y, x, 0) = 1.0;
                }
                hits[y * w + x] = Some(hit);
            }
        }
    }
    (hdr, depth, mask, hits)
}

/// Generate the full dataset: observations, oracle priors, ground truth.
/// Exact flow from one frame's hit buffer to another frame: per pixel, the
/// displacement of the hit body point, valid only where the point stays
/// visible and in bounds.
fn oracle_flow(
    spec: &SceneSpec,
    world: &World,
    hits_from: &[Option<Hit>],
    t2: f64,
    rot_to: &Matrix3<f64>,
    trans_to: &Vector3<f64>,
    intr: &Intrinsics,
) -> (Image, Image) {
    let mut flow = Image::zeros(spec.height, spec.width, 2);
    let mut valid = Image::zeros(spec.height, spec.width, 1);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let Some(hit) = &hits_from[y * spec.width + x] else {
                continue;
            };
            let Some(u2) = world.visible(hit, t2, rot_to, trans_to, intr) else {
                continue;
            };
            if u2.x < 0.0
                || u2.y < 0.0
                || u2.x > (spec.width - 1) as f64
                || u2.y > (spec.height - 1) as f64
            {
                continue;
            }
            *flow.at_mut(y, x, 0) = u2.x - x as f64;
            *flow.at_mut(y, x, 1) = u2.y - y as f64;
            *valid.at_mut(y, x, 0) = 1.0;
        }
    }
    (flow, valid)
}

/// Ground-truth flows and validity masks between adjacent frame pairs,
/// used by the HDR-TAE temporal stability metric (`flows_fwd[t]` maps frame
/// t to t+1, `flows_bwd[t]` maps t+1 to t).
#[derive(Debug, Clone)]
pub struct EvalFlows {
    pub fwd: Vec<Image>,
    pub bwd: Vec<Image>,
    pub mask_fwd: Vec<Image>,
    pub mask_bwd: Vec<Image>,
}

pub fn adjacent_eval_flows(spec: &SceneSpec) -> Result<EvalFlows> {
    spec.validate()?;
    let world = World::build(spec);
    let intr = spec.intrinsics();
    let nf = spec.n_frames;
    let mut frame_rot = Vec::with_capacity(nf);
    let mut frame_trans = Vec::with_capacity(nf);
    let mut hits = Vec::with_capacity(nf);
    for i in 0..nf {
        let (r, t) = orbit_pose(spec, spec.frame_time(i));
        let (_, _, _, h) = render_view(&world, spec.frame_time(i), &r, &t, &intr);
        frame_rot.push(r);
        frame_trans.push(t);
        hits.push(h);
    }
    let mut out = EvalFlows {
        fwd: Vec::new(),
        bwd: Vec::new(),
        mask_fwd: Vec::new(),
        mask_bwd: Vec::new(),
    };
    for t in 0..nf - 1 {
        let (flow, valid) = oracle_flow(
            spec,
            &world,
            &hits[t],
            spec.frame_time(t + 1),
            &frame_rot[t + 1],
            &frame_trans[t + 1],
            &intr,
        );
        out.fwd.push(flow);
        out.mask_fwd.push(valid);
        let (flow, valid) = oracle_flow(
            spec,
            &world,
            &hits[t + 1],
            spec.frame_time(t),
            &frame_rot[t],
            &frame_trans[t],
            &intr,
        );
        out.bwd.push(flow);
        out.mask_bwd.push(valid);
    }
    Ok(out)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = World::build(spec);
    let intr = spec.intrinsics();
    let nf = spec.n_frames;
    let mut poses = PoseSet::identity(intr, nf);
    let mut frame_rot = Vec::with_capacity(nf);
    let mut frame_trans = Vec::with_capacity(nf);
    for i in 0..nf {
        let (r, t) = orbit_pose(spec, spec.frame_time(i));
        poses.rotations[i] = quat_from_rotmat(&r);
        poses.translations[i] = t;
        frame_rot.push(r);
        frame_trans.push(t);
    }

    let mut gt_hdr = Vec::with_capacity(nf);
    let mut depths = Vec::with_capacity(nf);
    let mut masks = Vec::with_capacity(nf);
    let mut frames = Vec::with_capacity(nf);
    let mut all_hits = Vec::with_capacity(nf);
    for i in 0..nf {
        let (hdr, depth, mask, hits) = render_view(
            &world,
            spec.frame_time(i),
            &frame_rot[i],
            &frame_trans[i],
            &intr,
        );
        let dt = spec.exposure_for(i);
        frames.push(FrameBundle {
            ldr: ldr_from_hdr(&hdr, dt),
            exposure: dt,
        });
        gt_hdr.push(hdr);
        depths.push(depth);
        masks.push(mask);
        all_hits.push(hits);
    }

    // Oracle flow between same-exposure pairs (t, t +/- n_e).
    let n_e = spec.exposures.len();
    let mut flows = Vec::new();
    for from in 0..nf {
        for to in [from as isize + n_e as isize, from as isize - n_e as isize] {
            if to < 0 || to as usize >= nf {
                continue;
            }
            let to = to as usize;
            let (flow, valid) = oracle_flow(
                spec,
                &world,
                &all_hits[from],
                spec.frame_time(to),
                &frame_rot[to],
                &frame_trans[to],
                &intr,
            );
            flows.push(FlowPair {
                from,
                to,
                flow,
                valid,
            });
        }
    }

    // Oracle tracks: material points seeded on a pixel grid in frame 0.
    let mut tracks = Vec::new();
    for gy in 0..spec.track_grid_y {
        for gx in 0..spec.track_grid_x {
            let px = (gx as f64 + 0.5) * spec.width as f64 / spec.track_grid_x as f64;
            let py = (gy as f64 + 0.5) * spec.height as f64 / spec.track_grid_y as f64;
            let o = -frame_rot[0].transpose() * frame_trans[0];
            let d = frame_rot[0].transpose()
                * Vector3::new((px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0);
            let Some(hit) = world.cast(0.0, &o, &d) else {
                continue;
            };
            let mut pos = Vec::with_capacity(nf);
            let mut visible = Vec::with_capacity(nf);
            for i in 0..nf {
                let t = spec.frame_time(i);
                match world.visible(&hit, t, &frame_rot[i], &frame_trans[i], &intr) {
                    Some(u)
                        if u.x >= 0.0
                            && u.y >= 0.0
                            && u.x <= (spec.width - 1) as f64
                            && u.y <= (spec.height - 1) as f64 =>
                    {
                        pos.push(u);
                        visible.push(true);
                    }
                    _ => {
                        // Keep the (possibly occluded) projected position.
                        let p_w = world.point_at(&hit, t);
                        let p_cam = frame_rot[i] * p_w + frame_trans[i];
                        let u = if p_cam.z > 1e-4 {
                            Vector2::new(
                                intr.fx * p_cam.x / p_cam.z + intr.cx,
                                intr.fy * p_cam.y / p_cam.z + intr.cy,
                            )
                        } else {
                            Vector2::zeros()
                        };
                        pos.push(u);
                        visible.push(false);
                    }
                }
            }
            tracks.push(Track { pos, visible });
        }
    }

    let mut test_frames = Vec::new();
    for (k, &t) in spec.test_times.iter().enumerate() {
        let (r, tr) = orbit_pose(spec, t);
        let (hdr, _, _, _) = render_view(&world, t, &r, &tr, &intr);
        let dt = spec.exposure_for(k);
        test_frames.push(TestFrame {
            time: t,
            rotation: quat_from_rotmat(&r),
            translation: tr,
            exposure: dt,
            gt_ldr: ldr_from_hdr(&hdr, dt),
            gt_hdr: hdr,
        });
    }

    let priors = PriorBundle {
        width: spec.width,
        height: spec.height,
        n_frames: nf,
        depths,
        tracks,
        flows,
        masks,
        exposures: (0..nf).map(|i| spec.exposure_for(i)).collect(),
    };
    Ok(Dataset {
        spec: spec.clone(),
        frames,
        priors,
        gt_hdr,
        gt_poses: poses,
        test_frames,
    })
}

/// Noise model for degrading the oracle priors.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSpec {
    /// Multiplicative Gaussian depth noise (relative sigma).
    pub depth_sigma: f64,
    /// Additive Gaussian flow noise (pixels).
    pub flow_sigma: f64,
    /// Probability of clearing a track's visible flag.
    pub track_dropout: f64,
    /// 3x3 dilation / erosion passes applied to the dynamic masks.
    pub mask_dilate: usize,
    pub mask_erode: usize,
}

fn normal(rng: &mut StdRng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn morph(mask: &Image, dilate: bool) -> Image {
    Image::from_fn(mask.h, mask.w, 1, |y, x, _| {
        let mut acc = if dilate { 0.0f64 } else { 1.0f64 };
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy < 0 || xx < 0 || yy >= mask.h as i64 || xx >= mask.w as i64 {
                    continue;
                }
                let v = mask.at(yy as usize, xx as usize, 0);
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            }
        }
        acc
    })
}

/// Apply the noise model; zero-valued fields leave the prior untouched.
pub fn degrade_priors(priors: &PriorBundle, noise: &DegradeSpec, seed: u64) -> PriorBundle {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = priors.clone();
    if noise.depth_sigma > 0.0 {
        for d in &mut out.depths {
            for v in &mut d.data {
                *v *= 1.0 + noise.depth_sigma * normal(&mut rng);
            }
        }
    }
    if noise.flow_sigma > 0.0 {
        for f in &mut out.flows {
            for v in &mut f.flow.data {
                *v += noise.flow_sigma * normal(&mut rng);
            }
        }
    }
    if noise.track_dropout > 0.0 {
        for tr in &mut out.tracks {
            for vis in &mut tr.visible {
                if *vis && rng.gen::<f64>() < noise.track_dropout {
                    *vis = false;
                }
            }
        }
    }
    for m in &mut out.masks {
        for _ in 0..noise.mask_dilate {
            *m = morph(m, true);
        }
        for _ in 0..noise.mask_erode {
            *m = morph(m, false);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tonemap::synthetic_crf_c0;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 40,
            n_frames: 8,
            fx: 96.0,
            fy: 96.0,
            track_grid_x: 8,
            track_grid_y: 5,
            test_times: vec![0.5],
            ..Default::default()
        }
    }

    #[test]
    fn static_scene_static_camera() {
        let spec = SceneSpec {
            boxes: vec![],
            orbit_degrees: 0.0,
            ..small_spec()
        };
        let ds = generate_scene(&spec).unwrap();
        for hdr in &ds.gt_hdr[1..] {
            assert_eq!(hdr, &ds.gt_hdr[0]);
        }
        for f in &ds.priors.flows {
            // Zero up to project/unproject round-off.
            assert!(f.flow.data.iter().all(|&v| v.abs() < 1e-9));
            assert!(f.valid.data.iter().all(|&v| v == 1.0));
        }
        for m in &ds.priors.masks {
            assert!(m.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn crf_unit_exposure_anchor() {
        // HDR texel 1.0 at unit exposure maps to ~0.7297 before quantization.
        assert_abs_diff_eq!(synthetic_crf(1.0, 1.0), synthetic_crf_c0(), epsilon = 1e-12);
        assert_abs_diff_eq!(synthetic_crf_c0(), 0.7297, epsilon = 1e-4);
        assert_abs_diff_eq!(quantize8(0.7297), 186.0 / 255.0, epsilon = 1e-12);
    }

    #[test]
    fn exposure_alternation_exact() {
        let ds = generate_scene(&small_spec()).unwrap();
        for (i, f) in ds.frames.iter().enumerate() {
            let expect = ds.spec.exposures[i % ds.spec.exposures.len()];
            assert_eq!(f.exposure, expect);
            assert_eq!(ds.priors.exposures[i], expect);
        }
    }

    #[test]
    fn determinism_same_seed() {
        let a = generate_scene(&small_spec()).unwrap();
        let b = generate_scene(&small_spec()).unwrap();
        assert_eq!(a.gt_hdr, b.gt_hdr);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.priors, b.priors);
        let c = generate_scene(&SceneSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.gt_hdr, c.gt_hdr);
    }

    #[test]
    fn hdr_spans_three_stops() {
        let ds = generate_scene(&small_spec()).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for h in &ds.gt_hdr {
            for &v in &h.data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        assert!(hi / lo >= 8.0, "range {lo}..{hi}");
    }

    #[test]
    fn flow_geometric_consistency() {
        // Casting a ray through u + flow(u) in the target frame must hit the
        // same material point the source pixel saw.
        let ds = generate_scene(&small_spec()).unwrap();
        let world = World::build(&ds.spec);
        let intr = ds.spec.intrinsics();
        let n_e = ds.spec.exposures.len();
        let f = ds.priors.flow_between(0, n_e).unwrap();
        let t0 = ds.spec.frame_time(0);
        let t2 = ds.spec.frame_time(n_e);
        let (r0, tr0) = orbit_pose(&ds.spec, t0);
        let (r2, tr2) = orbit_pose(&ds.spec, t2);
        let o0 = -r0.transpose() * tr0;
        let o2 = -r2.transpose() * tr2;
        let mut checked = 0usize;
        for y in 0..ds.spec.height {
            for x in 0..ds.spec.width {
                if f.valid.at(y, x, 0) < 0.5 {
                    continue;
                }
                let d0 = r0.transpose()
                    * Vector3::new(
                        (x as f64 - intr.cx) / intr.fx,
                        (y as f64 - intr.cy) / intr.fy,
                        1.0,
                    );
                let src_hit = world.cast(t0, &o0, &d0).unwrap();
                let ux = x as f64 + f.flow.at(y, x, 0);
                let uy = y as f64 + f.flow.at(y, x, 1);
                let d2 = r2.transpose()
                    * Vector3::new((ux - intr.cx) / intr.fx, (uy - intr.cy) / intr.fy, 1.0);
                let tgt_hit = world.cast(t2, &o2, &d2).unwrap();
                assert_eq!(src_hit.body, tgt_hit.body);
                let gap = (src_hit.body_point - tgt_hit.body_point).norm();
                assert!(gap < 1e-6, "material point drifted {gap}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn flow_warp_photometric_sanity() {
        // Backward warping the neighbor HDR along the flow reproduces the
        // frame up to bilinear resampling error of the procedural texture.
        let ds = generate_scene(&small_spec()).unwrap();
        let n_e = ds.spec.exposures.len();
        let f = ds.priors.flow_between(0, n_e).unwrap();
        let src = &ds.gt_hdr[n_e];
        let tgt = &ds.gt_hdr[0];
        let mut err = 0.0;
        let mut n = 0usize;
        let mut buf = [0.0; 3];
        for y in 0..tgt.h {
            for x in 0..tgt.w {
                if f.valid.at(y, x, 0) < 0.5 {
                    continue;
                }
                let sx = x as f64 + f.flow.at(y, x, 0);
                let sy = y as f64 + f.flow.at(y, x, 1);
                if !src.sample_bilinear(sx, sy, &mut buf) {
                    continue;
                }
                for c in 0..3 {
                    err += (buf[c] - tgt.at(y, x, c)).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 1000);
        let mean = err / n as f64;
        assert!(mean < 0.05, "mean abs err {mean}");
    }

    #[test]
    fn track_depth_flow_mutual_consistency() {
        // Unprojecting a static track pixel at its depth and reprojecting
        // into another frame lands on the track's position there.
        let ds = generate_scene(&small_spec()).unwrap();
        let poses = &ds.gt_poses;
        let mut checked = 0usize;
        for tr in &ds.priors.tracks {
            if !tr.always_visible() {
                continue;
            }
            // Skip dynamic-object tracks: reprojection assumes static points.
            let p0 = tr.pos[0];
            let x0 = p0.x.round() as usize;
            let y0 = p0.y.round() as usize;
            if ds.priors.masks[0].at(y0.min(39), x0.min(63), 0) > 0.5 {
                continue;
            }
            let cam0 = poses.camera(0);
            let mut d = [0.0];
            assert!(ds.priors.depths[0].sample_bilinear(p0.x, p0.y, &mut d));
            let p_cam = cam0.unproject(&p0, d[0]).unwrap();
            let p_w = cam0.rot_matrix().transpose() * (p_cam - cam0.translation);
            for t in 1..ds.spec.n_frames {
                let cam = poses.camera(t);
                let u = cam.project(&cam.to_camera(&p_w)).unwrap();
                assert!(
                    (u - tr.pos[t]).norm() < 1e-3,
                    "track drifted {} px",
                    (u - tr.pos[t]).norm()
                );
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} static tracks");
    }

    #[test]
    fn moving_box_produces_dynamic_mask_and_occlusion() {
        let ds = generate_scene(&small_spec()).unwrap();
        let dynamic_px: f64 = ds
            .priors
            .masks
            .iter()
            .map(|m| m.data.iter().sum::<f64>())
            .sum();
        assert!(dynamic_px > 100.0);
        // Some background track should get occluded by the moving box.
        let occluded = ds
            .priors
            .tracks
            .iter()
            .filter(|t| !t.always_visible() && t.visible[0])
            .count();
        assert!(occluded > 0, "no occlusion events");
    }

    #[test]
    fn orbit_pose_geometry() {
        let spec = small_spec();
        for t in [0.0, 0.5, 1.0] {
            let (r, tr) = orbit_pose(&spec, t);
            // Camera center distance equals the orbit radius.
            let center = -r.transpose() * tr;
            assert_abs_diff_eq!(center.norm(), spec.orbit_radius, epsilon = 1e-12);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
            // The world origin projects to the optical axis.
            let p = r * Vector3::zeros() + tr;
            assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
            assert!(p.z > 0.0);
        }
    }

    #[test]
    fn degrade_zero_noise_is_identity() {
        let ds = generate_scene(&small_spec()).unwrap();
        let out = degrade_priors(&ds.priors, &DegradeSpec::default(), 1);
        assert_eq!(out, ds.priors);
    }

    #[test]
    fn degrade_depth_noise_statistics() {
        let ds = generate_scene(&small_spec()).unwrap();
        let out = degrade_priors(
            &ds.priors,
            &DegradeSpec {
                depth_sigma: 0.01,
                ..Default::default()
            },
            2,
        );
        let mut rel = 0.0;
        let mut n = 0usize;
        for (a, b) in ds.priors.depths.iter().zip(&out.depths) {
            for (x, y) in a.data.iter().zip(&b.data) {
                if *x > 0.0 {
                    rel += ((y - x) / x).abs();
                    n += 1;
                }
            }
        }
        let mean = rel / n as f64;
        // E|N(0, 0.01)| = 0.01 * sqrt(2/pi) ~ 0.00798.
        assert!((0.0075..=0.0085).contains(&mean), "mean rel err {mean}");
    }

    #[test]
    fn degrade_track_dropout_rate() {
        let ds = generate_scene(&SceneSpec {
            track_grid_x: 40,
            track_grid_y: 25,
            ..small_spec()
        })
        .unwrap();
        let before: usize = ds
            .priors
            .tracks
            .iter()
            .map(|t| t.visible.iter().filter(|&&v| v).count())
            .sum();
        let out = degrade_priors(
            &ds.priors,
            &DegradeSpec {
                track_dropout: 0.2,
                ..Default::default()
            },
            3,
        );
        let after: usize = out
            .tracks
            .iter()
            .map(|t| t.visible.iter().filter(|&&v| v).count())
            .sum();
        let rate = 1.0 - after as f64 / before as f64;
        assert!((0.18..=0.22).contains(&rate), "dropout rate {rate}");
    }

    #[test]
    fn degrade_mask_dilation_grows() {
        let ds = generate_scene(&small_spec()).unwrap();
        let out = degrade_priors(
            &ds.priors,
            &DegradeSpec {
                mask_dilate: 1,
                ..Default::default()
            },
            4,
        );
        for (a, b) in ds.priors.masks.iter().zip(&out.masks) {
            let sa: f64 = a.data.iter().sum();
            let sb: f64 = b.data.iter().sum();
            assert!(sb >= sa);
        }
    }

    #[test]
    fn test_frames_have_interpolated_poses() {
        let ds = generate_scene(&small_spec()).unwrap();
        assert_eq!(ds.test_frames.len(), 1);
        let tf = &ds.test_frames[0];
        assert!(tf.gt_hdr.all_finite());
        // The half-time pose sits between the first and last train poses.
        let (r, _) = orbit_pose(&ds.spec, 0.5);
        let q = quat_from_rotmat(&r);
        assert!(crate::geometry::quat::quat_angle(&q, &tf.rotation) < 1e-12);
    }
}
