//! Differentiable CPU splatting.
//!
//! Gaussians are evaluated at the query time, projected to 2D under either
//! camera model, sorted front to back and alpha-blended into HDR irradiance,
//! expected depth, accumulated alpha and (optionally) 2D displacement
//! ("flow") channels. The tiled renderer and the brute-force reference
//! produce bit-identical images; the backward pass recomputes per-pixel
//! blending and yields exact adjoints for every Gaussian attribute and the
//! camera extrinsics.
//!
//! Pixel (ix, iy) is evaluated at continuous coordinate (ix, iy): integer
//! pixel centers, the same convention as bilinear image sampling.

mod backward;

pub use backward::{render_backward, RenderGrads, RenderUpstream};

use crate::geometry::{hermite_weights, Camera, SplineWeights};
use crate::img::Image;
use crate::scene::{build_covariance, decode_opacity, GaussianSet};
use crate::Result;
use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use rayon::prelude::*;

pub const TILE: usize = 16;
/// Upper clamp on per-Gaussian blending weight.
pub const SIGMA_CLAMP: f64 = 0.99;
/// Contributions below this are skipped.
pub const MIN_CONTRIB: f64 = 1.0 / 255.0;
/// Contributions beyond 3 sigma (squared Mahalanobis > 9) are skipped.
pub const MAX_MAHAL_SQ: f64 = 9.0;
/// Blending terminates once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Isotropic regularizer added to the 2D covariance diagonal.
pub const COV2D_REG: f64 = 0.3;

/// A Gaussian projected to the image plane, with enough cached state for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index into the source set (dynamic indices first).
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv_cov: Matrix2<f64>,
    pub view_depth: f64,
    /// 3-sigma extent in pixels.
    pub radius: f64,
    pub alpha: f64,
    /// HDR irradiance.
    pub rgb: Vector3<f64>,
    /// Projected displacement toward the flow target time (zero without one).
    pub disp: Vector2<f64>,
    pub pos_world: Vector3<f64>,
    pub q_raw: Vector4<f64>,
    pub x_cam: Vector3<f64>,
    pub pos_world2: Vector3<f64>,
    pub x_cam2: Vector3<f64>,
    /// False when the flow-target projection failed (disp is a constant 0).
    pub flow_valid: bool,
}

/// Second render time/camera for the flow channel.
#[derive(Debug, Clone)]
pub struct FlowTarget {
    pub t2: f64,
    pub cam2: Camera,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// H x W x 3 blended irradiance.
    pub hdr: Image,
    /// H x W x 1 alpha-weighted expected view depth.
    pub depth: Image,
    /// H x W x 1 accumulated opacity.
    pub alpha: Image,
    /// H x W x 2 blended displacement, present when a flow target was given.
    pub flow: Option<Image>,
}

#[inline]
fn inv2x2(m: &Matrix2<f64>) -> (Matrix2<f64>, f64) {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    (inv, det)
}

#[inline]
fn max_eigen_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mid + (diff * diff + m[(0, 1)] * m[(1, 0)]).sqrt()
}

/// Project one evaluated Gaussian to the image plane.
///
/// Returns `(mean2d, cov2d, view_depth)`, or `None` when the Gaussian is
/// culled (behind a perspective camera).
pub fn project_gaussian_2d(
    position: &Vector3<f64>,
    rotation: &Vector4<f64>,
    log_scaling: &Vector3<f64>,
    cam: &Camera,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let x_cam = cam.to_camera(position);
    let mean2d = cam.project(&x_cam).ok()?;
    let j = cam.projection_jacobian(&x_cam).ok()?;
    let w = cam.rot_matrix();
    let p = j * w;
    let sigma = build_covariance(rotation, log_scaling);
    let mut cov2d = p * sigma * p.transpose();
    cov2d[(0, 0)] += COV2D_REG;
    cov2d[(1, 1)] += COV2D_REG;
    Some((mean2d, cov2d, x_cam.z))
}

/// Evaluate, project and depth-sort every Gaussian in the set at time t.
pub fn prepare(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    flow: Option<&FlowTarget>,
) -> Result<Vec<Splat2D>> {
    let nd = set.dynamics.len();
    let n = set.len();
    let mut splats = Vec::with_capacity(n);
    let weights: Option<SplineWeights> = if nd > 0 {
        Some(hermite_weights(&set.dynamics.knot_times, t)?)
    } else {
        None
    };
    let weights2: Option<SplineWeights> = match (nd > 0, flow) {
        (true, Some(f)) => Some(hermite_weights(&set.dynamics.knot_times, f.t2)?),
        _ => None,
    };

    for i in 0..n {
        let (pos, q_raw, log_s, logit_a, log_e) = if i < nd {
            let w = weights.as_ref().unwrap();
            let ctrl = set.dynamics.ctrl_of(i);
            let mut p = Vector3::zeros();
            for k in 0..w.count {
                p += ctrl[w.first + k] * w.w[k];
            }
            let q = set.dynamics.quat_poly(i).eval_raw(t);
            (
                p,
                q,
                set.dynamics.log_scaling[i],
                set.dynamics.logit_opacity[i],
                set.dynamics.log_irradiance[i],
            )
        } else {
            let j = i - nd;
            (
                set.statics.position[j],
                set.statics.rotation[j],
                set.statics.log_scaling[j],
                set.statics.logit_opacity[j],
                set.statics.log_irradiance[j],
            )
        };
        let Some((mean2d, cov2d, view_depth)) = project_gaussian_2d(&pos, &q_raw, &log_s, cam)
        else {
            continue;
        };
        let (inv_cov, _det) = inv2x2(&cov2d);
        let radius = 3.0 * max_eigen_2x2(&cov2d).max(0.0).sqrt();
        let x_cam = cam.to_camera(&pos);

        let mut disp = Vector2::zeros();
        let mut pos2 = pos;
        let mut x_cam2 = x_cam;
        let mut flow_valid = false;
        if let Some(f) = flow {
            pos2 = if i < nd {
                let w2 = weights2.as_ref().unwrap();
                let ctrl = set.dynamics.ctrl_of(i);
                let mut p = Vector3::zeros();
                for k in 0..w2.count {
                    p += ctrl[w2.first + k] * w2.w[k];
                }
                p
            } else {
                pos
            };
            x_cam2 = f.cam2.to_camera(&pos2);
            if let Ok(m2) = f.cam2.project(&x_cam2) {
                disp = m2 - mean2d;
                flow_valid = true;
            }
        }

        splats.push(Splat2D {
            index: i,
            mean2d,
            cov2d,
            inv_cov,
            view_depth,
            radius,
            alpha: decode_opacity(logit_a),
            rgb: log_e.map(f64::exp),
            disp,
            pos_world: pos,
            q_raw,
            x_cam,
            pos_world2: pos2,
            x_cam2,
            flow_valid,
        });
    }
    splats.sort_by(|a, b| {
        a.view_depth
            .partial_cmp(&b.view_depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    Ok(splats)
}

/// One blended contribution: splat slot, blending weight and the
/// transmittance in front of it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contrib {
    pub s: usize,
    pub sigma: f64,
    pub trans: f64,
}

/// Walk depth-ordered candidates at a pixel, applying the skip and
/// termination rules shared by forward and backward.
pub(crate) fn gather_pixel(
    px: f64,
    py: f64,
    splats: &[Splat2D],
    candidates: &[usize],
    out: &mut Vec<Contrib>,
) {
    out.clear();
    let mut trans = 1.0;
    for &s in candidates {
        if trans < MIN_TRANSMITTANCE {
            break;
        }
        let sp = &splats[s];
        let d = Vector2::new(px - sp.mean2d.x, py - sp.mean2d.y);
        let m = (sp.inv_cov * d).dot(&d);
        if m > MAX_MAHAL_SQ {
            continue;
        }
        let sigma = (sp.alpha * (-0.5 * m).exp()).min(SIGMA_CLAMP);
        if sigma < MIN_CONTRIB {
            continue;
        }
        out.push(Contrib { s, sigma, trans });
        trans *= 1.0 - sigma;
    }
}

fn blend_channels(splats: &[Splat2D], contribs: &[Contrib], want_flow: bool) -> [f64; 7] {
    // hdr r,g,b | depth | alpha | flow x,y
    let mut acc = [0.0; 7];
    for c in contribs {
        let sp = &splats[c.s];
        let w = c.sigma * c.trans;
        acc[0] += sp.rgb.x * w;
        acc[1] += sp.rgb.y * w;
        acc[2] += sp.rgb.z * w;
        acc[3] += sp.view_depth * w;
        acc[4] += w;
        if want_flow {
            acc[5] += sp.disp.x * w;
            acc[6] += sp.disp.y * w;
        }
    }
    acc
}

fn empty_output(h: usize, w: usize, want_flow: bool) -> RenderOutput {
    RenderOutput {
        hdr: Image::zeros(h, w, 3),
        depth: Image::zeros(h, w, 1),
        alpha: Image::zeros(h, w, 1),
        flow: want_flow.then(|| Image::zeros(h, w, 2)),
    }
}

/// Tile layout and per-tile depth-ordered candidate lists.
pub(crate) struct TileBins {
    pub tx: usize,
    pub ty: usize,
    pub lists: Vec<Vec<usize>>,
}

pub(crate) fn bin_tiles(splats: &[Splat2D], width: usize, height: usize) -> TileBins {
    let tx = width.div_ceil(TILE);
    let ty = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tx * ty];
    for (s, sp) in splats.iter().enumerate() {
        let x0 = sp.mean2d.x - sp.radius;
        let x1 = sp.mean2d.x + sp.radius;
        let y0 = sp.mean2d.y - sp.radius;
        let y1 = sp.mean2d.y + sp.radius;
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0) as usize) / TILE;
        let ty0 = (y0.max(0.0) as usize) / TILE;
        let tx1 = ((x1 as usize).min(width - 1)) / TILE;
        let ty1 = ((y1 as usize).min(height - 1)) / TILE;
        for tyy in ty0..=ty1 {
            for txx in tx0..=tx1 {
                lists[tyy * tx + txx].push(s);
            }
        }
    }
    TileBins { tx, ty, lists }
}

/// Tiled forward render.
pub fn render(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    flow: Option<&FlowTarget>,
) -> Result<RenderOutput> {
    let (h, w) = (cam.height, cam.width);
    let want_flow = flow.is_some();
    if set.is_empty() {
        return Ok(empty_output(h, w, want_flow));
    }
    let splats = prepare(set, cam, t, flow)?;
    let bins = bin_tiles(&splats, w, h);

    struct TileOut {
        x0: usize,
        y0: usize,
        tw: usize,
        th: usize,
        acc: Vec<[f64; 7]>,
    }

    let tiles: Vec<TileOut> = (0..bins.tx * bins.ty)
        .into_par_iter()
        .map(|ti| {
            let x0 = (ti % bins.tx) * TILE;
            let y0 = (ti / bins.tx) * TILE;
            let tw = TILE.min(w - x0);
            let th = TILE.min(h - y0);
            let cand = &bins.lists[ti];
            let mut acc = vec![[0.0; 7]; tw * th];
            let mut contribs = Vec::new();
            for yy in 0..th {
                for xx in 0..tw {
                    let px = (x0 + xx) as f64;
                    let py = (y0 + yy) as f64;
                    gather_pixel(px, py, &splats, cand, &mut contribs);
                    acc[yy * tw + xx] = blend_channels(&splats, &contribs, want_flow);
                }
            }
            TileOut {
                x0,
                y0,
                tw,
                th,
                acc,
            }
        })
        .collect();

    let mut out = empty_output(h, w, want_flow);
    for tile in &tiles {
        for yy in 0..tile.th {
            for xx in 0..tile.tw {
                let (x, y) = (tile.x0 + xx, tile.y0 + yy);
                let a = &tile.acc[yy * tile.tw + xx];
                for c in 0..3 {
                    *out.hdr.at_mut(y, x, c) = a[c];
                }
                *out.depth.at_mut(y, x, 0) = a[3];
                *out.alpha.at_mut(y, x, 0) = a[4];
                if let Some(f) = out.flow.as_mut() {
                    *f.at_mut(y, x, 0) = a[5];
                    *f.at_mut(y, x, 1) = a[6];
                }
            }
        }
    }
    Ok(out)
}

/// Brute-force reference renderer: every pixel walks the full depth-sorted
/// splat list. Oracle for the tiled path.
pub fn render_brute(
    set: &GaussianSet,
    cam: &Camera,
    t: f64,
    flow: Option<&FlowTarget>,
) -> Result<RenderOutput> {
    let (h, w) = (cam.height, cam.width);
    let want_flow = flow.is_some();
    if set.is_empty() {
        return Ok(empty_output(h, w, want_flow));
    }
    let splats = prepare(set, cam, t, flow)?;
    let all: Vec<usize> = (0..splats.len()).collect();
    let mut out = empty_output(h, w, want_flow);
    let mut contribs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            gather_pixel(x as f64, y as f64, &splats, &all, &mut contribs);
            let a = blend_channels(&splats, &contribs, want_flow);
            for c in 0..3 {
                *out.hdr.at_mut(y, x, c) = a[c];
            }
            *out.depth.at_mut(y, x, 0) = a[3];
            *out.alpha.at_mut(y, x, 0) = a[4];
            if let Some(f) = out.flow.as_mut() {
                *f.at_mut(y, x, 0) = a[5];
                *f.at_mut(y, x, 1) = a[6];
            }
        }
    }
    Ok(out)
}
