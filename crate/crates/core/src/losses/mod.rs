//! Training objectives: photometric/prior supervision on rendered images,
//! motion regularization on dynamic trajectories, temporal luminance
//! regularization and HDR photometric reprojection.
//!
//! Image-level losses return the loss value together with the gradient image
//! with respect to the rendered input, which the pipeline feeds into the
//! rasterizer's backward pass.

pub mod motion;
pub mod warp;

pub use motion::{arap_loss, smoothness_losses, ArapGraph, SmoothnessResult};
pub use warp::{reprojection_loss, tlr_loss, PoseGrads};

use crate::img::Image;
use crate::metrics::ssim_with_grad;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// DSSIM share inside the RGB loss.
pub const RGB_DSSIM_WEIGHT: f64 = 0.2;

/// Sign with the L1 subgradient convention sgn(0) = 0 (f64::signum(0.0) is 1).
#[inline]
fn l1_sign(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d.signum()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub ue: f64,
    pub dep: f64,
    pub track: f64,
    pub arap: f64,
    pub vel: f64,
    pub acc: f64,
    pub tlr: f64,
    pub pr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 1.0,
            ue: 10.0,
            dep: 1.0,
            track: 0.01,
            arap: 0.01,
            vel: 10.0,
            acc: 10.0,
            tlr: 0.1,
            pr: 1.0,
        }
    }
}

/// Unweighted per-term values of one optimization step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub ue: f64,
    pub dep: f64,
    pub track: f64,
    pub arap: f64,
    pub vel: f64,
    pub acc: f64,
    pub tlr: f64,
    pub pr: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("rgb", self.rgb),
            ("ue", self.ue),
            ("dep", self.dep),
            ("track", self.track),
            ("arap", self.arap),
            ("vel", self.vel),
            ("acc", self.acc),
            ("tlr", self.tlr),
            ("pr", self.pr),
        ]
    }
}

/// Weighted sum of all terms; a NaN in any term is an error naming it.
pub fn total_loss(terms: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    let weights = [
        w.rgb, w.ue, w.dep, w.track, w.arap, w.vel, w.acc, w.tlr, w.pr,
    ];
    let mut total = 0.0;
    for ((name, v), lam) in terms.terms().into_iter().zip(weights) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        total += lam * v;
    }
    Ok(total)
}

/// 0.2 * DSSIM + 0.8 * mean L1 between rendered and observed LDR, with the
/// gradient with respect to the rendered image.
pub fn rgb_loss(render: &Image, gt: &Image) -> Result<(f64, Image)> {
    render.check_same_shape(gt, "rgb_loss")?;
    let (ssim, ssim_grad) = ssim_with_grad(render, gt)?;
    let dssim = (1.0 - ssim) / 2.0;
    let n = render.data.len() as f64;
    let l1: f64 = render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    let loss = RGB_DSSIM_WEIGHT * dssim + (1.0 - RGB_DSSIM_WEIGHT) * l1;
    let mut grad = Image::zeros(render.h, render.w, render.c);
    for i in 0..render.data.len() {
        let sgn = l1_sign(render.data[i] - gt.data[i]);
        grad.data[i] =
            RGB_DSSIM_WEIGHT * (-0.5) * ssim_grad.data[i] + (1.0 - RGB_DSSIM_WEIGHT) * sgn / n;
    }
    Ok((loss, grad))
}

/// Mean L1 between rendered and prior depth, with gradient.
pub fn depth_loss(render: &Image, prior: &Image) -> Result<(f64, Image)> {
    render.check_same_shape(prior, "depth_loss")?;
    let n = render.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Image::zeros(render.h, render.w, render.c);
    for i in 0..render.data.len() {
        let d = render.data[i] - prior.data[i];
        loss += d.abs();
        grad.data[i] = l1_sign(d) / n;
    }
    Ok((loss / n, grad))
}

/// Masked L1 on a rendered flow/track map: per valid pixel, the sum of
/// absolute component differences; mean over valid pixels.
///
/// Returns `(loss, gradient, any_valid)`; an all-invalid mask yields zero
/// loss with `any_valid = false`.
pub fn track_flow_loss(render: &Image, prior: &Image, valid: &Image) -> Result<(f64, Image, bool)> {
    render.check_same_shape(prior, "track_flow_loss")?;
    if valid.h != render.h || valid.w != render.w || valid.c != 1 {
        return Err(Error::ShapeMismatch("track_flow_loss mask".into()));
    }
    let count = valid.data.iter().filter(|&&m| m > 0.5).count();
    let mut grad = Image::zeros(render.h, render.w, render.c);
    if count == 0 {
        return Ok((0.0, grad, false));
    }
    let mut loss = 0.0;
    for y in 0..render.h {
        for x in 0..render.w {
            if valid.at(y, x, 0) < 0.5 {
                continue;
            }
            for ch in 0..render.c {
                let d = render.at(y, x, ch) - prior.at(y, x, ch);
                loss += d.abs();
                *grad.at_mut(y, x, ch) = l1_sign(d) / count as f64;
            }
        }
    }
    Ok((loss / count as f64, grad, true))
}
