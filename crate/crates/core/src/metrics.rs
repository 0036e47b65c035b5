//! Evaluation metrics: PSNR, SSIM (with an analytic image gradient reused by
//! the photometric loss), mu-law HDR comparison and HDR-TAE temporal
//! stability.

use crate::img::Image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WIN: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const MU: f64 = 5000.0;

/// Peak signal-to-noise ratio against peak 1.0, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-region separable Gaussian filtering of one channel plane:
/// output is (h - 10) x (w - 10).
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let vw = w - SSIM_WIN + 1;
    let vh = h - SSIM_WIN + 1;
    let mut tmp = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * plane[y * w + x + j];
            }
            tmp[y * vw + x] = s;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut s = 0.0;
            for (i, ki) in k.iter().enumerate() {
                s += ki * tmp[(y + i) * vw + x];
            }
            out[y * vw + x] = s;
        }
    }
    out
}

/// Transpose of `filter_valid`: scatter valid-region coefficients back onto
/// the full plane.
fn filter_valid_transpose(c: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let vw = w - SSIM_WIN + 1;
    let vh = h - SSIM_WIN + 1;
    let mut tmp = vec![0.0; h * vw];
    for y in 0..vh {
        for x in 0..vw {
            let v = c[y * vw + x];
            if v == 0.0 {
                continue;
            }
            for (i, ki) in k.iter().enumerate() {
                tmp[(y + i) * vw + x] += ki * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..vw {
            let v = tmp[y * vw + x];
            if v == 0.0 {
                continue;
            }
            for (j, kj) in k.iter().enumerate() {
                out[y * w + x + j] += kj * v;
            }
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    (0..img.h * img.w)
        .map(|i| img.data[i * img.c + ch])
        .collect()
}

struct SsimChannel {
    mean: f64,
    /// dL/da per plane pixel for L = mean local SSIM of this channel.
    grad_a: Vec<f64>,
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize, with_grad: bool) -> SsimChannel {
    let k = gaussian_kernel();
    let vw = w - SSIM_WIN + 1;
    let vh = h - SSIM_WIN + 1;
    let n = (vh * vw) as f64;
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_a2 = filter_valid(&a2, h, w, &k);
    let e_b2 = filter_valid(&b2, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);

    let mut total = 0.0;
    let mut c_mu = vec![0.0; vh * vw];
    let mut c_ea2 = vec![0.0; vh * vw];
    let mut c_eab = vec![0.0; vh * vw];
    for p in 0..vh * vw {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = e_a2[p] - ma * ma;
        let vb = e_b2[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2t = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2t = va + vb + SSIM_C2;
        let d = b1 * b2t;
        let s = a1 * a2t / d;
        total += s;
        if with_grad {
            // dS/d mu_a through A1, B1, var_a, cov
            c_mu[p] = (2.0 * mb * a2t / d - 2.0 * ma * s / b1 + 2.0 * ma * s / b2t
                - 2.0 * mb * a1 / d)
                / n;
            // dS/d E[a^2] = -S / B2
            c_ea2[p] = -s / b2t / n;
            // dS/d E[ab] = 2 A1 / D
            c_eab[p] = 2.0 * a1 / d / n;
        }
    }
    let mean = total / n;
    if !with_grad {
        return SsimChannel {
            mean,
            grad_a: Vec::new(),
        };
    }
    let t_mu = filter_valid_transpose(&c_mu, h, w, &k);
    let t_ea2 = filter_valid_transpose(&c_ea2, h, w, &k);
    let t_eab = filter_valid_transpose(&c_eab, h, w, &k);
    let grad_a: Vec<f64> = (0..h * w)
        .map(|i| t_mu[i] + 2.0 * a[i] * t_ea2[i] + b[i] * t_eab[i])
        .collect();
    SsimChannel { mean, grad_a }
}

fn check_ssim_shapes(a: &Image, b: &Image) -> Result<()> {
    a.check_same_shape(b, "ssim")?;
    if a.h < SSIM_WIN || a.w < SSIM_WIN {
        return Err(Error::ImageTooSmall {
            h: a.h,
            w: a.w,
            win: SSIM_WIN,
        });
    }
    Ok(())
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_shapes(a, b)?;
    let mut total = 0.0;
    for ch in 0..a.c {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        total += ssim_channel(&pa, &pb, a.h, a.w, false).mean;
    }
    Ok(total / a.c as f64)
}

/// SSIM and its analytic gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_ssim_shapes(a, b)?;
    let mut total = 0.0;
    let mut grad = Image::zeros(a.h, a.w, a.c);
    for ch in 0..a.c {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        let r = ssim_channel(&pa, &pb, a.h, a.w, true);
        total += r.mean;
        for i in 0..a.h * a.w {
            grad.data[i * a.c + ch] = r.grad_a[i] / a.c as f64;
        }
    }
    Ok((total / a.c as f64, grad))
}

/// Mu-law tone mapping for HDR comparison: the image is normalized by its
/// own maximum, then mapped through log(1 + mu x) / log(1 + mu).
pub fn mu_law(hdr: &Image) -> Image {
    let m = hdr.max_value();
    if m <= 0.0 {
        return Image::zeros(hdr.h, hdr.w, hdr.c);
    }
    let denom = (1.0 + MU).ln();
    hdr.map(|v| ((1.0 + MU * (v / m).clamp(0.0, 1.0)).ln()) / denom)
}

/// Align `pred` to `gt` by a per-channel least-squares scale.
///
/// The per-channel tone mappers leave the radiance of each channel known
/// only up to scale, so HDR comparisons first remove that gauge freedom.
pub fn scale_align_channels(pred: &Image, gt: &Image) -> Result<Image> {
    pred.check_same_shape(gt, "scale_align_channels")?;
    let mut out = pred.clone();
    for ch in 0..pred.c {
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..pred.h * pred.w {
            let r = pred.data[p * pred.c + ch];
            let g = gt.data[p * pred.c + ch];
            num += r * g;
            den += r * r;
        }
        if den <= 0.0 {
            continue;
        }
        let k = num / den;
        for p in 0..pred.h * pred.w {
            out.data[p * pred.c + ch] *= k;
        }
    }
    Ok(out)
}

/// Temporal stability of an HDR sequence: symmetric flow-warped normalized
/// difference averaged over adjacent frame pairs.
///
/// `flows_fwd[t]` maps frame t to t+1 (backward-warping sample positions),
/// `flows_bwd[t]` maps frame t+1 to t; masks are per-pair validity.
pub fn hdr_tae(
    frames: &[Image],
    flows_fwd: &[Image],
    flows_bwd: &[Image],
    masks_fwd: &[Image],
    masks_bwd: &[Image],
) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: frames.len(),
        });
    }
    let np = frames.len() - 1;
    if flows_fwd.len() != np
        || flows_bwd.len() != np
        || masks_fwd.len() != np
        || masks_bwd.len() != np
    {
        return Err(Error::ShapeMismatch("hdr_tae pair counts".into()));
    }
    let mut total = 0.0;
    for t in 0..np {
        let e_fwd = warp_error(&frames[t + 1], &frames[t], &flows_fwd[t], &masks_fwd[t])?;
        let e_bwd = warp_error(&frames[t], &frames[t + 1], &flows_bwd[t], &masks_bwd[t])?;
        total += 0.5 * (e_fwd + e_bwd);
    }
    Ok(total / np as f64)
}

/// Mean normalized absolute difference between `target` and `source` warped
/// toward it: per pixel u, compare source(u + flow(u)) with target(u).
fn warp_error(source: &Image, target: &Image, flow: &Image, mask: &Image) -> Result<f64> {
    target.check_same_shape(source, "warp_error frames")?;
    if flow.h != target.h || flow.w != target.w || flow.c != 2 {
        return Err(Error::ShapeMismatch("warp_error flow".into()));
    }
    let c = target.c;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut buf = vec![0.0; c];
    for y in 0..target.h {
        for x in 0..target.w {
            if mask.at(y, x, 0) < 0.5 {
                continue;
            }
            let sx = x as f64 + flow.at(y, x, 0);
            let sy = y as f64 + flow.at(y, x, 1);
            if !source.sample_bilinear(sx, sy, &mut buf) {
                continue;
            }
            for (ch, &warped) in buf.iter().enumerate() {
                let tv = target.at(y, x, ch);
                let denom = warped + tv;
                if denom < 1e-8 {
                    continue;
                }
                sum += (warped - tv).abs() / denom;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Per-frame PSNR/SSIM series.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MetricSeries {
    pub fn push(&mut self, psnr: f64, ssim: f64) {
        self.psnr.push(psnr);
        self.ssim.push(ssim);
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Full evaluation report: LDR at observed exposures, LDR at novel
/// exposures, mu-law HDR, and temporal stability.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub ldr_oe: MetricSeries,
    pub ldr_ne: MetricSeries,
    pub hdr_mu: MetricSeries,
    pub hdr_tae: Option<f64>,
    /// Mean rotation error of refined poses against ground truth, degrees.
    pub pose_rot_err_deg: Option<f64>,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric         frames   PSNR     SSIM\n");
        for (name, m) in [
            ("LDR-OE", &self.ldr_oe),
            ("LDR-NE", &self.ldr_ne),
            ("HDR(mu)", &self.hdr_mu),
        ] {
            s.push_str(&format!(
                "{name:<14} {:>6}  {:>7.3}  {:>7.4}\n",
                m.len(),
                m.mean_psnr(),
                m.mean_ssim()
            ));
        }
        if let Some(tae) = self.hdr_tae {
            s.push_str(&format!("HDR-TAE               {tae:>8.5}\n"));
        }
        if let Some(deg) = self.pose_rot_err_deg {
            s.push_str(&format!("pose rot err          {deg:>8.4} deg\n"));
        }
        s
    }
}
