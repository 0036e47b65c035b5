//! Exposure-aware LDR formation: the synthetic ground-truth camera response
//! and the learnable log-domain tone mapper.
//!
//! The tone mapper is three independent single-hidden-layer MLPs (one per
//! RGB channel), each mapping the scalar log(e * dt) to an LDR value in
//! (0, 1) through a sigmoid.

use crate::img::Image;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const HIDDEN: usize = 128;
/// Irradiance floor applied before taking the log.
pub const HDR_FLOOR: f64 = 1e-6;

/// Synthetic camera response: L = (H dt / (H dt + 1))^(1/2.2).
pub fn synthetic_crf(hdr: f64, dt: f64) -> f64 {
    let x = hdr * dt;
    (x / (x + 1.0)).powf(1.0 / 2.2)
}

/// Unit-exposure anchor of the synthetic response, f(1).
pub fn synthetic_crf_c0() -> f64 {
    0.5f64.powf(1.0 / 2.2)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Mlp {
    fn init(rng: &mut StdRng) -> Self {
        let w1: Vec<f64> = (0..HIDDEN).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b1: Vec<f64> = (0..HIDDEN).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2: Vec<f64> = (0..HIDDEN).map(|_| rng.gen_range(-0.1..0.1)).collect();
        // Output bias chosen so phi(0) = 0.5 at init.
        let out0: f64 = (0..HIDDEN).map(|i| w2[i] * b1[i].max(0.0)).sum();
        Mlp {
            w1,
            b1,
            w2,
            b2: -out0,
        }
    }

    /// phi(x) and d phi / dx.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        let mut pre = 0.0;
        let mut dpre = 0.0;
        for i in 0..HIDDEN {
            let h = self.w1[i] * x + self.b1[i];
            if h > 0.0 {
                pre += self.w2[i] * h;
                dpre += self.w2[i] * self.w1[i];
            }
        }
        pre += self.b2;
        let y = sigmoid(pre);
        (y, y * (1.0 - y) * dpre)
    }

    /// Accumulate parameter gradients for upstream dL/dy at input x and
    /// return dL/dx.
    pub fn backward(&self, x: f64, upstream: f64, grad: &mut MlpGrad) -> f64 {
        let mut pre = 0.0;
        for i in 0..HIDDEN {
            let h = self.w1[i] * x + self.b1[i];
            if h > 0.0 {
                pre += self.w2[i] * h;
            }
        }
        pre += self.b2;
        let y = sigmoid(pre);
        let g_pre = upstream * y * (1.0 - y);
        let mut g_x = 0.0;
        for i in 0..HIDDEN {
            let h = self.w1[i] * x + self.b1[i];
            if h > 0.0 {
                grad.w2[i] += g_pre * h;
                let g_h = g_pre * self.w2[i];
                grad.w1[i] += g_h * x;
                grad.b1[i] += g_h;
                g_x += g_h * self.w1[i];
            }
        }
        grad.b2 += g_pre;
        g_x
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpGrad {
    pub fn zeros() -> Self {
        MlpGrad {
            w1: vec![0.0; HIDDEN],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; HIDDEN],
            b2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToneMapper {
    pub channels: [Mlp; 3],
}

#[derive(Debug, Clone)]
pub struct ToneMapperGrad {
    pub channels: [MlpGrad; 3],
}

impl ToneMapperGrad {
    pub fn zeros() -> Self {
        ToneMapperGrad {
            channels: [MlpGrad::zeros(), MlpGrad::zeros(), MlpGrad::zeros()],
        }
    }

    pub fn add(&mut self, other: &ToneMapperGrad) {
        for c in 0..3 {
            for i in 0..HIDDEN {
                self.channels[c].w1[i] += other.channels[c].w1[i];
                self.channels[c].b1[i] += other.channels[c].b1[i];
                self.channels[c].w2[i] += other.channels[c].w2[i];
            }
            self.channels[c].b2 += other.channels[c].b2;
        }
    }
}

impl ToneMapper {
    pub fn new(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        ToneMapper {
            channels: [
                Mlp::init(&mut rng),
                Mlp::init(&mut rng),
                Mlp::init(&mut rng),
            ],
        }
    }

    /// phi for one channel at log-exposure x.
    pub fn phi(&self, channel: usize, x: f64) -> f64 {
        self.channels[channel].forward(x).0
    }

    /// Map an HDR image to LDR at exposure dt.
    pub fn tone_map(&self, hdr: &Image, dt: f64) -> Image {
        let log_dt = dt.ln();
        let mut out = Image::zeros(hdr.h, hdr.w, hdr.c);
        for (i, &e) in hdr.data.iter().enumerate() {
            let ch = i % hdr.c;
            let x = e.max(HDR_FLOOR).ln() + log_dt;
            out.data[i] = self.channels[ch].forward(x).0;
        }
        out
    }

    /// Backward of `tone_map`: gradients with respect to the HDR input and
    /// the tone-mapper weights.
    pub fn tone_map_backward(
        &self,
        hdr: &Image,
        dt: f64,
        upstream: &Image,
    ) -> (Image, ToneMapperGrad) {
        let log_dt = dt.ln();
        let mut g_hdr = Image::zeros(hdr.h, hdr.w, hdr.c);
        let mut g_tm = ToneMapperGrad::zeros();
        for (i, &e) in hdr.data.iter().enumerate() {
            let up = upstream.data[i];
            if up == 0.0 {
                continue;
            }
            let ch = i % hdr.c;
            let x = e.max(HDR_FLOOR).ln() + log_dt;
            let g_x = self.channels[ch].backward(x, up, &mut g_tm.channels[ch]);
            if e > HDR_FLOOR {
                g_hdr.data[i] = g_x / e;
            }
        }
        (g_hdr, g_tm)
    }

    /// Invert the tone mapper at one LDR value: find e with
    /// phi(log(e * dt)) ~= ldr. Grid scan plus local bisection; robust even
    /// for an untrained (possibly non-monotone) mapper.
    pub fn invert(&self, channel: usize, ldr: f64, dt: f64) -> f64 {
        const LO: f64 = -12.0;
        const HI: f64 = 8.0;
        const GRID: usize = 64;
        let log_dt = dt.ln();
        let f = |log_e: f64| self.channels[channel].forward(log_e + log_dt).0 - ldr;
        let mut best_x = LO;
        let mut best = f64::INFINITY;
        let mut prev_x = LO;
        let mut prev_v = f(LO);
        let mut bracket = None;
        for i in 0..=GRID {
            let x = LO + (HI - LO) * i as f64 / GRID as f64;
            let v = f(x);
            if v.abs() < best {
                best = v.abs();
                best_x = x;
            }
            if i > 0 && bracket.is_none() && prev_v.signum() != v.signum() {
                bracket = Some((prev_x, x));
            }
            prev_x = x;
            prev_v = v;
        }
        let x = if let Some((mut a, mut b)) = bracket {
            for _ in 0..40 {
                let m = 0.5 * (a + b);
                if f(a).signum() == f(m).signum() {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        } else {
            best_x
        };
        x.exp()
    }

    /// Squared error between phi(0) per channel and the anchor C0, summed
    /// over channels, with its weight gradient.
    pub fn unit_exposure_loss(&self, c0: f64) -> (f64, ToneMapperGrad) {
        let mut loss = 0.0;
        let mut grad = ToneMapperGrad::zeros();
        for ch in 0..3 {
            let y = self.channels[ch].forward(0.0).0;
            loss += (y - c0) * (y - c0);
            self.channels[ch].backward(0.0, 2.0 * (y - c0), &mut grad.channels[ch]);
        }
        (loss, grad)
    }
}
