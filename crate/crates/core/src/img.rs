//! Dense row-major image buffers used throughout the engine.

use crate::{Error, Result};

/// H x W x C image of f64 values, row major, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut im = Self::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    im.data[(y * w + x) * c + k] = f(y, x, k);
                }
            }
        }
        im
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, k: usize) -> usize {
        (y * self.w + x) * self.c + k
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + k]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, k: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + k]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.c, other.h, other.w, other.c
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample of channel values at continuous pixel position (x, y),
    /// where integer coordinates are pixel centers. Returns None out of bounds.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.w - 1) as f64 && y <= (self.h - 1) as f64) {
            return false;
        }
        let x0 = x.floor().min((self.w - 1) as f64);
        let y0 = y.floor().min((self.h - 1) as f64);
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        for k in 0..self.c {
            let v00 = self.at(y0, x0, k);
            let v01 = self.at(y0, x1, k);
            let v10 = self.at(y1, x0, k);
            let v11 = self.at(y1, x1, k);
            out[k] = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
        true
    }

    /// Partial derivative of the bilinear sample with respect to (x, y).
    /// Must only be called where `sample_bilinear` returned true.
    pub fn sample_bilinear_grad_pos(&self, x: f64, y: f64, dx: &mut [f64], dy: &mut [f64]) {
        let x0 = x.floor().min((self.w - 1) as f64);
        let y0 = y.floor().min((self.h - 1) as f64);
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        for k in 0..self.c {
            let v00 = self.at(y0, x0, k);
            let v01 = self.at(y0, x1, k);
            let v10 = self.at(y1, x0, k);
            let v11 = self.at(y1, x1, k);
            dx[k] = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy;
            dy[k] = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx;
        }
    }

    /// Scatter an upstream gradient through a bilinear sample back into `grad`
    /// (a gradient buffer with this image's shape).
    pub fn scatter_bilinear_grad(&self, grad: &mut Image, x: f64, y: f64, upstream: &[f64]) {
        let x0 = x.floor().min((self.w - 1) as f64);
        let y0 = y.floor().min((self.h - 1) as f64);
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        for k in 0..self.c {
            let g = upstream[k];
            *grad.at_mut(y0, x0, k) += g * (1.0 - fx) * (1.0 - fy);
            *grad.at_mut(y0, x1, k) += g * fx * (1.0 - fy);
            *grad.at_mut(y1, x0, k) += g * (1.0 - fx) * fy;
            *grad.at_mut(y1, x1, k) += g * fx * fy;
        }
    }
}
