//! Adam optimizer over flat f64 parameter buffers.
//!
//! Each parameter group (control points, quaternion coefficients, scalings,
//! opacities, irradiances, poses, tone-mapper weights) owns one `Adam`
//! instance. Moment buffers can be compacted and extended in lockstep with
//! Gaussian densification and pruning.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, group: &str) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam group {group}: state {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of group {group}")));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    /// Keep the state of entries whose flag is set; entry i covers the value
    /// range `[i*stride, (i+1)*stride)`. Mirrors block `retain` calls.
    pub fn retain(&mut self, keep: &[bool], stride: usize) {
        let mut w = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                if w != i {
                    for j in 0..stride {
                        self.m[w * stride + j] = self.m[i * stride + j];
                        self.v[w * stride + j] = self.v[i * stride + j];
                    }
                }
                w += 1;
            }
        }
        self.m.truncate(w * stride);
        self.v.truncate(w * stride);
    }

    /// Append zero-initialized state for newly created parameters.
    pub fn extend(&mut self, n_values: usize) {
        self.m.extend(std::iter::repeat(0.0).take(n_values));
        self.v.extend(std::iter::repeat(0.0).take(n_values));
    }
}
