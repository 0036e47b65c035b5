//! Cubic Hermite spline trajectories with Catmull-Rom style tangents.

use crate::{Error, Result};
use nalgebra::Vector3;

/// Position trajectory defined by control points at strictly increasing
/// normalized timestamps. Evaluation is linear in the control points; the
/// per-point weights are exposed for analytic backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineTrajectory {
    times: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
}

/// Non-zero control-point weights of one evaluation: `value = sum w_i p_i`.
/// At most four points participate (the segment ends and their neighbors).
#[derive(Debug, Clone, Copy)]
pub struct SplineWeights {
    pub first: usize,
    pub count: usize,
    pub w: [f64; 4],
}

impl SplineTrajectory {
    pub fn new(times: Vec<f64>, points: Vec<Vector3<f64>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: times.len(),
            });
        }
        if times.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "spline: {} timestamps vs {} points",
                times.len(),
                points.len()
            )));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig(
                "spline timestamps not strictly increasing".into(),
            ));
        }
        Ok(SplineTrajectory { times, points })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_control(&self) -> usize {
        self.times.len()
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> Result<Vector3<f64>> {
        let w = self.weights(t)?;
        let mut out = Vector3::zeros();
        for i in 0..w.count {
            out += self.points[w.first + i] * w.w[i];
        }
        Ok(out)
    }

    /// Control-point weights at time t. No extrapolation.
    pub fn weights(&self, t: f64) -> Result<SplineWeights> {
        hermite_weights(&self.times, t)
    }

    /// Scatter a gradient on the evaluated position into control point grads.
    pub fn backward(&self, weights: &SplineWeights, grad: &Vector3<f64>, out: &mut [Vector3<f64>]) {
        for i in 0..weights.count {
            out[weights.first + i] += grad * weights.w[i];
        }
    }
}

/// Hermite control-point weights for knot timestamps `times` at time t.
/// Evaluation is `sum w_i p_i` over the returned index range.
pub fn hermite_weights(times: &[f64], t: f64) -> Result<SplineWeights> {
    let lo = times[0];
    let hi = *times.last().unwrap();
    if !(t >= lo && t <= hi) {
        return Err(Error::TimeOutOfRange { t, lo, hi });
    }
    let n = times.len();
    // Segment index k with t in [t_k, t_{k+1}].
    let k = match times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    let dk = times[k + 1] - times[k];
    let tb = (t - times[k]) / dk;
    let t2 = tb * tb;
    let t3 = t2 * tb;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + tb;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;

    // Tangent m_k as weights over neighboring control points; one-sided at
    // the boundary knots.
    let first = k.saturating_sub(1);
    let mut acc = [0.0f64; 4];
    let mut add = |idx: usize, v: f64| acc[idx - first] += v;

    add(k, h00);
    add(k + 1, h01);

    // h10 * dk * m_k
    let c = h10 * dk;
    if k == 0 {
        // m_0 = (p_1 - p_0) / d_0
        add(1, c / dk);
        add(0, -c / dk);
    } else {
        let dprev = times[k] - times[k - 1];
        add(k + 1, c * 0.5 / dk);
        add(k, c * (0.5 / dprev - 0.5 / dk));
        add(k - 1, -c * 0.5 / dprev);
    }
    // h11 * dk * m_{k+1}
    let c = h11 * dk;
    if k + 1 == n - 1 {
        // m_last = (p_last - p_{last-1}) / d_last
        add(k + 1, c / dk);
        add(k, -c / dk);
    } else {
        let dnext = times[k + 2] - times[k + 1];
        add(k + 2, c * 0.5 / dnext);
        add(k + 1, c * (0.5 / dk - 0.5 / dnext));
        add(k, -c * 0.5 / dk);
    }

    let last = (k + 2).min(n - 1);
    Ok(SplineWeights {
        first,
        count: last - first + 1,
        w: acc,
    })
}
