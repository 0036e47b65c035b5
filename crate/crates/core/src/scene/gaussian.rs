//! Gaussian attribute storage and covariance math.
//!
//! Attributes live in unconstrained storage space: log scaling, logit
//! opacity, log irradiance. Dynamic Gaussians carry a spline position
//! trajectory and a cubic quaternion polynomial; all dynamic Gaussians in a
//! set share the same knot timestamps, so storage is struct-of-arrays with a
//! uniform stride.

use crate::geometry::quat::{self, QuatPolynomial};
use crate::geometry::spline::{hermite_weights, SplineTrajectory};
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3, Vector4};

/// Scaling clamp in linear units before squaring into the covariance.
pub const SCALE_MIN: f64 = 1e-8;
pub const SCALE_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Video,
    World,
}

#[inline]
pub fn decode_scaling(log_scaling: &Vector3<f64>) -> Vector3<f64> {
    log_scaling.map(|v| v.exp().clamp(SCALE_MIN, SCALE_MAX))
}

#[inline]
pub fn decode_opacity(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit).exp())
}

#[inline]
pub fn encode_opacity(alpha: f64) -> f64 {
    (alpha / (1.0 - alpha)).ln()
}

/// Covariance from rotation quaternion and log scalings: R S S^T R^T.
pub fn build_covariance(rotation: &Vector4<f64>, log_scaling: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat::rotmat(rotation);
    let s = decode_scaling(log_scaling);
    let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    r * d * r.transpose()
}

/// Backpropagate a gradient on the covariance to the raw quaternion and the
/// log scalings.
pub fn covariance_backward(
    rotation: &Vector4<f64>,
    log_scaling: &Vector3<f64>,
    grad_sigma: &Matrix3<f64>,
) -> (Vector4<f64>, Vector3<f64>) {
    let r = quat::rotmat(rotation);
    let s = decode_scaling(log_scaling);
    let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    // dL/dR = (G + G^T) R D
    let gsym = grad_sigma + grad_sigma.transpose();
    let grad_r = gsym * r * d;
    let grad_q = quat::rotmat_backward(rotation, &grad_r);
    // dL/dD = R^T G R; dD_ii/d(log s_i) = 2 s_i^2 (zero where clamped)
    let gd = r.transpose() * grad_sigma * r;
    let mut grad_ls = Vector3::zeros();
    for i in 0..3 {
        let raw = log_scaling[i].exp();
        let active = (SCALE_MIN..=SCALE_MAX).contains(&raw);
        if active {
            grad_ls[i] = gd[(i, i)] * 2.0 * s[i] * s[i];
        }
    }
    (grad_q, grad_ls)
}

/// Dynamic Gaussians: shared knot times, per-Gaussian control points and
/// quaternion polynomial coefficients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynBlock {
    pub knot_times: Vec<f64>,
    pub ctrl: Vec<Vector3<f64>>,
    pub quat_coeffs: Vec<Vector4<f64>>,
    pub log_scaling: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub log_irradiance: Vec<Vector3<f64>>,
}

impl DynBlock {
    pub fn len(&self) -> usize {
        self.logit_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logit_opacity.is_empty()
    }

    pub fn n_knots(&self) -> usize {
        self.knot_times.len()
    }

    pub fn ctrl_of(&self, i: usize) -> &[Vector3<f64>] {
        let nk = self.n_knots();
        &self.ctrl[i * nk..(i + 1) * nk]
    }

    pub fn quat_of(&self, i: usize) -> &[Vector4<f64>] {
        &self.quat_coeffs[i * 4..(i + 1) * 4]
    }

    pub fn trajectory(&self, i: usize) -> SplineTrajectory {
        SplineTrajectory::new(self.knot_times.clone(), self.ctrl_of(i).to_vec())
            .expect("stored trajectory is valid")
    }

    pub fn quat_poly(&self, i: usize) -> QuatPolynomial {
        let q = self.quat_of(i);
        QuatPolynomial {
            coeffs: [q[0], q[1], q[2], q[3]],
        }
    }

    pub fn push(
        &mut self,
        ctrl: &[Vector3<f64>],
        quat: &QuatPolynomial,
        log_scaling: Vector3<f64>,
        logit_opacity: f64,
        log_irradiance: Vector3<f64>,
    ) {
        debug_assert_eq!(ctrl.len(), self.n_knots());
        self.ctrl.extend_from_slice(ctrl);
        self.quat_coeffs.extend_from_slice(&quat.coeffs);
        self.log_scaling.push(log_scaling);
        self.logit_opacity.push(logit_opacity);
        self.log_irradiance.push(log_irradiance);
    }

    /// Keep only the entries whose flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        let nk = self.n_knots();
        let mut w = 0;
        for i in 0..self.len() {
            if keep[i] {
                if w != i {
                    for k in 0..nk {
                        self.ctrl[w * nk + k] = self.ctrl[i * nk + k];
                    }
                    for k in 0..4 {
                        self.quat_coeffs[w * 4 + k] = self.quat_coeffs[i * 4 + k];
                    }
                    self.log_scaling[w] = self.log_scaling[i];
                    self.logit_opacity[w] = self.logit_opacity[i];
                    self.log_irradiance[w] = self.log_irradiance[i];
                }
                w += 1;
            }
        }
        self.ctrl.truncate(w * nk);
        self.quat_coeffs.truncate(w * 4);
        self.log_scaling.truncate(w);
        self.logit_opacity.truncate(w);
        self.log_irradiance.truncate(w);
    }
}

/// Static Gaussians: fixed position and rotation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticBlock {
    pub position: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub log_scaling: Vec<Vector3<f64>>,
    pub logit_opacity: Vec<f64>,
    pub log_irradiance: Vec<Vector3<f64>>,
}

impl StaticBlock {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scaling: Vector3<f64>,
        logit_opacity: f64,
        log_irradiance: Vector3<f64>,
    ) {
        self.position.push(position);
        self.rotation.push(rotation);
        self.log_scaling.push(log_scaling);
        self.logit_opacity.push(logit_opacity);
        self.log_irradiance.push(log_irradiance);
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let mut w = 0;
        for i in 0..self.len() {
            if keep[i] {
                self.position[w] = self.position[i];
                self.rotation[w] = self.rotation[i];
                self.log_scaling[w] = self.log_scaling[i];
                self.logit_opacity[w] = self.logit_opacity[i];
                self.log_irradiance[w] = self.log_irradiance[i];
                w += 1;
            }
        }
        self.position.truncate(w);
        self.rotation.truncate(w);
        self.log_scaling.truncate(w);
        self.logit_opacity.truncate(w);
        self.log_irradiance.truncate(w);
    }
}

/// Per-Gaussian view used by the transform and in tests.
#[derive(Debug, Clone)]
pub enum Motion {
    Static {
        position: Vector3<f64>,
        rotation: Vector4<f64>,
    },
    Dynamic {
        traj: SplineTrajectory,
        quat: QuatPolynomial,
    },
}

#[derive(Debug, Clone)]
pub struct Gaussian {
    pub motion: Motion,
    pub log_scaling: Vector3<f64>,
    pub logit_opacity: f64,
    pub log_irradiance: Vector3<f64>,
}

impl Gaussian {
    /// Position and unit rotation at normalized time t.
    pub fn eval_at_time(&self, t: f64) -> Result<(Vector3<f64>, Vector4<f64>)> {
        match &self.motion {
            Motion::Static { position, rotation } => Ok((*position, rotation / rotation.norm())),
            Motion::Dynamic { traj, quat } => Ok((traj.eval(t)?, quat.eval(t)?)),
        }
    }
}

/// A full scene: dynamic block plus (world space only) a static block.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub space: Space,
    pub n_frames: usize,
    pub dynamics: DynBlock,
    pub statics: StaticBlock,
}

impl GaussianSet {
    pub fn empty(space: Space, n_frames: usize, knot_times: Vec<f64>) -> Self {
        GaussianSet {
            space,
            n_frames,
            dynamics: DynBlock {
                knot_times,
                ..Default::default()
            },
            statics: StaticBlock::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.dynamics.len() + self.statics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        if self.n_frames <= 1 {
            0.0
        } else {
            i as f64 / (self.n_frames - 1) as f64
        }
    }

    /// Check set-level invariants; used by tests and after transforms.
    pub fn validate(&self) -> Result<()> {
        if self.space == Space::Video && !self.statics.is_empty() {
            return Err(Error::InvalidConfig(
                "video-space sets must be fully dynamic".into(),
            ));
        }
        if !self.dynamics.is_empty() && self.dynamics.n_knots() < 2 {
            return Err(Error::InvalidConfig(
                "dynamic block needs >= 2 knots".into(),
            ));
        }
        for v in self
            .dynamics
            .log_scaling
            .iter()
            .chain(self.statics.log_scaling.iter())
            .chain(self.dynamics.log_irradiance.iter())
            .chain(self.statics.log_irradiance.iter())
        {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(Error::NonFinite("gaussian attributes".into()));
            }
        }
        Ok(())
    }

    /// Per-Gaussian view; dynamic indices come first.
    pub fn gaussian(&self, i: usize) -> Gaussian {
        let nd = self.dynamics.len();
        if i < nd {
            Gaussian {
                motion: Motion::Dynamic {
                    traj: self.dynamics.trajectory(i),
                    quat: self.dynamics.quat_poly(i),
                },
                log_scaling: self.dynamics.log_scaling[i],
                logit_opacity: self.dynamics.logit_opacity[i],
                log_irradiance: self.dynamics.log_irradiance[i],
            }
        } else {
            let j = i - nd;
            Gaussian {
                motion: Motion::Static {
                    position: self.statics.position[j],
                    rotation: self.statics.rotation[j],
                },
                log_scaling: self.statics.log_scaling[j],
                logit_opacity: self.statics.logit_opacity[j],
                log_irradiance: self.statics.log_irradiance[j],
            }
        }
    }

    /// Hermite weights shared by every dynamic Gaussian at time t.
    pub fn dyn_weights(&self, t: f64) -> Result<crate::geometry::SplineWeights> {
        hermite_weights(&self.dynamics.knot_times, t)
    }
}
