//! Quaternion utilities: rotation matrices with analytic partials, cubic
//! quaternion polynomials and eigenvector-based rotation averaging.
//!
//! Quaternions are stored as `[w, x, y, z]` 4-vectors.

use crate::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

pub const DEGENERATE_NORM: f64 = 1e-8;

/// Rotation matrix of a quaternion, normalizing first.
pub fn rotmat(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partials of `rotmat(u)` with respect to the components of a *unit* quaternion u.
fn rotmat_partials_unit(u: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Backpropagate a gradient on the rotation matrix to the raw (unnormalized)
/// quaternion, chaining through the normalization.
pub fn rotmat_backward(q_raw: &Vector4<f64>, grad_r: &Matrix3<f64>) -> Vector4<f64> {
    let n = q_raw.norm();
    let u = q_raw / n;
    let parts = rotmat_partials_unit(&u);
    let mut grad_u = Vector4::zeros();
    for i in 0..4 {
        grad_u[i] = parts[i].component_mul(grad_r).sum();
    }
    // d(u)/d(q_raw) = (I - u u^T) / n
    (grad_u - u * u.dot(&grad_u)) / n
}

/// Quaternion product a * b in [w, x, y, z] layout.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

pub fn quat_conj(q: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(q[0], -q[1], -q[2], -q[3])
}

/// Rotation angle in radians between two unit quaternions.
pub fn quat_angle(a: &Vector4<f64>, b: &Vector4<f64>) -> f64 {
    let rel = quat_mul(&quat_conj(a), b);
    let v = Vector3::new(rel[1], rel[2], rel[3]).norm();
    2.0 * v.atan2(rel[0].abs())
}

/// Cubic quaternion polynomial r(t) = sum_j a_j t^j, evaluated and renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatPolynomial {
    pub coeffs: [Vector4<f64>; 4],
}

impl QuatPolynomial {
    pub fn identity() -> Self {
        QuatPolynomial {
            coeffs: [
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector4::zeros(),
                Vector4::zeros(),
                Vector4::zeros(),
            ],
        }
    }

    /// Raw (pre-normalization) polynomial value by Horner's rule.
    pub fn eval_raw(&self, t: f64) -> Vector4<f64> {
        let [a0, a1, a2, a3] = &self.coeffs;
        ((a3 * t + a2) * t + a1) * t + a0
    }

    /// Unit quaternion at time t.
    pub fn eval(&self, t: f64) -> Result<Vector4<f64>> {
        let raw = self.eval_raw(t);
        let n = raw.norm();
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateRotation { t, norm: n });
        }
        Ok(raw / n)
    }

    /// Rotation matrix at time t.
    pub fn rotmat_at(&self, t: f64) -> Result<Matrix3<f64>> {
        let raw = self.eval_raw(t);
        let n = raw.norm();
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateRotation { t, norm: n });
        }
        Ok(rotmat(&raw))
    }

    /// Backpropagate a gradient on the rotation matrix at t to the four
    /// coefficient vectors.
    pub fn rotmat_backward_at(&self, t: f64, grad_r: &Matrix3<f64>) -> [Vector4<f64>; 4] {
        let raw = self.eval_raw(t);
        let g_raw = rotmat_backward(&raw, grad_r);
        let mut out = [Vector4::zeros(); 4];
        let mut p = 1.0;
        for item in &mut out {
            *item = g_raw * p;
            p *= t;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct QuatFit {
    pub poly: QuatPolynomial,
    /// Polynomial degree actually fitted; < 3 means the design matrix was
    /// rank-deficient and a lower degree was used.
    pub degree: usize,
}

impl QuatFit {
    pub fn degraded(&self) -> bool {
        self.degree < 3
    }
}

/// Least-squares fit of a cubic quaternion polynomial to (t, unit quaternion)
/// samples in raw 4-vector space. Samples are sign-aligned to the previous
/// sample before fitting.
pub fn quat_poly_fit(samples: &[(f64, Vector4<f64>)]) -> Result<QuatFit> {
    if samples.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: samples.len(),
        });
    }
    let mut qs: Vec<Vector4<f64>> = Vec::with_capacity(samples.len());
    for (_, q) in samples {
        match qs.last() {
            Some(prev) if q.dot(prev) < 0.0 => qs.push(-q),
            _ => qs.push(*q),
        }
    }
    for degree in (0..=3usize).rev() {
        let cols = degree + 1;
        // Normal equations for the small Vandermonde system.
        let mut ata = Matrix4::<f64>::zeros();
        let mut atq = [Vector4::<f64>::zeros(); 4];
        for (i, (t, _)) in samples.iter().enumerate() {
            let mut pow = [0.0f64; 4];
            let mut p = 1.0;
            for item in pow.iter_mut().take(cols) {
                *item = p;
                p *= *t;
            }
            for r in 0..cols {
                for c in 0..cols {
                    ata[(r, c)] += pow[r] * pow[c];
                }
                atq[r] += qs[i] * pow[r];
            }
        }
        for r in cols..4 {
            ata[(r, r)] = 1.0;
        }
        let Some(inv) = ata.try_inverse() else {
            continue;
        };
        // Condition guard: fall back to a lower degree when nearly singular.
        let cond_bad = inv.norm() * ata.norm() > 1e12;
        if cond_bad && degree > 0 {
            continue;
        }
        let mut coeffs = [Vector4::zeros(); 4];
        for j in 0..cols {
            let mut cj = Vector4::zeros();
            for r in 0..cols {
                cj += atq[r] * inv[(j, r)];
            }
            coeffs[j] = cj;
        }
        return Ok(QuatFit {
            poly: QuatPolynomial { coeffs },
            degree,
        });
    }
    Err(Error::InsufficientData {
        needed: 4,
        got: samples.len(),
    })
}

/// Rotation average as the principal eigenvector of M = sum q q^T,
/// with the scalar part made non-negative.
pub fn quat_average(quats: &[Vector4<f64>]) -> Result<Vector4<f64>> {
    if quats.is_empty() {
        return Err(Error::EmptyInput("quat_average".into()));
    }
    let mut m = Matrix4::<f64>::zeros();
    for q in quats {
        m += q * q.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best);
    let mut q = Vector4::new(v[0], v[1], v[2], v[3]);
    q /= q.norm();
    if q[0] < 0.0 {
        q = -q;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_quat(rng: &mut StdRng) -> Vector4<f64> {
        let q = Vector4::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        q / q.norm()
    }

    #[test]
    fn rotmat_matches_nalgebra() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let nq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            let r = rotmat(&q);
            let rr = nq.to_rotation_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(r[(i, j)], rr[(i, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotmat_backward_matches_fd() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let q = random_quat(&mut rng) * rng.gen_range(0.5..2.0);
            let g = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let grad = rotmat_backward(&q, &g);
            for i in 0..4 {
                let e = 1e-6;
                let mut qp = q;
                qp[i] += e;
                let mut qm = q;
                qm[i] -= e;
                let fd = (rotmat(&qp).component_mul(&g).sum()
                    - rotmat(&qm).component_mul(&g).sum())
                    / (2.0 * e);
                assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn quat_poly_identity() {
        let p = QuatPolynomial::identity();
        for t in [0.0, 0.3, 1.0] {
            let q = p.eval(t).unwrap();
            assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn quat_poly_scale_invariance() {
        let mut p = QuatPolynomial::identity();
        p.coeffs[0] = Vector4::new(2.0, 0.0, 0.0, 0.0);
        let q = p.eval(0.5).unwrap();
        assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn quat_poly_matches_horner_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let poly = QuatPolynomial {
            coeffs: [
                random_quat(&mut rng),
                random_quat(&mut rng) * 0.2,
                random_quat(&mut rng) * 0.2,
                random_quat(&mut rng) * 0.2,
            ],
        };
        let t = 0.37;
        // Independent Horner oracle per component.
        let mut raw = [0.0f64; 4];
        for (k, item) in raw.iter_mut().enumerate() {
            let c: Vec<f64> = poly.coeffs.iter().map(|a| a[k]).collect();
            let mut acc = c[3];
            for j in (0..3).rev() {
                acc = acc * t + c[j];
            }
            *item = acc;
        }
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = poly.eval(t).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(q[k], raw[k] / n, epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_poly_degenerate_errors() {
        let p = QuatPolynomial {
            coeffs: [
                Vector4::zeros(),
                Vector4::zeros(),
                Vector4::zeros(),
                Vector4::zeros(),
            ],
        };
        assert!(matches!(p.eval(0.5), Err(Error::DegenerateRotation { .. })));
    }

    #[test]
    fn fit_constant_samples() {
        let q = Vector4::new(0.5, 0.5, 0.5, 0.5);
        let samples: Vec<_> = (0..10).map(|i| (i as f64 / 9.0, q)).collect();
        let fit = quat_poly_fit(&samples).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(fit.poly.coeffs[0][k], q[k], epsilon = 1e-9);
        }
        for j in 1..4 {
            assert!(fit.poly.coeffs[j].norm() < 1e-8);
        }
    }

    #[test]
    fn fit_round_trip() {
        let mut rng = StdRng::seed_from_u64(21);
        let truth = QuatPolynomial {
            coeffs: [
                random_quat(&mut rng),
                random_quat(&mut rng) * 0.3,
                random_quat(&mut rng) * 0.3,
                random_quat(&mut rng) * 0.3,
            ],
        };
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let t = i as f64 / 9.0;
                (t, truth.eval_raw(t))
            })
            .collect();
        let fit = quat_poly_fit(&samples).unwrap();
        assert_eq!(fit.degree, 3);
        for j in 0..4 {
            for k in 0..4 {
                assert_abs_diff_eq!(fit.poly.coeffs[j][k], truth.coeffs[j][k], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn fit_noisy_residual_bounded() {
        let mut rng = StdRng::seed_from_u64(5);
        let truth = QuatPolynomial {
            coeffs: [
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector4::new(0.0, 0.2, 0.0, 0.0),
                Vector4::new(0.0, 0.0, 0.1, 0.0),
                Vector4::new(0.0, 0.0, 0.0, 0.05),
            ],
        };
        let sigma = 1e-3;
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let t = i as f64 / 39.0;
                let mut q = truth.eval_raw(t);
                for k in 0..4 {
                    q[k] += rng.gen_range(-sigma..sigma);
                }
                (t, q)
            })
            .collect();
        let fit = quat_poly_fit(&samples).unwrap();
        let mut rms = 0.0;
        for (t, q) in &samples {
            rms += (fit.poly.eval_raw(*t) - q).norm_squared();
        }
        rms = (rms / samples.len() as f64).sqrt();
        assert!(rms <= 2.0 * sigma, "rms {rms} > 2 sigma");
    }

    #[test]
    fn fit_too_few_samples() {
        let q = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let samples = vec![(0.0, q), (0.5, q), (1.0, q)];
        assert!(matches!(
            quat_poly_fit(&samples),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn average_copies_and_sign_symmetry() {
        let q = Vector4::new(0.2, 0.4, 0.8, 0.4).normalize();
        let avg = quat_average(&[q, q, q]).unwrap();
        assert!((avg - q).norm() < 1e-10 || (avg + q).norm() < 1e-10);
        let avg2 = quat_average(&[q, -q]).unwrap();
        assert!((avg2 - q).norm() < 1e-10 || (avg2 + q).norm() < 1e-10);
    }

    #[test]
    fn average_halfway_rotation() {
        // identity and 90 degrees about z average to 45 degrees about z.
        let id = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let q90 = Vector4::new(
            (45f64).to_radians().cos(),
            0.0,
            0.0,
            (45f64).to_radians().sin(),
        );
        let avg = quat_average(&[id, q90]).unwrap();
        let expect = Vector4::new(
            (22.5f64).to_radians().cos(),
            0.0,
            0.0,
            (22.5f64).to_radians().sin(),
        );
        assert!(quat_angle(&avg, &expect) < 1e-6);
    }

    #[test]
    fn average_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(9);
        let qs: Vec<_> = (0..6).map(|_| random_quat(&mut rng)).collect();
        let mut perm = qs.clone();
        perm.rotate_left(3);
        let a = quat_average(&qs).unwrap();
        let b = quat_average(&perm).unwrap();
        assert!(quat_angle(&a, &b) < 1e-9);
    }

    #[test]
    fn average_empty_errors() {
        assert!(quat_average(&[]).is_err());
    }
}
