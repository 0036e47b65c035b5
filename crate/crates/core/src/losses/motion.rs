//! Motion regularization on dynamic trajectories: as-rigid-as-possible
//! distance preservation between frame pairs, and velocity / acceleration
//! smoothness over the frame sequence.
//!
//! All gradients are with respect to the raw stored parameters: spline
//! control points and quaternion polynomial coefficients.

use crate::geometry::quat::{quat_conj, quat_mul};
use crate::geometry::spline::hermite_weights;
use crate::scene::DynBlock;
use crate::{Error, Result};
use nalgebra::{Matrix4, Vector3, Vector4};

/// Neighbors per Gaussian in the rigidity graph.
pub const ARAP_K: usize = 5;

const EPS_DIST: f64 = 1e-12;
const EPS_ANGLE: f64 = 1e-9;

/// K-nearest-neighbor graph over dynamic Gaussians, frozen at one reference
/// time so the regularizer compares a fixed set of pairwise distances.
#[derive(Debug, Clone)]
pub struct ArapGraph {
    /// Flattened neighbor indices, `k` per Gaussian.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl ArapGraph {
    /// Build the graph from positions at time `t_ref` (typically the middle
    /// frame). `k` is clamped to the number of available neighbors.
    pub fn build(block: &DynBlock, t_ref: f64, k: usize) -> Result<ArapGraph> {
        let n = block.len();
        if n < 2 {
            return Ok(ArapGraph {
                neighbors: Vec::new(),
                k: 0,
            });
        }
        let pos = positions_at(block, t_ref)?;
        let k = k.min(n - 1);
        let mut neighbors = Vec::with_capacity(n * k);
        let mut order: Vec<usize> = Vec::with_capacity(n - 1);
        for i in 0..n {
            order.clear();
            order.extend((0..n).filter(|&j| j != i));
            order.sort_by(|&a, &b| {
                let da = (pos[a] - pos[i]).norm_squared();
                let db = (pos[b] - pos[i]).norm_squared();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            neighbors.extend_from_slice(&order[..k]);
        }
        Ok(ArapGraph { neighbors, k })
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Positions of all dynamic Gaussians at time t via the shared knot weights.
fn positions_at(block: &DynBlock, t: f64) -> Result<Vec<Vector3<f64>>> {
    let w = hermite_weights(&block.knot_times, t)?;
    let nk = block.n_knots();
    Ok((0..block.len())
        .map(|i| {
            let c = &block.ctrl[i * nk..(i + 1) * nk];
            let mut p = Vector3::zeros();
            for j in 0..w.count {
                p += c[w.first + j] * w.w[j];
            }
            p
        })
        .collect())
}

/// Squared deviation of neighbor distances between two times, averaged over
/// Gaussians and neighbors. Returns the loss and the gradient on the control
/// points (length `n * n_knots`).
pub fn arap_loss(
    block: &DynBlock,
    graph: &ArapGraph,
    t: f64,
    t2: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let n = block.len();
    let nk = block.n_knots();
    let mut grad = vec![Vector3::zeros(); n * nk];
    if n < 2 || graph.k == 0 {
        return Ok((0.0, grad));
    }
    if graph.neighbors.len() != n * graph.k {
        return Err(Error::StateMismatch(format!(
            "arap graph built for {} gaussians, set has {n}",
            graph.neighbors.len() / graph.k.max(1)
        )));
    }
    let wa = hermite_weights(&block.knot_times, t)?;
    let wb = hermite_weights(&block.knot_times, t2)?;
    let pa = positions_at(block, t)?;
    let pb = positions_at(block, t2)?;
    let norm = (n * graph.k) as f64;
    let mut loss = 0.0;
    // Per-pair position gradients, scattered through the shared weights.
    let mut gpa = vec![Vector3::zeros(); n];
    let mut gpb = vec![Vector3::zeros(); n];
    for i in 0..n {
        for &j in graph.neighbors_of(i) {
            let da_vec = pa[i] - pa[j];
            let db_vec = pb[i] - pb[j];
            let da = da_vec.norm();
            let db = db_vec.norm();
            let r = da - db;
            loss += r * r / norm;
            let c = 2.0 * r / norm;
            if da > EPS_DIST {
                let dir = da_vec / da;
                gpa[i] += dir * c;
                gpa[j] -= dir * c;
            }
            if db > EPS_DIST {
                let dir = db_vec / db;
                gpb[i] -= dir * c;
                gpb[j] += dir * c;
            }
        }
    }
    for i in 0..n {
        for j in 0..wa.count {
            grad[i * nk + wa.first + j] += gpa[i] * wa.w[j];
        }
        for j in 0..wb.count {
            grad[i * nk + wb.first + j] += gpb[i] * wb.w[j];
        }
    }
    Ok((loss, grad))
}

/// Left multiplication matrix: `a ⊗ c = l_mat(a) * c`.
fn l_mat(a: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        a[0], -a[1], -a[2], -a[3], //
        a[1], a[0], -a[3], a[2], //
        a[2], a[3], a[0], -a[1], //
        a[3], -a[2], a[1], a[0],
    )
}

/// Right multiplication matrix: `a ⊗ c = r_mat(c) * a`.
fn r_mat(c: &Vector4<f64>) -> Matrix4<f64> {
    Matrix4::new(
        c[0], -c[1], -c[2], -c[3], //
        c[1], c[0], c[3], -c[2], //
        c[2], -c[3], c[0], c[1], //
        c[3], c[2], -c[1], c[0],
    )
}

/// Relative rotation angle between two raw quaternions and its gradient with
/// respect to both raw 4-vectors. The angle is the one `quat_angle` reports;
/// at zero angle the (undefined) gradient is returned as zero.
fn rel_angle_grad(a_raw: &Vector4<f64>, b_raw: &Vector4<f64>) -> (f64, Vector4<f64>, Vector4<f64>) {
    let na = a_raw.norm();
    let nb = b_raw.norm();
    let a = a_raw / na;
    let b = b_raw / nb;
    let c = quat_conj(&b);
    let q = quat_mul(&a, &c);
    let v = Vector3::new(q[1], q[2], q[3]);
    let s = v.norm();
    let theta = 2.0 * s.atan2(q[0].abs());
    if s < EPS_ANGLE {
        return (theta, Vector4::zeros(), Vector4::zeros());
    }
    let denom = s * s + q[0] * q[0];
    let mut gq = Vector4::zeros();
    gq[0] = -2.0 * s / denom * q[0].signum();
    let dv = v * (2.0 * q[0].abs() / (denom * s));
    gq[1] = dv.x;
    gq[2] = dv.y;
    gq[3] = dv.z;
    // q = a ⊗ conj(b) is bilinear in (a, conj(b)).
    let ga_unit = r_mat(&c).transpose() * gq;
    let gc = l_mat(&a).transpose() * gq;
    let gb_unit = Vector4::new(gc[0], -gc[1], -gc[2], -gc[3]);
    let ga = (ga_unit - a * a.dot(&ga_unit)) / na;
    let gb = (gb_unit - b * b.dot(&gb_unit)) / nb;
    (theta, ga, gb)
}

/// Velocity and acceleration smoothness over the frame sequence, with
/// separate gradients for each term (they carry different weights).
#[derive(Debug, Clone)]
pub struct SmoothnessResult {
    pub vel: f64,
    pub acc: f64,
    pub grad_ctrl_vel: Vec<Vector3<f64>>,
    pub grad_quat_vel: Vec<Vector4<f64>>,
    pub grad_ctrl_acc: Vec<Vector3<f64>>,
    pub grad_quat_acc: Vec<Vector4<f64>>,
}

/// Velocity term: sum over frames of the position step length plus the
/// relative-rotation geodesic norm `sqrt(2) * theta`. Acceleration term: sum
/// over frame triplets of the second-difference length plus the absolute
/// change of consecutive geodesic norms. Both averaged over Gaussians.
pub fn smoothness_losses(block: &DynBlock, n_frames: usize) -> Result<SmoothnessResult> {
    let n = block.len();
    let nk = block.n_knots();
    let mut out = SmoothnessResult {
        vel: 0.0,
        acc: 0.0,
        grad_ctrl_vel: vec![Vector3::zeros(); n * nk],
        grad_quat_vel: vec![Vector4::zeros(); n * 4],
        grad_ctrl_acc: vec![Vector3::zeros(); n * nk],
        grad_quat_acc: vec![Vector4::zeros(); n * 4],
    };
    if n == 0 || n_frames < 2 {
        return Ok(out);
    }
    let times: Vec<f64> = (0..n_frames)
        .map(|i| i as f64 / (n_frames - 1) as f64)
        .collect();
    let weights: Vec<_> = times
        .iter()
        .map(|&t| hermite_weights(&block.knot_times, t))
        .collect::<Result<_>>()?;
    let sqrt2 = 2f64.sqrt();
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let ctrl = &block.ctrl[i * nk..(i + 1) * nk];
        let poly = block.quat_poly(i);
        let pos: Vec<Vector3<f64>> = weights
            .iter()
            .map(|w| {
                let mut p = Vector3::zeros();
                for j in 0..w.count {
                    p += ctrl[w.first + j] * w.w[j];
                }
                p
            })
            .collect();
        let raw: Vec<Vector4<f64>> = times.iter().map(|&t| poly.eval_raw(t)).collect();
        // Per-step relative angles r_t = sqrt(2) * theta_t and their raw-quat
        // gradients, shared by the velocity and acceleration rotation terms.
        let mut r = Vec::with_capacity(n_frames - 1);
        let mut gr = Vec::with_capacity(n_frames - 1);
        for t in 0..n_frames - 1 {
            let (theta, ga, gb) = rel_angle_grad(&raw[t], &raw[t + 1]);
            r.push(sqrt2 * theta);
            gr.push((ga * sqrt2, gb * sqrt2));
        }
        let mut gp_vel = vec![Vector3::zeros(); n_frames];
        let mut gp_acc = vec![Vector3::zeros(); n_frames];
        let mut graw_vel = vec![Vector4::zeros(); n_frames];
        let mut graw_acc = vec![Vector4::zeros(); n_frames];
        for t in 0..n_frames - 1 {
            let d = pos[t + 1] - pos[t];
            let dn = d.norm();
            out.vel += (dn + r[t]) * inv_n;
            if dn > EPS_DIST {
                let dir = d * (inv_n / dn);
                gp_vel[t + 1] += dir;
                gp_vel[t] -= dir;
            }
            graw_vel[t] += gr[t].0 * inv_n;
            graw_vel[t + 1] += gr[t].1 * inv_n;
        }
        for t in 0..n_frames.saturating_sub(2) {
            let d = pos[t] - 2.0 * pos[t + 1] + pos[t + 2];
            let dn = d.norm();
            let dr = r[t] - r[t + 1];
            out.acc += (dn + dr.abs()) * inv_n;
            if dn > EPS_DIST {
                let dir = d * (inv_n / dn);
                gp_acc[t] += dir;
                gp_acc[t + 1] -= dir * 2.0;
                gp_acc[t + 2] += dir;
            }
            let sgn = dr.signum() * inv_n;
            graw_acc[t] += gr[t].0 * sgn;
            graw_acc[t + 1] += gr[t].1 * sgn - gr[t + 1].0 * sgn;
            graw_acc[t + 2] -= gr[t + 1].1 * sgn;
        }
        for (t, w) in weights.iter().enumerate() {
            for j in 0..w.count {
                out.grad_ctrl_vel[i * nk + w.first + j] += gp_vel[t] * w.w[j];
                out.grad_ctrl_acc[i * nk + w.first + j] += gp_acc[t] * w.w[j];
            }
        }
        for (t, &time) in times.iter().enumerate() {
            let mut p = 1.0;
            for j in 0..4 {
                out.grad_quat_vel[i * 4 + j] += graw_vel[t] * p;
                out.grad_quat_acc[i * 4 + j] += graw_acc[t] * p;
                p *= time;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat::{quat_angle, QuatPolynomial};
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_block(n: usize, nk: usize, seed: u64) -> DynBlock {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut b = DynBlock {
            knot_times: (0..nk).map(|i| i as f64 / (nk - 1) as f64).collect(),
            ..Default::default()
        };
        for _ in 0..n {
            let ctrl: Vec<Vector3<f64>> = (0..nk)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let mut coeffs = [Vector4::zeros(); 4];
            coeffs[0] = Vector4::new(
                rng.gen_range(0.5..1.0),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            for c in coeffs.iter_mut().skip(1) {
                *c = Vector4::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                );
            }
            b.push(
                &ctrl,
                &QuatPolynomial { coeffs },
                Vector3::zeros(),
                0.0,
                Vector3::zeros(),
            );
        }
        b
    }

    #[test]
    fn graph_finds_true_neighbors() {
        // Four static points on a line: neighbors of 0 are 1 then 2.
        let mut b = DynBlock {
            knot_times: vec![0.0, 1.0],
            ..Default::default()
        };
        for x in [0.0, 1.0, 2.5, 10.0] {
            b.push(
                &[Vector3::new(x, 0.0, 0.0); 2],
                &QuatPolynomial::identity(),
                Vector3::zeros(),
                0.0,
                Vector3::zeros(),
            );
        }
        let g = ArapGraph::build(&b, 0.5, 2).unwrap();
        assert_eq!(g.neighbors_of(0), &[1, 2]);
        assert_eq!(g.neighbors_of(1), &[0, 2]);
        assert_eq!(g.neighbors_of(3), &[2, 1]);
    }

    #[test]
    fn arap_zero_under_rigid_motion() {
        // All Gaussians translate and rotate together: distances preserved.
        let mut rng = StdRng::seed_from_u64(31);
        let base: Vec<Vector3<f64>> = (0..6)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let ang = 0.7f64;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), ang);
        let shift = Vector3::new(0.3, -0.2, 0.5);
        let mut b = DynBlock {
            knot_times: vec![0.0, 1.0],
            ..Default::default()
        };
        for p in &base {
            b.push(
                &[*p, rot * p + shift],
                &QuatPolynomial::identity(),
                Vector3::zeros(),
                0.0,
                Vector3::zeros(),
            );
        }
        let g = ArapGraph::build(&b, 0.0, ARAP_K).unwrap();
        let (l, grad) = arap_loss(&b, &g, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-20);
        assert!(grad.iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn arap_matches_brute_oracle() {
        let b = random_block(5, 3, 7);
        let g = ArapGraph::build(&b, 0.5, 2).unwrap();
        let (t, t2) = (0.1, 0.9);
        let pa = positions_at(&b, t).unwrap();
        let pb = positions_at(&b, t2).unwrap();
        let mut oracle = 0.0;
        for i in 0..5 {
            for &j in g.neighbors_of(i) {
                let da = (pa[i] - pa[j]).norm();
                let db = (pb[i] - pb[j]).norm();
                oracle += (da - db) * (da - db);
            }
        }
        oracle /= (5 * 2) as f64;
        let (l, _) = arap_loss(&b, &g, t, t2).unwrap();
        assert_abs_diff_eq!(l, oracle, epsilon = 1e-14);
    }

    #[test]
    fn arap_grad_matches_fd() {
        let b = random_block(4, 3, 13);
        let g = ArapGraph::build(&b, 0.5, 3).unwrap();
        let (t, t2) = (0.2, 0.8);
        let (_, grad) = arap_loss(&b, &g, t, t2).unwrap();
        let e = 1e-6;
        for idx in 0..b.ctrl.len() {
            for axis in 0..3 {
                let mut bp = b.clone();
                bp.ctrl[idx][axis] += e;
                let mut bm = b.clone();
                bm.ctrl[idx][axis] -= e;
                let fd = (arap_loss(&bp, &g, t, t2).unwrap().0
                    - arap_loss(&bm, &g, t, t2).unwrap().0)
                    / (2.0 * e);
                assert_abs_diff_eq!(grad[idx][axis], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn rel_angle_matches_quat_angle_and_fd() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let a = Vector4::new(
                rng.gen_range(0.3..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let b = Vector4::new(
                rng.gen_range(0.3..1.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let (theta, ga, gb) = rel_angle_grad(&a, &b);
            let oracle = quat_angle(&(a / a.norm()), &(b / b.norm()));
            assert_abs_diff_eq!(theta, oracle, epsilon = 1e-12);
            let e = 1e-6;
            for i in 0..4 {
                let mut ap = a;
                ap[i] += e;
                let mut am = a;
                am[i] -= e;
                let fd = (rel_angle_grad(&ap, &b).0 - rel_angle_grad(&am, &b).0) / (2.0 * e);
                assert_abs_diff_eq!(ga[i], fd, epsilon = 1e-6);
                let mut bp = b;
                bp[i] += e;
                let mut bm = b;
                bm[i] -= e;
                let fd = (rel_angle_grad(&a, &bp).0 - rel_angle_grad(&a, &bm).0) / (2.0 * e);
                assert_abs_diff_eq!(gb[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn vel_linear_motion_equals_path_length() {
        // Straight line of length 3 over any frame count, constant rotation.
        let mut b = DynBlock {
            knot_times: vec![0.0, 1.0],
            ..Default::default()
        };
        b.push(
            &[Vector3::zeros(), Vector3::new(3.0, 0.0, 0.0)],
            &QuatPolynomial::identity(),
            Vector3::zeros(),
            0.0,
            Vector3::zeros(),
        );
        let s = smoothness_losses(&b, 7).unwrap();
        assert_abs_diff_eq!(s.vel, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.acc, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vel_rotation_step_value() {
        // Two frames, identity to 90 degrees about z: the geodesic norm is
        // (pi/2) * sqrt(2).
        let h = (45f64).to_radians();
        let q1 = Vector4::new(h.cos(), 0.0, 0.0, h.sin());
        let coeffs = [
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            q1 - Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector4::zeros(),
            Vector4::zeros(),
        ];
        let mut b = DynBlock {
            knot_times: vec![0.0, 1.0],
            ..Default::default()
        };
        b.push(
            &[Vector3::zeros(); 2],
            &QuatPolynomial { coeffs },
            Vector3::zeros(),
            0.0,
            Vector3::zeros(),
        );
        let s = smoothness_losses(&b, 2).unwrap();
        assert_abs_diff_eq!(
            s.vel,
            std::f64::consts::FRAC_PI_2 * 2f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn smoothness_grads_match_fd() {
        let b = random_block(3, 3, 19);
        let n_frames = 5;
        let s = smoothness_losses(&b, n_frames).unwrap();
        let e = 1e-6;
        for idx in 0..b.ctrl.len() {
            for axis in 0..3 {
                let mut bp = b.clone();
                bp.ctrl[idx][axis] += e;
                let mut bm = b.clone();
                bm.ctrl[idx][axis] -= e;
                let sp = smoothness_losses(&bp, n_frames).unwrap();
                let sm = smoothness_losses(&bm, n_frames).unwrap();
                let fd_vel = (sp.vel - sm.vel) / (2.0 * e);
                let fd_acc = (sp.acc - sm.acc) / (2.0 * e);
                assert_abs_diff_eq!(s.grad_ctrl_vel[idx][axis], fd_vel, epsilon = 1e-5);
                assert_abs_diff_eq!(s.grad_ctrl_acc[idx][axis], fd_acc, epsilon = 1e-5);
            }
        }
        for idx in 0..b.quat_coeffs.len() {
            for k in 0..4 {
                let mut bp = b.clone();
                bp.quat_coeffs[idx][k] += e;
                let mut bm = b.clone();
                bm.quat_coeffs[idx][k] -= e;
                let sp = smoothness_losses(&bp, n_frames).unwrap();
                let sm = smoothness_losses(&bm, n_frames).unwrap();
                let fd_vel = (sp.vel - sm.vel) / (2.0 * e);
                let fd_acc = (sp.acc - sm.acc) / (2.0 * e);
                assert_abs_diff_eq!(s.grad_quat_vel[idx][k], fd_vel, epsilon = 1e-5);
                assert_abs_diff_eq!(s.grad_quat_acc[idx][k], fd_acc, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn empty_block_is_zero() {
        let b = DynBlock {
            knot_times: vec![0.0, 1.0],
            ..Default::default()
        };
        let g = ArapGraph::build(&b, 0.5, ARAP_K).unwrap();
        let (l, _) = arap_loss(&b, &g, 0.0, 1.0).unwrap();
        assert_eq!(l, 0.0);
        let s = smoothness_losses(&b, 4).unwrap();
        assert_eq!(s.vel, 0.0);
        assert_eq!(s.acc, 0.0);
    }
}
