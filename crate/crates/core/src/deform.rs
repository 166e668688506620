//! The two-part dynamic deformation field.
//!
//! Per-frame SE(3) rigid registration decoded from the latent twist `z_r`
//! (exponential map, series-expanded near zero), followed by the learned
//! point-wise offset into canonical space and the ambient lift `w_h`.
//! Twist layout: `z_r = [omega_x, omega_y, omega_z, rho_x, rho_y, rho_z]`.

use crate::error::{Error, Result};
use crate::fields::{
    mlp_forward_taped, offset_net, pos_encode_taped, topology_net, FieldParams, MlpLeaves,
};
use crate::tape::{NodeId, Tape};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Angle threshold below which the exponential/log maps switch to their
/// series expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Rigid registration from current-frame space into canonical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidRegistration {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidRegistration {
    pub fn identity() -> Self {
        RigidRegistration { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidRegistration { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// A ray sample carried through the full deformation chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformedPoint {
    pub x_p: [f64; 3],
    pub x_r: [f64; 3],
    pub x_c: [f64; 3],
    pub w_h: [f64; 2],
    pub v_c: Option<[f64; 3]>,
}

fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1-cos t)/t^2`, `C = (1-A)/t^2`
/// with series fallbacks stable through t = 0.
fn rodrigues_coefficients(theta_sq: f64) -> (f64, f64, f64) {
    if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        let a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0;
        let b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0;
        let c = 1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0;
        (a, b, c)
    } else {
        let theta = theta_sq.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta_sq;
        let c = (1.0 - a) / theta_sq;
        (a, b, c)
    }
}

/// SE(3) exponential map of a twist.
pub fn se3_exp(twist: &[f64; 6]) -> RigidRegistration {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let rho = Vector3::new(twist[3], twist[4], twist[5]);
    let theta_sq = omega.norm_squared();
    let (a, b, c) = rodrigues_coefficients(theta_sq);
    let k = skew(omega);
    let k2 = k * k;
    let rotation = Matrix3::identity() + a * k + b * k2;
    let v = Matrix3::identity() + b * k + c * k2;
    RigidRegistration { rotation, translation: v * rho }
}

/// SE(3) logarithm; inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(reg: &RigidRegistration) -> [f64; 6] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(reg.rotation);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let omega = match q.axis_angle() {
        Some((axis, angle)) => axis.into_inner() * angle,
        None => Vector3::zeros(),
    };
    let theta_sq = omega.norm_squared();
    let (a, b, _) = rodrigues_coefficients(theta_sq);
    let k = skew(omega);
    let d = if theta_sq < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        (1.0 - a / (2.0 * b)) / theta_sq
    };
    let v_inv = Matrix3::identity() - 0.5 * k + d * (k * k);
    let rho = v_inv * reg.translation;
    [omega.x, omega.y, omega.z, rho.x, rho.y, rho.z]
}

/// Rigid transform as tape nodes: rotation 3x3 and translation 1x3,
/// differentiable with respect to the twist leaf.
pub struct TapedRigid {
    pub rotation: NodeId,
    pub translation: NodeId,
}

pub fn rigid_taped(tape: &mut Tape, z_r: NodeId) -> TapedRigid {
    debug_assert_eq!(tape.shape(z_r), (1, 6));
    let omega = tape.slice_cols(z_r, 0..3);
    let rho = tape.slice_cols(z_r, 3..6);
    let omega_sq = tape.mul(omega, omega);
    let theta_sq = tape.sum_cols(omega_sq);
    let theta_sq_val = tape.scalar_value(theta_sq);

    // Coefficients as 1x1 nodes; the branch is decided by value, and both
    // branches agree to ~1e-40 at the threshold.
    let (a, b, c) = if theta_sq_val < SMALL_ANGLE * SMALL_ANGLE {
        let t2 = theta_sq;
        let t4 = tape.mul(t2, t2);
        // a = 1 - t2/6 + t4/120
        let a1 = tape.scale(t2, -1.0 / 6.0);
        let a2 = tape.scale(t4, 1.0 / 120.0);
        let a12 = tape.add(a1, a2);
        let a = tape.add_const(a12, 1.0);
        let b1 = tape.scale(t2, -1.0 / 24.0);
        let b2 = tape.scale(t4, 1.0 / 720.0);
        let b12 = tape.add(b1, b2);
        let b = tape.add_const(b12, 0.5);
        let c1 = tape.scale(t2, -1.0 / 120.0);
        let c2 = tape.scale(t4, 1.0 / 5040.0);
        let c12 = tape.add(c1, c2);
        let c = tape.add_const(c12, 1.0 / 6.0);
        (a, b, c)
    } else {
        let theta = tape.sqrt(theta_sq);
        let sin_t = tape.sin(theta);
        let cos_t = tape.cos(theta);
        let a = tape.div(sin_t, theta);
        let neg_cos = tape.neg(cos_t);
        let one_minus_cos = tape.add_const(neg_cos, 1.0);
        let b = tape.div(one_minus_cos, theta_sq);
        let neg_a = tape.neg(a);
        let one_minus_a = tape.add_const(neg_a, 1.0);
        let c = tape.div(one_minus_a, theta_sq);
        (a, b, c)
    };

    // [omega]_x = sum_k omega_k * E_k with constant basis matrices.
    let basis = [
        Array2::from_shape_vec((3, 3), vec![0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
    ];
    let mut k_mat: Option<NodeId> = None;
    for (i, e) in basis.into_iter().enumerate() {
        let e_node = tape.constant(e);
        let w_i = tape.slice_cols(omega, i..i + 1);
        let term = tape.mul_scalar_node(e_node, w_i);
        k_mat = Some(match k_mat {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let k_mat = k_mat.unwrap();
    let k2 = tape.matmul(k_mat, k_mat);
    let eye = tape.constant(Array2::eye(3));

    let ak = tape.mul_scalar_node(k_mat, a);
    let bk2 = tape.mul_scalar_node(k2, b);
    let r_partial = tape.add(eye, ak);
    let rotation = tape.add(r_partial, bk2);

    let bk = tape.mul_scalar_node(k_mat, b);
    let ck2 = tape.mul_scalar_node(k2, c);
    let v_partial = tape.add(eye, bk);
    let v_mat = tape.add(v_partial, ck2);
    // t = V rho (row vector): rho (1x3) * V^T
    let translation = tape.matmul_nt(rho, v_mat);

    TapedRigid { rotation, translation }
}

/// The deformation chain of one frame, built on a tape: rigid registration,
/// point-wise offset, and ambient lift. Points are rows.
pub struct TapedDeform {
    pub x_p: NodeId,
    pub x_r: NodeId,
    pub x_c: NodeId,
    pub w_h: NodeId,
}

/// Build `x_p -> x_r -> (x_c, w_h)` for a batch of points. `z_d` must be a
/// constant leaf (1 x d), `z_r` a leaf (1 x 6). The offset and topology nets
/// receive the positionally encoded `x_r` at the given anneal progress.
pub fn deform_taped(
    tape: &mut Tape,
    fields: &FieldParams,
    offset_leaves: &MlpLeaves,
    topology_leaves: &MlpLeaves,
    x_p: NodeId,
    z_r: NodeId,
    z_d: NodeId,
    progress: f64,
) -> TapedDeform {
    let n = tape.shape(x_p).0;
    let rigid = rigid_taped(tape, z_r);
    let rotated = tape.matmul_nt(x_p, rigid.rotation);
    let t_b = tape.broadcast_row(rigid.translation, n);
    let x_r = tape.add(rotated, t_b);

    let enc = pos_encode_taped(tape, x_r, &fields.config.point_enc(progress));
    let z_d_b = tape.broadcast_row(z_d, n);
    let net_in = tape.concat_cols(&[enc, z_d_b]);
    let offset = mlp_forward_taped(tape, &fields.offset.spec, offset_leaves, net_in);
    let x_c = tape.add(x_r, offset);
    let w_h = mlp_forward_taped(tape, &fields.topology.spec, topology_leaves, net_in);

    TapedDeform { x_p, x_r, x_c, w_h }
}

/// Warp viewing directions by the deformation Jacobian:
/// `v_c = normalize(J_{x_c}(x_p) * v)`, rows matching `x_p`.
pub fn warp_direction_taped(tape: &mut Tape, deform: &TapedDeform, v: NodeId) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(3);
    for k in 0..3 {
        let comp = tape.slice_cols(deform.x_c, k..k + 1);
        let grads = tape.backward(comp, &[deform.x_p]);
        let jk = grads[0].expect("x_c depends on x_p");
        let prod = tape.mul(jk, v);
        rows.push(tape.sum_cols(prod));
    }
    let jv = tape.concat_cols(&rows);
    let norm = tape.norm_rows(jv);
    let min_norm = tape.value(norm).iter().cloned().fold(f64::INFINITY, f64::min);
    if min_norm < 1e-10 {
        return Err(Error::DegenerateJacobian { norm: min_norm });
    }
    Ok(tape.div_col(jv, norm))
}

/// Plain (untaped) deformation of a point batch.
pub struct DeformedBatch {
    pub x_p: Array2<f64>,
    pub x_r: Array2<f64>,
    pub x_c: Array2<f64>,
    pub w_h: Array2<f64>,
}

impl DeformedBatch {
    pub fn point(&self, i: usize) -> DeformedPoint {
        DeformedPoint {
            x_p: [self.x_p[[i, 0]], self.x_p[[i, 1]], self.x_p[[i, 2]]],
            x_r: [self.x_r[[i, 0]], self.x_r[[i, 1]], self.x_r[[i, 2]]],
            x_c: [self.x_c[[i, 0]], self.x_c[[i, 1]], self.x_c[[i, 2]]],
            w_h: [self.w_h[[i, 0]], self.w_h[[i, 1]]],
            v_c: None,
        }
    }
}

/// Rigid registration, offset, and ambient lift for a batch of points.
pub fn canonicalize(
    fields: &FieldParams,
    x_p: ArrayView2<f64>,
    z_r: &[f64; 6],
    z_d: ArrayView1<f64>,
    progress: f64,
) -> DeformedBatch {
    let reg = se3_exp(z_r);
    let n = x_p.nrows();
    let mut x_r = Array2::zeros((n, 3));
    for i in 0..n {
        let p = Vector3::new(x_p[[i, 0]], x_p[[i, 1]], x_p[[i, 2]]);
        let q = reg.apply(p);
        x_r[[i, 0]] = q.x;
        x_r[[i, 1]] = q.y;
        x_r[[i, 2]] = q.z;
    }
    let offset = offset_net(fields, x_r.view(), z_d, progress);
    let x_c = &x_r + &offset;
    let w_h = topology_net(fields, x_r.view(), z_d, progress);
    DeformedBatch { x_p: x_p.to_owned(), x_r, x_c, w_h }
}

/// Warped viewing directions for a batch, via a throwaway tape.
pub fn warp_direction(
    fields: &FieldParams,
    x_p: ArrayView2<f64>,
    v: ArrayView2<f64>,
    z_r: &[f64; 6],
    z_d: ArrayView1<f64>,
    progress: f64,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_p.to_owned());
    let v_n = tape.constant(v.to_owned());
    let z_r_n = tape.constant(Array2::from_shape_vec((1, 6), z_r.to_vec()).unwrap());
    let z_d_n = tape.constant(z_d.to_owned().insert_axis(ndarray::Axis(0)));
    let offset_leaves = MlpLeaves::new(&mut tape, &fields.offset, false);
    let topology_leaves = MlpLeaves::new(&mut tape, &fields.topology, false);
    let chain = deform_taped(&mut tape, fields, &offset_leaves, &topology_leaves, x, z_r_n, z_d_n, progress);
    let v_c = warp_direction_taped(&mut tape, &chain, v_n)?;
    Ok(tape.value(v_c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_twist_is_identity() {
        let reg = se3_exp(&[0.0; 6]);
        assert_eq!(reg.rotation, Matrix3::identity());
        assert_eq!(reg.translation, Vector3::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let reg = se3_exp(&[0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0]);
        let v = reg.rotation * Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let axis = {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm() < 1e-6 {
                    Vector3::x()
                } else {
                    v.normalize()
                }
            };
            let angle: f64 = rng.gen_range(0.0..(std::f64::consts::PI - 1e-3));
            let omega = axis * angle;
            let twist = [
                omega.x,
                omega.y,
                omega.z,
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let back = se3_log(&se3_exp(&twist));
            for i in 0..6 {
                assert!(
                    (back[i] - twist[i]).abs() < 1e-9,
                    "component {i}: {} vs {}",
                    back[i],
                    twist[i]
                );
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let twist = [0.3, -0.5, 0.8, 1.0, -2.0, 0.25];
        let reg = se3_exp(&twist);
        let inv = reg.inverse();
        let p = Vector3::new(0.7, -0.3, 1.9);
        assert_abs_diff_eq!(inv.apply(reg.apply(p)), p, epsilon = 1e-12);
    }

    #[test]
    fn taped_rigid_matches_plain() {
        let twist = [0.2, 0.4, -0.3, 0.5, -1.0, 0.1];
        let reg = se3_exp(&twist);
        let mut tape = Tape::new();
        let z = tape.constant(Array2::from_shape_vec((1, 6), twist.to_vec()).unwrap());
        let taped = rigid_taped(&mut tape, z);
        let r = tape.value(taped.rotation);
        let t = tape.value(taped.translation);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r[[i, j]], reg.rotation[(i, j)], epsilon = 1e-14);
            }
            assert_abs_diff_eq!(t[[0, i]], reg.translation[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn taped_rigid_gradient_matches_fd() {
        let twist0 = [0.2, -0.1, 0.3, 0.4, 0.5, -0.6];
        let x = arr2(&[[0.5, -0.2, 1.1], [1.0, 0.3, -0.7]]);

        let loss_of = |twist: &[f64; 6]| -> f64 {
            let reg = se3_exp(twist);
            let mut acc = 0.0;
            for i in 0..x.nrows() {
                let p = Vector3::new(x[[i, 0]], x[[i, 1]], x[[i, 2]]);
                let q = reg.apply(p);
                acc += q.norm_squared();
            }
            acc
        };

        let mut tape = Tape::new();
        let z = tape.leaf(Array2::from_shape_vec((1, 6), twist0.to_vec()).unwrap());
        let rigid = rigid_taped(&mut tape, z);
        let xn = tape.constant(x.clone());
        let rotated = tape.matmul_nt(xn, rigid.rotation);
        let tb = tape.broadcast_row(rigid.translation, 2);
        let moved = tape.add(rotated, tb);
        let sq = tape.mul(moved, moved);
        let loss = tape.sum_all(sq);
        assert!((tape.scalar_value(loss) - loss_of(&twist0)).abs() < 1e-12);
        let adj = tape.backward(loss, &[z]);
        let grad = tape.value(adj[0].unwrap()).clone();

        let h = 1e-6;
        for i in 0..6 {
            let mut tp = twist0;
            tp[i] += h;
            let mut tm = twist0;
            tm[i] -= h;
            let fd = (loss_of(&tp) - loss_of(&tm)) / (2.0 * h);
            let ad = grad[[0, i]];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            assert!((ad - fd).abs() / denom < 1e-6, "twist[{i}]: ad={ad} fd={fd}");
        }
    }

    #[test]
    fn identity_deformation_at_initialization() {
        let cfg = FieldConfig::desk();
        let fields = FieldParams::init(cfg, 7);
        let x = arr2(&[[0.4, -0.2, 0.9], [0.0, 0.0, 2.5]]);
        let z_d = Array1::zeros(cfg.z_d_dim);
        let out = canonicalize(&fields, x.view(), &[0.0; 6], z_d.view(), 0.0);
        assert_eq!(out.x_c, x);
        assert!(out.w_h.iter().all(|&v| v == 0.0));

        // and the whole chain including direction warp
        let v = arr2(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let v_c = warp_direction(&fields, x.view(), v.view(), &[0.0; 6], z_d.view(), 0.0).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(v_c[[i, j]], v[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pure_translation_twist_shifts_points() {
        let cfg = FieldConfig::desk();
        let fields = FieldParams::init(cfg, 8);
        let x = arr2(&[[0.1, 0.2, 0.3]]);
        let z_d = Array1::zeros(cfg.z_d_dim);
        let u = [0.0, 0.0, 0.0, 0.25, -0.5, 1.0];
        let out = canonicalize(&fields, x.view(), &u, z_d.view(), 0.0);
        assert_abs_diff_eq!(out.x_c[[0, 0]], 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(out.x_c[[0, 1]], -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(out.x_c[[0, 2]], 1.3, epsilon = 1e-12);
    }

    #[test]
    fn rigid_only_warp_rotates_directions() {
        let cfg = FieldConfig::desk();
        let fields = FieldParams::init(cfg, 9);
        let z_d = Array1::zeros(cfg.z_d_dim);
        let twist = [0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0, 0.0];
        let reg = se3_exp(&twist);
        let x = arr2(&[[0.3, 0.1, -0.2]]);
        let v = arr2(&[[1.0, 0.0, 0.0]]);
        let v_c = warp_direction(&fields, x.view(), v.view(), &twist, z_d.view(), 0.0).unwrap();
        let expected = reg.rotation * Vector3::new(1.0, 0.0, 0.0);
        for j in 0..3 {
            assert_abs_diff_eq!(v_c[[0, j]], expected[j], epsilon = 1e-9);
        }
    }

    /// With a perturbed offset net, the warp Jacobian must match finite
    /// differences of the full chain.
    #[test]
    fn warp_jacobian_matches_finite_differences() {
        let cfg = FieldConfig::desk();
        let mut fields = FieldParams::init(cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let n = fields.offset.params.len();
        for p in fields.offset.params[n - 400..].iter_mut() {
            *p = 0.05 * rng.gen_range(-1.0f64..1.0);
        }
        let z_d = Array1::from_shape_fn(cfg.z_d_dim, |_| rng.gen_range(-0.2..0.2));
        let twist = [0.05, -0.1, 0.15, 0.02, 0.0, -0.03];
        let x0 = arr2(&[[0.3, -0.4, 0.8]]);
        let progress = 0.6;

        // taped Jacobian columns via the same machinery warp uses
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let z_r_n = tape.constant(Array2::from_shape_vec((1, 6), twist.to_vec()).unwrap());
        let z_d_n = tape.constant(z_d.clone().insert_axis(ndarray::Axis(0)));
        let ol = MlpLeaves::new(&mut tape, &fields.offset, false);
        let tl = MlpLeaves::new(&mut tape, &fields.topology, false);
        let chain = deform_taped(&mut tape, &fields, &ol, &tl, x, z_r_n, z_d_n, progress);
        let mut jac = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            let comp = tape.slice_cols(chain.x_c, k..k + 1);
            let g = tape.backward(comp, &[x]);
            let row = tape.value(g[0].unwrap()).clone();
            for j in 0..3 {
                jac[[k, j]] = row[[0, j]];
            }
        }

        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x0.clone();
            xp[[0, j]] += h;
            let mut xm = x0.clone();
            xm[[0, j]] -= h;
            let cp = canonicalize(&fields, xp.view(), &twist, z_d.view(), progress);
            let cm = canonicalize(&fields, xm.view(), &twist, z_d.view(), progress);
            for k in 0..3 {
                let fd = (cp.x_c[[0, k]] - cm.x_c[[0, k]]) / (2.0 * h);
                let ad = jac[[k, j]];
                let denom = ad.abs().max(fd.abs()).max(1e-8);
                assert!((ad - fd).abs() / denom < 1e-4, "J[{k},{j}]: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn composition_identity_holds() {
        let cfg = FieldConfig::desk();
        let mut fields = FieldParams::init(cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let n = fields.offset.params.len();
        for p in fields.offset.params[n - 400..].iter_mut() {
            *p = 0.05 * rng.gen_range(-1.0f64..1.0);
        }
        let z_d = Array1::from_shape_fn(cfg.z_d_dim, |_| rng.gen_range(-0.2..0.2));
        let twist = [0.2, 0.1, -0.3, 0.5, 0.0, -0.2];
        let x = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-1.0..1.0));
        let out = canonicalize(&fields, x.view(), &twist, z_d.view(), 1.0);
        let reg = se3_exp(&twist);
        let offsets = offset_net(&fields, out.x_r.view(), z_d.view(), 1.0);
        for i in 0..x.nrows() {
            let p = Vector3::new(x[[i, 0]], x[[i, 1]], x[[i, 2]]);
            let expected = reg.apply(p);
            for j in 0..3 {
                assert_abs_diff_eq!(out.x_c[[i, j]] - offsets[[i, j]], expected[j], epsilon = 1e-12);
            }
        }
    }
}
