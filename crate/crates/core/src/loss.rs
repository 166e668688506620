//! The six training loss terms and their weighted combination.
//!
//! Plain functions carry the definitions (and the unit tests); the `*_taped`
//! builders emit the same quantities as tape nodes for training. Batch terms
//! are computed as sums scaled by caller-supplied global normalizers, so a
//! step split across several per-frame tapes reproduces the exact batch
//! means.

use crate::deform::TapedDeform;
use crate::error::{Error, Result};
use crate::fields::{mlp_forward_taped, pos_encode_taped, FieldParams};
use crate::render::{AnalyticSdf, FieldLeaves};
use crate::tape::{NodeId, Tape};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Mask-weight clamp for the contour BCE.
pub const MASK_EPS: f64 = 1e-5;
/// Occupancy floor when renormalizing composited semantics.
pub const SEMANTIC_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub creg: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub proxy_geometry: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, creg: 0.1, mask: 0.1, eikonal: 0.3, proxy_geometry: 0.8, semantic: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub mask: f64,
    pub creg: f64,
    pub eikonal: f64,
    pub proxy_geometry: f64,
    pub semantic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rgb, self.mask, self.creg, self.eikonal, self.proxy_geometry, self.semantic, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted combination of the six components.
pub fn total_loss(
    rgb: f64,
    mask: f64,
    creg: f64,
    eikonal: f64,
    proxy_geometry: f64,
    semantic: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    let total = weights.rgb * rgb
        + weights.creg * creg
        + weights.mask * mask
        + weights.eikonal * eikonal
        + weights.proxy_geometry * proxy_geometry
        + weights.semantic * semantic;
    LossBreakdown { rgb, mask, creg, eikonal, proxy_geometry, semantic, total }
}

/// Mean absolute error over mask pixels and channels.
pub fn loss_rgb(rendered: ArrayView2<f64>, observed: ArrayView2<f64>) -> Result<f64> {
    if rendered.nrows() == 0 {
        return Err(Error::EmptyMask);
    }
    assert_eq!(rendered.raw_dim(), observed.raw_dim());
    let n = rendered.len() as f64;
    Ok(rendered
        .iter()
        .zip(observed.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Mean binary cross-entropy between mask weights (clamped away from 0/1)
/// and the mask indicator, over every sampled pixel.
pub fn loss_mask(mask_weight: &[f64], indicator: &[bool]) -> f64 {
    assert_eq!(mask_weight.len(), indicator.len());
    let mut acc = 0.0;
    for (&o, &y) in mask_weight.iter().zip(indicator) {
        let o = o.clamp(MASK_EPS, 1.0 - MASK_EPS);
        acc -= if y { o.ln() } else { (1.0 - o).ln() };
    }
    acc / mask_weight.len() as f64
}

/// Latent compactness of the current frame.
pub fn loss_creg(z_r: &[f64; 6], z_cc: ArrayView1<f64>) -> f64 {
    z_r.iter().map(|v| v * v).sum::<f64>() + z_cc.iter().map(|v| v * v).sum::<f64>()
}

/// Field under Eikonal/proxy evaluation: the trained network or an analytic
/// stand-in `f(x) = scale * sdf(x) + shift` for oracles.
pub enum EikonalField<'a> {
    Neural(&'a FieldParams),
    Analytic { sdf: AnalyticSdf, scale: f64, shift: f64 },
}

/// Deformation under which Eikonal probes travel.
pub enum EikonalDeform<'a> {
    Identity,
    /// Rigid-only: an isometry, so it must leave the loss of a true SDF at 0.
    Rigid([f64; 6]),
    Codes { fields: &'a FieldParams, z_r: [f64; 6], z_d: ArrayView1<'a, f64> },
}

fn analytic_f_taped(tape: &mut Tape, sdf: &AnalyticSdf, scale: f64, shift: f64, x: NodeId) -> NodeId {
    let raw = match sdf {
        AnalyticSdf::Plane { normal, offset } => {
            let n = tape.constant(Array2::from_shape_vec((3, 1), normal.to_vec()).unwrap());
            let dot = tape.matmul(x, n);
            tape.add_const(dot, -offset)
        }
        AnalyticSdf::Sphere { center, radius } => {
            let c = tape.constant(Array2::from_shape_fn((tape.shape(x).0, 3), |(_, k)| center[k]));
            let d = tape.sub(x, c);
            let norm = tape.norm_rows(d);
            tape.add_const(norm, -radius)
        }
    };
    let scaled = tape.scale(raw, scale);
    tape.add_const(scaled, shift)
}

/// Eikonal regularization: the mean of the two unit-gradient penalties, one
/// through the full deformation chain (gradient w.r.t. the frame-space probe)
/// and one directly in canonical space.
pub fn loss_eikonal(
    field: &EikonalField,
    deform: &EikonalDeform,
    probes: ArrayView2<f64>,
    progress: f64,
) -> f64 {
    let mut tape = Tape::new();
    let x_p = tape.leaf(probes.to_owned());

    // chain to canonical space
    let (x_c, w_h) = match deform {
        EikonalDeform::Identity => {
            let w = tape.constant(Array2::zeros((probes.nrows(), 2)));
            (x_p, w)
        }
        EikonalDeform::Rigid(z_r) => {
            let z = tape.constant(Array2::from_shape_vec((1, 6), z_r.to_vec()).unwrap());
            let rigid = crate::deform::rigid_taped(&mut tape, z);
            let rot = tape.matmul_nt(x_p, rigid.rotation);
            let tb = tape.broadcast_row(rigid.translation, probes.nrows());
            let x_r = tape.add(rot, tb);
            let w = tape.constant(Array2::zeros((probes.nrows(), 2)));
            (x_r, w)
        }
        EikonalDeform::Codes { fields, z_r, z_d } => {
            let z = tape.constant(Array2::from_shape_vec((1, 6), z_r.to_vec()).unwrap());
            let zd = tape.constant(z_d.to_owned().insert_axis(Axis(0)));
            let ol = crate::fields::MlpLeaves::new(&mut tape, &fields.offset, false);
            let tl = crate::fields::MlpLeaves::new(&mut tape, &fields.topology, false);
            let chain = crate::deform::deform_taped(&mut tape, fields, &ol, &tl, x_p, z, zd, progress);
            (chain.x_c, chain.w_h)
        }
    };

    let f = match field {
        EikonalField::Neural(fields) => {
            let leaves = crate::fields::MlpLeaves::new(&mut tape, &fields.sdf, false);
            let enc_x = pos_encode_taped(&mut tape, x_c, &fields.config.point_enc(progress));
            let enc_w = pos_encode_taped(&mut tape, w_h, &fields.config.ambient_enc(progress));
            let input = tape.concat_cols(&[enc_x, enc_w]);
            let out = mlp_forward_taped(&mut tape, &fields.sdf.spec, &leaves, input);
            tape.slice_cols(out, 0..1)
        }
        EikonalField::Analytic { sdf, scale, shift } => analytic_f_taped(&mut tape, sdf, *scale, *shift, x_c),
    };

    let grads = tape.backward(f, &[x_p, x_c]);
    let g_p = grads[0].expect("f depends on the probe");
    let g_c = grads[1].expect("f depends on the canonical point");
    let mut penalty = |g: NodeId, tape: &mut Tape| -> f64 {
        let n = tape.norm_rows(g);
        let dev = tape.add_const(n, -1.0);
        let sq = tape.mul(dev, dev);
        let m = tape.mean_all(sq);
        tape.scalar_value(m)
    };
    let term_p = penalty(g_p, &mut tape);
    let term_c = penalty(g_c, &mut tape);
    0.5 * (term_p + term_c)
}

/// Mean |f| at deformed proxy samples.
pub fn loss_proxy_geometry(
    field: &EikonalField,
    x_c: ArrayView2<f64>,
    w_h: ArrayView2<f64>,
    progress: f64,
) -> f64 {
    let n = x_c.nrows() as f64;
    match field {
        EikonalField::Neural(fields) => {
            let (f, _) = crate::fields::sdf_net(fields, x_c, w_h, progress);
            f.iter().map(|v| v.abs()).sum::<f64>() / n
        }
        EikonalField::Analytic { sdf, scale, shift } => {
            x_c.rows()
                .into_iter()
                .map(|r| (scale * sdf.eval([r[0], r[1], r[2]]) + shift).abs())
                .sum::<f64>()
                / n
        }
    }
}

/// Mean cross-entropy of composited semantic probabilities against labels,
/// after renormalizing by the mask weight.
pub fn loss_semantic(s_p: ArrayView2<f64>, mask_weight: &[f64], labels: &[usize]) -> f64 {
    let n = s_p.nrows();
    assert_eq!(mask_weight.len(), n);
    assert_eq!(labels.len(), n);
    let mut acc = 0.0;
    for i in 0..n {
        let p = s_p[[i, labels[i]]] / mask_weight[i].max(SEMANTIC_EPS);
        acc -= p.max(1e-12).ln();
    }
    acc / n as f64
}

// ---------------------------------------------------------------------------
// Taped builders
// ---------------------------------------------------------------------------

/// Sum of |rendered - observed| over an inside-ray color block, scaled by
/// `1 / normalizer` (the batch-wide pixel-channel count).
pub fn rgb_sum_taped(tape: &mut Tape, rendered: NodeId, observed: Array2<f64>, normalizer: f64) -> NodeId {
    let obs = tape.constant(observed);
    let diff = tape.sub(rendered, obs);
    let ad = tape.abs(diff);
    let s = tape.sum_all(ad);
    tape.scale(s, 1.0 / normalizer)
}

/// Sum of per-ray BCE terms, scaled by `1 / normalizer`.
pub fn mask_sum_taped(tape: &mut Tape, mask_weight: NodeId, indicator: &[bool], normalizer: f64) -> NodeId {
    let n = tape.shape(mask_weight).0;
    assert_eq!(indicator.len(), n);
    let clamped_hi = tape.clamp_max(mask_weight, 1.0 - MASK_EPS);
    let o = tape.clamp_min(clamped_hi, MASK_EPS);
    let ln_o = tape.ln(o);
    let neg_o = tape.neg(o);
    let one_minus = tape.add_const(neg_o, 1.0);
    let ln_1mo = tape.ln(one_minus);
    let y = Arc::new(Array2::from_shape_fn((n, 1), |(i, _)| if indicator[i] { 1.0 } else { 0.0 }));
    let ny = Arc::new(Array2::from_shape_fn((n, 1), |(i, _)| if indicator[i] { 0.0 } else { 1.0 }));
    let t1 = tape.mul_const(ln_o, y);
    let t2 = tape.mul_const(ln_1mo, ny);
    let s = tape.add(t1, t2);
    let total = tape.sum_all(s);
    let neg = tape.neg(total);
    tape.scale(neg, 1.0 / normalizer)
}

/// `|z_r|^2 + |z_cc|^2` of this frame, scaled by `1 / normalizer`
/// (the number of frames in the step).
pub fn creg_taped(tape: &mut Tape, leaves: &FieldLeaves, normalizer: f64) -> NodeId {
    let zr_sq = tape.mul(leaves.z_r, leaves.z_r);
    let zc_sq = tape.mul(leaves.z_cc, leaves.z_cc);
    let s1 = tape.sum_all(zr_sq);
    let s2 = tape.sum_all(zc_sq);
    let s = tape.add(s1, s2);
    tape.scale(s, 1.0 / normalizer)
}

/// Eikonal penalty sum over this frame's probe block (both terms averaged),
/// scaled by `1 / normalizer` (the batch-wide probe count). The probes run
/// through the frame's full deformation chain.
pub fn eikonal_sum_taped(
    tape: &mut Tape,
    fields: &FieldParams,
    leaves: &FieldLeaves,
    probes: Array2<f64>,
    progress: f64,
    normalizer: f64,
) -> NodeId {
    let x_p = tape.leaf(probes);
    let chain = crate::deform::deform_taped(
        tape,
        fields,
        &leaves.offset,
        &leaves.topology,
        x_p,
        leaves.z_r,
        leaves.z_d,
        progress,
    );
    let enc_x = pos_encode_taped(tape, chain.x_c, &fields.config.point_enc(progress));
    let enc_w = pos_encode_taped(tape, chain.w_h, &fields.config.ambient_enc(progress));
    let input = tape.concat_cols(&[enc_x, enc_w]);
    let out = mlp_forward_taped(tape, &fields.sdf.spec, &leaves.sdf, input);
    let f = tape.slice_cols(out, 0..1);
    let grads = tape.backward(f, &[x_p, chain.x_c]);
    let g_p = grads[0].expect("f depends on probes");
    let g_c = grads[1].expect("f depends on canonical points");
    let mut penalty_sum = |g: NodeId, tape: &mut Tape| -> NodeId {
        let n = tape.norm_rows(g);
        let dev = tape.add_const(n, -1.0);
        let sq = tape.mul(dev, dev);
        tape.sum_all(sq)
    };
    let t1 = penalty_sum(g_p, tape);
    let t2 = penalty_sum(g_c, tape);
    let s = tape.add(t1, t2);
    tape.scale(s, 0.5 / normalizer)
}

/// Sum of |f| at this frame's deformed proxy samples, scaled by
/// `1 / normalizer` (the batch-wide proxy-point count). Returns the sum node
/// and the deformation chain (so callers can reuse the canonical points).
pub fn proxy_sum_taped(
    tape: &mut Tape,
    fields: &FieldParams,
    leaves: &FieldLeaves,
    points: Array2<f64>,
    progress: f64,
    normalizer: f64,
) -> (NodeId, TapedDeform) {
    let x_p = tape.leaf(points);
    let chain = crate::deform::deform_taped(
        tape,
        fields,
        &leaves.offset,
        &leaves.topology,
        x_p,
        leaves.z_r,
        leaves.z_d,
        progress,
    );
    let enc_x = pos_encode_taped(tape, chain.x_c, &fields.config.point_enc(progress));
    let enc_w = pos_encode_taped(tape, chain.w_h, &fields.config.ambient_enc(progress));
    let input = tape.concat_cols(&[enc_x, enc_w]);
    let out = mlp_forward_taped(tape, &fields.sdf.spec, &leaves.sdf, input);
    let f = tape.slice_cols(out, 0..1);
    let af = tape.abs(f);
    let s = tape.sum_all(af);
    (tape.scale(s, 1.0 / normalizer), chain)
}

/// Sum of renormalized cross-entropy terms over inside rays, scaled by
/// `1 / normalizer`.
pub fn semantic_sum_taped(
    tape: &mut Tape,
    s_p: NodeId,
    mask_weight_inside: NodeId,
    labels: &[usize],
    normalizer: f64,
) -> NodeId {
    let (n, classes) = tape.shape(s_p);
    assert_eq!(labels.len(), n);
    let ow = tape.clamp_min(mask_weight_inside, SEMANTIC_EPS);
    let renorm = tape.div_col(s_p, ow);
    let onehot = Arc::new(Array2::from_shape_fn((n, classes), |(i, k)| if labels[i] == k { 1.0 } else { 0.0 }));
    let picked = tape.mul_const(renorm, onehot);
    let p = tape.sum_cols(picked);
    let p_safe = tape.clamp_min(p, 1e-12);
    let lp = tape.ln(p_safe);
    let s = tape.sum_all(lp);
    let neg = tape.neg(s);
    tape.scale(neg, 1.0 / normalizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldConfig, FieldParams};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rgb_zero_offset_and_symmetry() {
        let a = arr2(&[[0.2, 0.4, 0.6], [0.1, 0.5, 0.9]]);
        assert_eq!(loss_rgb(a.view(), a.view()).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert_abs_diff_eq!(loss_rgb(a.view(), b.view()).unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(
            loss_rgb(a.view(), b.view()).unwrap(),
            loss_rgb(b.view(), a.view()).unwrap()
        );
        let empty = Array2::zeros((0, 3));
        assert!(matches!(loss_rgb(empty.view(), empty.view()), Err(Error::EmptyMask)));
    }

    #[test]
    fn mask_bce_endpoints() {
        // perfect occupancy (pre-clamp saturated)
        let perfect = loss_mask(&[1.0, 0.0, 1.0], &[true, false, true]);
        assert!(perfect <= 1.1e-5, "bce = {perfect}");
        let half = loss_mask(&[0.5; 4], &[true, false, true, false]);
        assert_abs_diff_eq!(half, std::f64::consts::LN_2, epsilon = 1e-12);
        // monotone toward the target
        let worse = loss_mask(&[0.3], &[true]);
        let better = loss_mask(&[0.6], &[true]);
        assert!(better < worse);
    }

    #[test]
    fn creg_values() {
        let zero = [0.0; 6];
        assert_eq!(loss_creg(&zero, ndarray::Array1::zeros(4).view()), 0.0);
        let unit = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(loss_creg(&unit, ndarray::Array1::zeros(4).view()), 1.0);
        let z = [0.5, -0.5, 0.25, 0.0, 1.0, -1.0];
        let zc = ndarray::Array1::from_vec(vec![0.3, -0.7]);
        let l1 = loss_creg(&z, zc.view());
        let z2: [f64; 6] = std::array::from_fn(|i| 2.0 * z[i]);
        let zc2 = zc.mapv(|v| 2.0 * v);
        assert_abs_diff_eq!(loss_creg(&z2, zc2.view()), 4.0 * l1, epsilon = 1e-12);
    }

    #[test]
    fn eikonal_plane_identity_is_zero() {
        let field = EikonalField::Analytic {
            sdf: AnalyticSdf::Plane { normal: [0.0, 1.0, 0.0], offset: 0.3 },
            scale: 1.0,
            shift: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes = Array2::from_shape_fn((64, 3), |_| rng.gen_range(-2.0..2.0));
        let l = loss_eikonal(&field, &EikonalDeform::Identity, probes.view(), 1.0);
        assert!(l < 1e-10, "eikonal = {l}");
    }

    #[test]
    fn eikonal_rigid_deformation_preserves_zero() {
        let field = EikonalField::Analytic {
            sdf: AnalyticSdf::Sphere { center: [0.1, -0.2, 0.4], radius: 0.8 },
            scale: 1.0,
            shift: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probes = Array2::from_shape_fn((64, 3), |_| rng.gen_range(-2.0..2.0));
        let z_r = [0.4, -0.2, 0.7, 0.3, -0.5, 0.2];
        let l = loss_eikonal(&field, &EikonalDeform::Rigid(z_r), probes.view(), 1.0);
        assert!(l < 1e-8, "eikonal = {l}");
    }

    #[test]
    fn eikonal_scaled_sdf_scores_one() {
        let field = EikonalField::Analytic {
            sdf: AnalyticSdf::Plane { normal: [1.0, 0.0, 0.0], offset: 0.0 },
            scale: 2.0,
            shift: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probes = Array2::from_shape_fn((32, 3), |_| rng.gen_range(-1.0..1.0));
        let l = loss_eikonal(&field, &EikonalDeform::Identity, probes.view(), 1.0);
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn eikonal_invariant_to_probe_order() {
        let field = EikonalField::Analytic {
            sdf: AnalyticSdf::Sphere { center: [0.0; 3], radius: 1.0 },
            scale: 1.3,
            shift: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probes = Array2::from_shape_fn((16, 3), |_| rng.gen_range(-2.0..2.0));
        let mut reversed = Array2::zeros((16, 3));
        for i in 0..16 {
            reversed.row_mut(i).assign(&probes.row(15 - i));
        }
        let a = loss_eikonal(&field, &EikonalDeform::Identity, probes.view(), 1.0);
        let b = loss_eikonal(&field, &EikonalDeform::Identity, reversed.view(), 1.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn proxy_geometry_on_surface_and_shifted() {
        let sphere = AnalyticSdf::Sphere { center: [0.0; 3], radius: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Array2::zeros((128, 3));
        for i in 0..128 {
            let v = [
                rng.gen_range(-1.0f64..1.0),
                rng.gen_range(-1.0f64..1.0),
                rng.gen_range(-1.0f64..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
            for k in 0..3 {
                pts[[i, k]] = v[k] / n;
            }
        }
        let w_h = Array2::zeros((128, 2));
        let exact = EikonalField::Analytic { sdf: sphere, scale: 1.0, shift: 0.0 };
        assert!(loss_proxy_geometry(&exact, pts.view(), w_h.view(), 1.0) < 1e-6);
        let shifted = EikonalField::Analytic { sdf: sphere, scale: 1.0, shift: -0.35 };
        assert_abs_diff_eq!(
            loss_proxy_geometry(&shifted, pts.view(), w_h.view(), 1.0),
            0.35,
            epsilon = 1e-9
        );
    }

    #[test]
    fn semantic_ce_endpoints_and_permutation() {
        // one-hot at the correct class
        let s = arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        let l = loss_semantic(s.view(), &[1.0, 1.0], &[0, 2]);
        assert!(l < 1e-9);
        // uniform over 4 classes
        let u = Array2::from_elem((3, 4), 0.25);
        let lu = loss_semantic(u.view(), &[1.0; 3], &[0, 1, 3]);
        assert_abs_diff_eq!(lu, 4.0f64.ln(), epsilon = 1e-9);
        // consistent permutation leaves loss unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = Array2::from_shape_fn((5, 4), |_| rng.gen_range(0.05..1.0));
        for i in 0..5 {
            let total: f64 = p.row(i).sum();
            for k in 0..4 {
                p[[i, k]] /= total;
            }
        }
        let labels = [0usize, 3, 2, 1, 1];
        let perm = [2usize, 0, 3, 1]; // class k -> perm[k]
        let mut p2 = Array2::zeros((5, 4));
        for i in 0..5 {
            for k in 0..4 {
                p2[[i, perm[k]]] = p[[i, k]];
            }
        }
        let labels2: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let a = loss_semantic(p.view(), &[1.0; 5], &labels);
        let b = loss_semantic(p2.view(), &[1.0; 5], &labels2);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        let zeros = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w);
        assert_eq!(zeros.total, 0.0);
        let unit = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, &w);
        assert_abs_diff_eq!(unit.total, 2.4, epsilon = 1e-12);
        // doubling one weight adds exactly that component
        let mut w2 = w;
        w2.proxy_geometry *= 2.0;
        let doubled = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, &w2);
        assert_abs_diff_eq!(doubled.total - unit.total, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn taped_terms_match_plain() {
        let mut tape = Tape::new();
        // rgb
        let rendered = arr2(&[[0.1, 0.2, 0.3], [0.6, 0.5, 0.4]]);
        let observed = arr2(&[[0.15, 0.1, 0.35], [0.5, 0.5, 0.5]]);
        let r = tape.leaf(rendered.clone());
        let node = rgb_sum_taped(&mut tape, r, observed.clone(), 6.0);
        let plain = loss_rgb(rendered.view(), observed.view()).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(node), plain, epsilon = 1e-15);

        // mask
        let ow = arr2(&[[0.2], [0.9], [0.01]]);
        let ind = [true, true, false];
        let own = tape.leaf(ow.clone());
        let mnode = mask_sum_taped(&mut tape, own, &ind, 3.0);
        let plain_mask = loss_mask(&[0.2, 0.9, 0.01], &ind);
        assert_abs_diff_eq!(tape.scalar_value(mnode), plain_mask, epsilon = 1e-15);

        // semantic
        let s_p = arr2(&[[0.5, 0.3, 0.1, 0.05], [0.02, 0.6, 0.2, 0.1]]);
        let owi = arr2(&[[0.95], [0.92]]);
        let sp = tape.leaf(s_p.clone());
        let ow_n = tape.leaf(owi.clone());
        let snode = semantic_sum_taped(&mut tape, sp, ow_n, &[0, 1], 2.0);
        let plain_sem = loss_semantic(s_p.view(), &[0.95, 0.92], &[0, 1]);
        assert_abs_diff_eq!(tape.scalar_value(snode), plain_sem, epsilon = 1e-15);
    }

    /// The taped Eikonal builder against the plain function on a live
    /// network with deformation.
    #[test]
    fn taped_eikonal_matches_plain() {
        let cfg = FieldConfig { z_cg_dim: 8, z_d_dim: 4, z_cc_dim: 4, ..FieldConfig::desk() };
        let mut fields = FieldParams::init(cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let n = fields.offset.params.len();
        for p in fields.offset.params[n - 300..].iter_mut() {
            *p = 0.02 * rng.gen_range(-1.0f64..1.0);
        }
        let z_d = ndarray::Array1::from_shape_fn(cfg.z_d_dim, |_| rng.gen_range(-0.2..0.2));
        let z_cc = ndarray::Array1::zeros(cfg.z_cc_dim);
        let z_r = [0.05, -0.02, 0.04, 0.01, 0.0, -0.01];
        let probes = Array2::from_shape_fn((24, 3), |_| rng.gen_range(-1.2..1.2));

        let plain = loss_eikonal(
            &EikonalField::Neural(&fields),
            &EikonalDeform::Codes { fields: &fields, z_r, z_d: z_d.view() },
            probes.view(),
            0.4,
        );

        let mut tape = Tape::new();
        let sharp = crate::render::SharpnessParam::from_s(10.0);
        let leaves = FieldLeaves::new(&mut tape, &fields, &z_r, z_d.view(), z_cc.view(), &sharp);
        let node = eikonal_sum_taped(&mut tape, &fields, &leaves, probes.clone(), 0.4, 24.0);
        assert_abs_diff_eq!(tape.scalar_value(node), plain, epsilon = 1e-12);
    }
}
