//! The linear blendshape head prior and its inverse-rendering fit.
//!
//! Geometry is the template plus shape/expression blendshape offsets (single
//! root joint, so skinning is the identity on the blendshape sum; the
//! interface keeps the full evaluation path so a richer basis can drop in).
//! Shading is Lambertian under band-0..2 real spherical harmonics. The fit
//! minimizes `50 E_image + 5 E_land + 0.1 E_reg` by gradient descent with
//! backtracking line search; the photometric term is evaluated at projected
//! vertex centers through bilinear image sampling, with per-frame coverage
//! (front-facing, in-bounds vertices) recomputed every evaluation.

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, DEPTH_EPS};
use crate::tape::{ImageGrid, NodeId, Tape};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Energy weights from the fitting objective.
pub const W_IMAGE: f64 = 50.0;
pub const W_LANDMARK: f64 = 5.0;
pub const W_REGULARIZER: f64 = 0.1;

/// The linear blendshape head model. Basis matrices are stored flat:
/// row `3 i + c` is coordinate `c` of vertex `i`; every column has unit
/// Frobenius norm (enforced at construction).
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBasis {
    pub template: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
    pub shape_basis: Array2<f64>,
    pub expression_basis: Array2<f64>,
    pub albedo_mean: Array2<f64>,
    pub albedo_basis: Array2<f64>,
    pub landmarks: Vec<usize>,
}

impl ProxyBasis {
    pub fn n_vertices(&self) -> usize {
        self.template.nrows()
    }

    pub fn d_id(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn d_exp(&self) -> usize {
        self.expression_basis.ncols()
    }

    pub fn d_tex(&self) -> usize {
        self.albedo_basis.ncols()
    }

    /// Normalize every basis column to unit Frobenius norm.
    pub fn normalized(mut self) -> Self {
        for basis in [&mut self.shape_basis, &mut self.expression_basis, &mut self.albedo_basis] {
            for mut col in basis.columns_mut() {
                let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    col.mapv_inplace(|v| v / n);
                }
            }
        }
        self
    }

    /// Index-range, dimension, and manifold-with-boundary checks.
    pub fn validate(&self) -> Result<()> {
        let n_v = self.n_vertices();
        let flat = 3 * n_v;
        for (what, rows) in [
            ("shape basis", self.shape_basis.nrows()),
            ("expression basis", self.expression_basis.nrows()),
            ("albedo basis", self.albedo_basis.nrows()),
        ] {
            if rows != flat {
                return Err(Error::DimensionMismatch { what, expected: flat, got: rows });
            }
        }
        if self.albedo_mean.nrows() != n_v {
            return Err(Error::DimensionMismatch {
                what: "albedo mean",
                expected: n_v,
                got: self.albedo_mean.nrows(),
            });
        }
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for f in &self.faces {
            for &v in f {
                if v >= n_v {
                    return Err(Error::DimensionMismatch { what: "face index", expected: n_v, got: v });
                }
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        if edge_count.values().any(|&c| c > 2) {
            return Err(Error::DegenerateConfiguration { reason: "non-manifold edge in proxy mesh" });
        }
        for &l in &self.landmarks {
            if l >= n_v {
                return Err(Error::DimensionMismatch { what: "landmark index", expected: n_v, got: l });
            }
        }
        Ok(())
    }

    /// Center and radius enclosing the template (used for ray bounds).
    pub fn bounding_sphere_of(vertices: ArrayView2<f64>) -> ([f64; 3], f64) {
        let n = vertices.nrows() as f64;
        let mut c = [0.0; 3];
        for r in vertices.rows() {
            for k in 0..3 {
                c[k] += r[k] / n;
            }
        }
        let mut radius: f64 = 0.0;
        for r in vertices.rows() {
            let d = (0..3).map(|k| (r[k] - c[k]).powi(2)).sum::<f64>().sqrt();
            radius = radius.max(d);
        }
        (c, radius)
    }
}

/// Per-frame fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyFrameParams {
    pub alpha_exp: Vec<f64>,
    pub pose: CameraPose,
    /// Spherical-harmonics coefficients, `sh[k][channel]`, bands 0..2.
    pub sh: [[f64; 3]; 9],
}

/// The full fitted parameter set: shared identity/texture coefficients plus
/// per-frame expression, pose, and lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyParams {
    pub alpha_id: Vec<f64>,
    pub alpha_tex: Vec<f64>,
    pub frames: Vec<ProxyFrameParams>,
}

impl ProxyParams {
    pub fn init(basis: &ProxyBasis, n_frames: usize, initial_distance: f64) -> Self {
        ProxyParams {
            alpha_id: vec![0.0; basis.d_id()],
            alpha_tex: vec![0.0; basis.d_tex()],
            frames: (0..n_frames)
                .map(|_| ProxyFrameParams {
                    alpha_exp: vec![0.0; basis.d_exp()],
                    // zero Euler angles and zero translation, then shifted to
                    // the nominal working distance so the template is in frame
                    pose: CameraPose { pitch: 0.0, yaw: 0.0, roll: 0.0, translation: [0.0, 0.0, initial_distance] },
                    sh: [[0.0; 3]; 9],
                })
                .collect(),
        }
    }

    fn dof(&self) -> usize {
        self.alpha_id.len()
            + self.alpha_tex.len()
            + self
                .frames
                .iter()
                .map(|f| f.alpha_exp.len() + 6 + 27)
                .sum::<usize>()
    }

    fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dof());
        x.extend(&self.alpha_id);
        x.extend(&self.alpha_tex);
        for f in &self.frames {
            x.extend(&f.alpha_exp);
            x.extend([f.pose.pitch, f.pose.yaw, f.pose.roll]);
            x.extend(f.pose.translation);
            for k in 0..9 {
                x.extend(f.sh[k]);
            }
        }
        x
    }

    fn unpack(&self, x: &[f64]) -> ProxyParams {
        let mut out = self.clone();
        let mut at = 0;
        let take = |at: &mut usize, n: usize| -> Vec<f64> {
            let v = x[*at..*at + n].to_vec();
            *at += n;
            v
        };
        out.alpha_id = take(&mut at, out.alpha_id.len());
        out.alpha_tex = take(&mut at, out.alpha_tex.len());
        for f in &mut out.frames {
            f.alpha_exp = take(&mut at, f.alpha_exp.len());
            let p = take(&mut at, 6);
            f.pose = CameraPose { pitch: p[0], yaw: p[1], roll: p[2], translation: [p[3], p[4], p[5]] };
            for k in 0..9 {
                let row = take(&mut at, 3);
                f.sh[k] = [row[0], row[1], row[2]];
            }
        }
        debug_assert_eq!(at, x.len());
        out
    }
}

/// A single shading query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingSample {
    pub albedo: [f64; 3],
    pub normal: [f64; 3],
}

impl ShadingSample {
    pub fn new(albedo: [f64; 3], normal: [f64; 3]) -> Result<Self> {
        let n = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateConfiguration { reason: "shading normal not unit length" });
        }
        Ok(ShadingSample { albedo, normal })
    }
}

/// Real spherical harmonics basis, bands 0..2, standard constants.
pub fn sh_basis(n: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = n;
    [
        0.28209479177387814,
        0.4886025119029199 * y,
        0.4886025119029199 * z,
        0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        1.0925484305920792 * y * z,
        0.31539156525252005 * (3.0 * z * z - 1.0),
        1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
    ]
}

/// Lambertian shading `b * (nu . phi(n))` per channel.
pub fn shade_vertex(sample: &ShadingSample, sh: &[[f64; 3]; 9]) -> [f64; 3] {
    let phi = sh_basis(sample.normal);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let irradiance: f64 = (0..9).map(|k| sh[k][c] * phi[k]).sum();
        out[c] = sample.albedo[c] * irradiance;
    }
    out
}

/// Template plus blendshape offsets (identity skinning).
pub fn evaluate_geometry(basis: &ProxyBasis, alpha_id: &[f64], alpha_exp: &[f64]) -> Result<Array2<f64>> {
    if alpha_id.len() != basis.d_id() {
        return Err(Error::DimensionMismatch { what: "alpha_id", expected: basis.d_id(), got: alpha_id.len() });
    }
    if alpha_exp.len() != basis.d_exp() {
        return Err(Error::DimensionMismatch { what: "alpha_exp", expected: basis.d_exp(), got: alpha_exp.len() });
    }
    let n_v = basis.n_vertices();
    let mut out = basis.template.clone();
    let mut add_basis = |b: &Array2<f64>, alpha: &[f64], out: &mut Array2<f64>| {
        for (col, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for i in 0..n_v {
                for c in 0..3 {
                    out[[i, c]] += a * b[[3 * i + c, col]];
                }
            }
        }
    };
    add_basis(&basis.shape_basis, alpha_id, &mut out);
    add_basis(&basis.expression_basis, alpha_exp, &mut out);
    Ok(out)
}

/// Per-vertex albedo from the texture mean and basis.
pub fn evaluate_albedo(basis: &ProxyBasis, alpha_tex: &[f64]) -> Result<Array2<f64>> {
    if alpha_tex.len() != basis.d_tex() {
        return Err(Error::DimensionMismatch { what: "alpha_tex", expected: basis.d_tex(), got: alpha_tex.len() });
    }
    let n_v = basis.n_vertices();
    let mut out = basis.albedo_mean.clone();
    for (col, &a) in alpha_tex.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for i in 0..n_v {
            for c in 0..3 {
                out[[i, c]] += a * basis.albedo_basis[[3 * i + c, col]];
            }
        }
    }
    Ok(out)
}

/// Area-weighted vertex normals, normalized.
pub fn vertex_normals(vertices: ArrayView2<f64>, faces: &[[usize; 3]]) -> Array2<f64> {
    let n_v = vertices.nrows();
    let mut acc = Array2::<f64>::zeros((n_v, 3));
    for f in faces {
        let [i0, i1, i2] = *f;
        let v = |i: usize| [vertices[[i, 0]], vertices[[i, 1]], vertices[[i, 2]]];
        let (v0, v1, v2) = (v(i0), v(i1), v(i2));
        let e1 = [v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]];
        let e2 = [v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]];
        let c = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &vi in f {
            for k in 0..3 {
                acc[[vi, k]] += c[k];
            }
        }
    }
    for mut row in acc.rows_mut() {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    acc
}

/// One frame of observations consumed by the fit.
pub struct FrameObservation {
    pub image: Arc<ImageGrid>,
    pub landmarks: Vec<[f64; 2]>,
    pub intrinsics: Intrinsics,
}

/// Energy components of the fitting objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyEnergy {
    pub total: f64,
    pub image: f64,
    pub landmark: f64,
    pub regularizer: f64,
}

struct TapedEnergy {
    tape: Tape,
    total: NodeId,
    energy: ProxyEnergy,
    wrt: Vec<NodeId>,
}

/// Coverage of frame `j`: indices of front-facing vertices projecting in
/// bounds, plus a flag when any landmark vertex fails the depth check.
fn coverage(
    geometry: ArrayView2<f64>,
    normals: ArrayView2<f64>,
    pose: &CameraPose,
    k: &Intrinsics,
    landmarks: &[usize],
) -> (Vec<usize>, bool) {
    let r = pose.rotation();
    let t = pose.translation_vec();
    let center = pose.center();
    let mut visible = Vec::new();
    let mut landmark_bad = false;
    let landmark_set: std::collections::BTreeSet<usize> = landmarks.iter().cloned().collect();
    for i in 0..geometry.nrows() {
        let v = nalgebra::Vector3::new(geometry[[i, 0]], geometry[[i, 1]], geometry[[i, 2]]);
        let cam = r * v + t;
        let ok_depth = cam.z > DEPTH_EPS;
        if !ok_depth && landmark_set.contains(&i) {
            landmark_bad = true;
        }
        if !ok_depth {
            continue;
        }
        let q = [k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy];
        if !k.contains(q[0], q[1]) {
            continue;
        }
        let n = nalgebra::Vector3::new(normals[[i, 0]], normals[[i, 1]], normals[[i, 2]]);
        if n.dot(&(center - v)) <= 0.0 {
            continue;
        }
        visible.push(i);
    }
    (visible, landmark_bad)
}

fn camera_rotation_taped(tape: &mut Tape, pose: NodeId) -> NodeId {
    // pose: 1x6 [pitch, yaw, roll, t...]; R = Rz(roll) Ry(yaw) Rx(pitch)
    let build = |tape: &mut Tape, angle: NodeId, base: Array2<f64>, cos_m: Array2<f64>, sin_m: Array2<f64>| {
        let c = tape.cos(angle);
        let s = tape.sin(angle);
        let bn = tape.constant(base);
        let cn = tape.constant(cos_m);
        let sn = tape.constant(sin_m);
        let ct = tape.mul_scalar_node(cn, c);
        let st = tape.mul_scalar_node(sn, s);
        let partial = tape.add(bn, ct);
        tape.add(partial, st)
    };
    let pitch = tape.slice_cols(pose, 0..1);
    let yaw = tape.slice_cols(pose, 1..2);
    let roll = tape.slice_cols(pose, 2..3);
    let rx = build(
        tape,
        pitch,
        Array2::from_shape_vec((3, 3), vec![1., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0., 0., 0., 0., 0., -1., 0., 1., 0.]).unwrap(),
    );
    let ry = build(
        tape,
        yaw,
        Array2::from_shape_vec((3, 3), vec![0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![1., 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0., 0., 1., 0., 0., 0., -1., 0., 0.]).unwrap(),
    );
    let rz = build(
        tape,
        roll,
        Array2::from_shape_vec((3, 3), vec![0., 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![1., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap(),
        Array2::from_shape_vec((3, 3), vec![0., -1., 0., 1., 0., 0., 0., 0., 0.]).unwrap(),
    );
    let rzy = tape.matmul(rz, ry);
    tape.matmul(rzy, rx)
}

fn sh_basis_taped(tape: &mut Tape, normals: NodeId) -> NodeId {
    let n = tape.shape(normals).0;
    let x = tape.slice_cols(normals, 0..1);
    let y = tape.slice_cols(normals, 1..2);
    let z = tape.slice_cols(normals, 2..3);
    let ones = tape.constant(Array2::from_elem((n, 1), 0.28209479177387814));
    let c1 = 0.4886025119029199;
    let c2 = 1.0925484305920792;
    let y1 = tape.scale(y, c1);
    let z1 = tape.scale(z, c1);
    let x1 = tape.scale(x, c1);
    let xy = tape.mul(x, y);
    let xy2 = tape.scale(xy, c2);
    let yz = tape.mul(y, z);
    let yz2 = tape.scale(yz, c2);
    let zz = tape.mul(z, z);
    let zz3 = tape.scale(zz, 3.0);
    let zz3m1 = tape.add_const(zz3, -1.0);
    let band20 = tape.scale(zz3m1, 0.31539156525252005);
    let xz = tape.mul(x, z);
    let xz2 = tape.scale(xz, c2);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let diff = tape.sub(xx, yy);
    let band22 = tape.scale(diff, 0.5462742152960396);
    tape.concat_cols(&[ones, y1, z1, x1, xy2, yz2, band20, xz2, band22])
}

/// Build the full fitting energy on a tape. Returns `None` (infinite energy)
/// when a landmark vertex sits at non-positive depth; returns
/// `EmptyCoverage` when a frame's coverage set is empty.
fn build_energy(params: &ProxyParams, frames: &[FrameObservation], basis: &ProxyBasis) -> Result<Option<TapedEnergy>> {
    let n_v = basis.n_vertices();
    let mut tape = Tape::new();

    let alpha_id = tape.leaf(Array2::from_shape_vec((1, basis.d_id()), params.alpha_id.clone()).unwrap());
    let alpha_tex = tape.leaf(Array2::from_shape_vec((1, basis.d_tex()), params.alpha_tex.clone()).unwrap());
    let template = tape.constant(basis.template.clone());
    let shape_b = tape.constant(basis.shape_basis.clone());
    let expr_b = tape.constant(basis.expression_basis.clone());
    let albedo_mean = tape.constant(basis.albedo_mean.clone());
    let albedo_b = tape.constant(basis.albedo_basis.clone());

    // shared shape offset and albedo
    let shape_flat = tape.matmul_nt(shape_b, alpha_id);
    let shape_off = tape.reshape(shape_flat, n_v, 3);
    let tex_flat = tape.matmul_nt(albedo_b, alpha_tex);
    let tex_off = tape.reshape(tex_flat, n_v, 3);
    let albedo = tape.add(albedo_mean, tex_off);
    let base_geometry = tape.add(template, shape_off);

    let mut wrt = vec![alpha_id, alpha_tex];
    let mut image_total: Option<NodeId> = None;
    let mut land_total: Option<NodeId> = None;
    let faces = Arc::new(basis.faces.clone());

    let mut frame_leaves = Vec::new();
    for (j, (frame, obs)) in params.frames.iter().zip(frames).enumerate() {
        let alpha_exp =
            tape.leaf(Array2::from_shape_vec((1, basis.d_exp()), frame.alpha_exp.clone()).unwrap());
        let pose_leaf = tape.leaf(
            Array2::from_shape_vec(
                (1, 6),
                vec![
                    frame.pose.pitch,
                    frame.pose.yaw,
                    frame.pose.roll,
                    frame.pose.translation[0],
                    frame.pose.translation[1],
                    frame.pose.translation[2],
                ],
            )
            .unwrap(),
        );
        let mut sh_flat = Vec::with_capacity(27);
        for k in 0..9 {
            sh_flat.extend(frame.sh[k]);
        }
        let sh_leaf = tape.leaf(Array2::from_shape_vec((9, 3), sh_flat).unwrap());
        frame_leaves.push((alpha_exp, pose_leaf, sh_leaf));

        let exp_flat = tape.matmul_nt(expr_b, alpha_exp);
        let exp_off = tape.reshape(exp_flat, n_v, 3);
        let geometry = tape.add(base_geometry, exp_off);

        // plain-side coverage decision at the current values
        let geometry_vals = tape.value(geometry).clone();
        let normal_vals = vertex_normals(geometry_vals.view(), &basis.faces);
        let (visible, landmark_bad) =
            coverage(geometry_vals.view(), normal_vals.view(), &frame.pose, &obs.intrinsics, &basis.landmarks);
        if landmark_bad {
            return Ok(None);
        }
        if visible.is_empty() {
            return Err(Error::EmptyCoverage { frame: j });
        }

        let rot = camera_rotation_taped(&mut tape, pose_leaf);
        let t_row = tape.slice_cols(pose_leaf, 3..6);
        let rotated = tape.matmul_nt(geometry, rot);
        let t_b = tape.broadcast_row(t_row, n_v);
        let cam = tape.add(rotated, t_b);
        let z = tape.slice_cols(cam, 2..3);
        let xy = tape.slice_cols(cam, 0..2);
        let z2 = tape.concat_cols(&[z, z]);
        let ndc = tape.div(xy, z2);
        let scale = tape.constant(
            Array2::from_shape_vec((1, 2), vec![obs.intrinsics.fx, obs.intrinsics.fy]).unwrap(),
        );
        let offset = tape.constant(
            Array2::from_shape_vec((1, 2), vec![obs.intrinsics.cx, obs.intrinsics.cy]).unwrap(),
        );
        let scaled = tape.mul_row(ndc, scale);
        let q = tape.add_row(scaled, offset);

        // photometric term at visible vertex splats
        let vis = Arc::new(visible.clone());
        let q_vis = tape.gather_rows(q, vis.clone());
        let sampled = tape.bilinear_sample(obs.image.clone(), q_vis);

        let acc = tape.face_cross_accum(geometry, faces.clone());
        let acc_norm = tape.norm_rows(acc);
        let acc_safe = tape.clamp_min(acc_norm, 1e-12);
        let normals = tape.div_col(acc, acc_safe);
        let normals_vis = tape.gather_rows(normals, vis.clone());
        let phi = sh_basis_taped(&mut tape, normals_vis);
        let irradiance = tape.matmul(phi, sh_leaf);
        let albedo_vis = tape.gather_rows(albedo, vis.clone());
        let shaded = tape.mul(albedo_vis, irradiance);

        let diff = tape.sub(sampled, shaded);
        let sq = tape.mul(diff, diff);
        let sum = tape.sum_all(sq);
        let image_j = tape.scale(sum, 1.0 / visible.len() as f64);
        image_total = Some(match image_total {
            None => image_j,
            Some(prev) => tape.add(prev, image_j),
        });

        // landmark term over all landmark vertices
        let lms = Arc::new(basis.landmarks.clone());
        let q_lm = tape.gather_rows(q, lms);
        let observed = tape.constant(Array2::from_shape_fn((basis.landmarks.len(), 2), |(i, k)| obs.landmarks[i][k]));
        let ldiff = tape.sub(q_lm, observed);
        let lsq = tape.mul(ldiff, ldiff);
        let land_j = tape.sum_all(lsq);
        land_total = Some(match land_total {
            None => land_j,
            Some(prev) => tape.add(prev, land_j),
        });
    }

    // regularizer
    let id_sq = tape.mul(alpha_id, alpha_id);
    let tex_sq = tape.mul(alpha_tex, alpha_tex);
    let mut reg = tape.sum_all(id_sq);
    let tex_sum = tape.sum_all(tex_sq);
    reg = tape.add(reg, tex_sum);
    for &(alpha_exp, _, _) in &frame_leaves {
        let sq = tape.mul(alpha_exp, alpha_exp);
        let sum = tape.sum_all(sq);
        reg = tape.add(reg, sum);
    }

    let image_total = image_total.expect("at least one frame");
    let land_total = land_total.expect("at least one frame");
    let wi = tape.scale(image_total, W_IMAGE);
    let wl = tape.scale(land_total, W_LANDMARK);
    let wr = tape.scale(reg, W_REGULARIZER);
    let partial = tape.add(wi, wl);
    let total = tape.add(partial, wr);

    let energy = ProxyEnergy {
        total: tape.scalar_value(total),
        image: tape.scalar_value(image_total),
        landmark: tape.scalar_value(land_total),
        regularizer: tape.scalar_value(reg),
    };

    for (alpha_exp, pose, sh) in frame_leaves {
        wrt.push(alpha_exp);
        wrt.push(pose);
        wrt.push(sh);
    }
    Ok(Some(TapedEnergy { tape, total, energy, wrt }))
}

/// Energy of a parameter set against observed frames:
/// `(E_total, E_image, E_land, E_reg)`.
pub fn proxy_energy(params: &ProxyParams, frames: &[FrameObservation], basis: &ProxyBasis) -> Result<ProxyEnergy> {
    match build_energy(params, frames, basis)? {
        Some(te) => Ok(te.energy),
        None => Ok(ProxyEnergy {
            total: f64::INFINITY,
            image: f64::INFINITY,
            landmark: f64::INFINITY,
            regularizer: f64::INFINITY,
        }),
    }
}

/// Energy and its gradient in packed-parameter order.
pub fn proxy_energy_grad(
    params: &ProxyParams,
    frames: &[FrameObservation],
    basis: &ProxyBasis,
) -> Result<(ProxyEnergy, Vec<f64>)> {
    let te = match build_energy(params, frames, basis)? {
        Some(te) => te,
        None => {
            return Err(Error::Diverged { iteration: 0, energy: f64::INFINITY });
        }
    };
    let TapedEnergy { mut tape, total, energy, wrt } = te;
    let adj = tape.backward(total, &wrt);
    let mut grad = Vec::with_capacity(params.dof());
    for (i, a) in adj.iter().enumerate() {
        let (n, m) = tape.shape(wrt[i]);
        match a {
            Some(id) => grad.extend(tape.value(*id).iter().cloned()),
            None => grad.extend(std::iter::repeat(0.0).take(n * m)),
        }
    }
    Ok((energy, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyFitConfig {
    pub iterations: usize,
    /// Working distance the template is shifted to after the zero init.
    pub initial_distance: f64,
    /// Relative energy change below which the fit stops.
    pub relative_tolerance: f64,
}

impl Default for ProxyFitConfig {
    fn default() -> Self {
        ProxyFitConfig { iterations: 500, initial_distance: 2.5, relative_tolerance: 1e-6 }
    }
}

/// History of accepted energies (one entry per iteration, including the
/// initial energy).
pub type FitTrace = Vec<f64>;

/// Gradient descent with backtracking line search on the fitting energy.
/// The returned energy never exceeds the initialization energy.
pub fn fit_proxy(
    frames: &[FrameObservation],
    basis: &ProxyBasis,
    config: &ProxyFitConfig,
) -> Result<(ProxyParams, FitTrace)> {
    assert!(!frames.is_empty(), "need at least one frame");
    let init = ProxyParams::init(basis, frames.len(), config.initial_distance);
    if config.iterations == 0 {
        return Ok((init, vec![]));
    }
    let mut x = init.pack();
    let mut params = init;
    let (mut energy, mut grad) = proxy_energy_grad(&params, frames, basis)?;
    let mut trace = vec![energy.total];
    let mut step = 1.0 / (1.0 + grad.iter().map(|g| g * g).sum::<f64>().sqrt());

    for iteration in 0..config.iterations {
        if !energy.total.is_finite() {
            return Err(Error::Diverged { iteration, energy: energy.total });
        }
        let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm_sq == 0.0 {
            break;
        }
        // backtracking line search (Armijo)
        let mut accepted = false;
        let mut trial_step = step * 2.0;
        for _ in 0..40 {
            let trial_x: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - trial_step * gi).collect();
            let trial_params = params.unpack(&trial_x);
            let trial_energy = proxy_energy(&trial_params, frames, basis)?;
            if trial_energy.total.is_finite()
                && trial_energy.total <= energy.total - 1e-4 * trial_step * gnorm_sq
            {
                x = trial_x;
                params = trial_params;
                let prev_total = energy.total;
                let refreshed = proxy_energy_grad(&params, frames, basis)?;
                energy = refreshed.0;
                grad = refreshed.1;
                step = trial_step;
                trace.push(energy.total);
                accepted = true;
                if (prev_total - energy.total).abs() <= config.relative_tolerance * prev_total.abs().max(1e-12) {
                    return Ok((params, trace));
                }
                break;
            }
            trial_step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((params, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxySampling {
    /// Uniform area-weighted surface samples.
    Area,
    /// The mesh vertices themselves (first `m`).
    Vertices,
}

/// Sample points on the frame-`j` proxy surface, each paired with that
/// frame's expression code. Deterministic for a fixed seed.
pub fn sample_proxy_points(
    params: &ProxyParams,
    basis: &ProxyBasis,
    frame: usize,
    count: usize,
    mode: ProxySampling,
    seed: u64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let f = &params.frames[frame];
    let geometry = evaluate_geometry(basis, &params.alpha_id, &f.alpha_exp)?;
    let z_d = f.alpha_exp.clone();
    match mode {
        ProxySampling::Vertices => {
            let m = count.min(geometry.nrows());
            Ok((geometry.slice(s![0..m, ..]).to_owned(), z_d))
        }
        ProxySampling::Area => {
            let mut areas = Vec::with_capacity(basis.faces.len());
            let mut acc = 0.0;
            for face in &basis.faces {
                let v = |i: usize| {
                    nalgebra::Vector3::new(geometry[[i, 0]], geometry[[i, 1]], geometry[[i, 2]])
                };
                let a = (v(face[1]) - v(face[0])).cross(&(v(face[2]) - v(face[0]))).norm() / 2.0;
                acc += a;
                areas.push(acc);
            }
            let total = acc;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Array2::zeros((count, 3));
            for i in 0..count {
                let u: f64 = rng.gen_range(0.0..total);
                let fi = areas.partition_point(|&a| a < u).min(basis.faces.len() - 1);
                let face = basis.faces[fi];
                let (r1, r2): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                let sq = r1.sqrt();
                let (wa, wb, wc) = (1.0 - sq, sq * (1.0 - r2), sq * r2);
                for k in 0..3 {
                    out[[i, k]] = wa * geometry[[face[0], k]]
                        + wb * geometry[[face[1], k]]
                        + wc * geometry[[face[2], k]];
                }
            }
            Ok((out, z_d))
        }
    }
}

/// Unit icosphere mesh by repeated subdivision of an icosahedron.
pub fn icosphere(subdivisions: usize) -> (Array2<f64>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in verts.iter_mut() {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (e, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let va = verts[a];
                    let vb = verts[b];
                    let mut m = [
                        (va[0] + vb[0]) / 2.0,
                        (va[1] + vb[1]) / 2.0,
                        (va[2] + vb[2]) / 2.0,
                    ];
                    let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
                    m.iter_mut().for_each(|x| *x /= n);
                    verts.push(m);
                    verts.len() - 1
                });
            }
            new_faces.push([f[0], mid[0], mid[2]]);
            new_faces.push([f[1], mid[1], mid[0]]);
            new_faces.push([f[2], mid[2], mid[1]]);
            new_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = new_faces;
    }
    let arr = Array2::from_shape_fn((verts.len(), 3), |(i, k)| verts[i][k]);
    (arr, faces)
}
