//! SDF-based volumetric rendering along deformed rays.
//!
//! Two forms of the density are implemented. [`opaque_density`] is the
//! continuous reference: `sigma = max(-(dPhi/dt)/Phi, 0)` with the sharpness
//! sigmoid `Phi(x) = 1/(1+exp(-s x))`, differentiated by central differences
//! over `t`. Training uses the discrete per-interval alpha
//! [`sdf_to_alpha`] `= max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0)`, which
//! the taped path evaluates in log space so deeply interior samples do not
//! underflow.

use crate::deform::{canonicalize, deform_taped, se3_exp, warp_direction_taped, DeformedPoint, TapedDeform};
use crate::error::{Error, Result};
use crate::fields::{
    mlp_forward_taped, pos_encode_taped, radiance_net, sdf_gradient, sdf_net, semantic_net,
    FieldParams, MlpLeaves,
};
use crate::geometry::Ray;
use crate::tape::{stable_sigmoid, NodeId, Tape};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use std::sync::Arc;

/// Trainable sharpness of the density sigmoid, kept positive by working in
/// log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessParam {
    pub log_s: f64,
}

impl SharpnessParam {
    pub fn from_s(s: f64) -> Self {
        assert!(s > 0.0);
        SharpnessParam { log_s: s.ln() }
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }
}

/// Composited results for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    /// Sum of weights along the ray; soft occupancy.
    pub mask_weight: f64,
    pub semantic_probs: Vec<f64>,
    pub expected_depth: f64,
    pub weights: Vec<f64>,
}

impl RenderOutput {
    pub fn background(classes: usize) -> Self {
        RenderOutput {
            color: [0.0; 3],
            mask_weight: 0.0,
            semantic_probs: vec![0.0; classes],
            expected_depth: 0.0,
            weights: Vec::new(),
        }
    }
}

/// Ray samples after hierarchical sampling, with the deformation chain
/// evaluated at each.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub ray: Ray,
    pub ts: Vec<f64>,
    pub points: Vec<DeformedPoint>,
}

/// Scene bounding sphere used for per-ray near/far bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl BoundingSphere {
    /// Intersect a ray (origin, unit direction) with this sphere inflated by
    /// `inflate`; returns (t_near, t_far) clamped to positive t.
    pub fn ray_bounds(&self, origin: Vector3<f64>, dir: Vector3<f64>, inflate: f64) -> Option<(f64, f64)> {
        let r = self.radius * inflate;
        let oc = origin - Vector3::from_column_slice(&self.center);
        let b = oc.dot(&dir);
        let c = oc.norm_squared() - r * r;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = -b - sq;
        let t1 = -b + sq;
        if t1 <= 1e-6 {
            return None;
        }
        Some((t0.max(1e-6), t1))
    }
}

/// Continuous reference density of the sharpness sigmoid (clamped at zero),
/// estimated from SDF samples along one ray by central differences.
pub fn opaque_density(f: &[f64], ts: &[f64], s: f64) -> Vec<f64> {
    assert_eq!(f.len(), ts.len());
    let n = f.len();
    let phi: Vec<f64> = f.iter().map(|&x| stable_sigmoid(s * x)).collect();
    let mut sigma = vec![0.0; n];
    for i in 0..n {
        let (lo, hi) = if i == 0 {
            (0, 1)
        } else if i == n - 1 {
            (n - 2, n - 1)
        } else {
            (i - 1, i + 1)
        };
        let dphi_dt = (phi[hi] - phi[lo]) / (ts[hi] - ts[lo]);
        sigma[i] = (-dphi_dt / phi[i]).max(0.0);
    }
    sigma
}

/// Discrete opacity of one sample interval.
pub fn sdf_to_alpha(f_i: f64, f_next: f64, s: f64) -> f64 {
    let phi_i = stable_sigmoid(s * f_i);
    let phi_next = stable_sigmoid(s * f_next);
    if phi_i <= 0.0 {
        return 0.0;
    }
    ((phi_i - phi_next) / phi_i).max(0.0)
}

/// Accumulated transmittance `T_i = prod_{j<i} (1 - alpha_j)` and weights
/// `w_i = T_i alpha_i`.
pub fn transmittance_weights(alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(alphas.len());
    let mut w = Vec::with_capacity(alphas.len());
    let mut acc = 1.0;
    for &a in alphas {
        t.push(acc);
        w.push(acc * a);
        acc *= 1.0 - a;
    }
    (t, w)
}

/// Expected-depth guard against division by zero on empty rays.
pub const DEPTH_EPS: f64 = 1e-6;

/// Composite per-interval weights with per-interval colors, semantic logits,
/// and depths into a [`RenderOutput`].
pub fn composite(
    weights: &[f64],
    colors: Option<ArrayView2<f64>>,
    semantic_logits: Option<ArrayView2<f64>>,
    ts: &[f64],
) -> RenderOutput {
    let n = weights.len();
    assert_eq!(ts.len(), n);
    let mask_weight: f64 = weights.iter().sum();
    let mut color = [0.0; 3];
    if let Some(c) = colors {
        assert_eq!(c.nrows(), n);
        for i in 0..n {
            for k in 0..3 {
                color[k] += weights[i] * c[[i, k]];
            }
        }
    }
    let mut semantic_probs = Vec::new();
    if let Some(logits) = semantic_logits {
        assert_eq!(logits.nrows(), n);
        let classes = logits.ncols();
        semantic_probs = vec![0.0; classes];
        for i in 0..n {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| (l - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for k in 0..classes {
                semantic_probs[k] += weights[i] * exps[k] / denom;
            }
        }
    }
    let depth_num: f64 = weights.iter().zip(ts).map(|(w, t)| w * t).sum();
    RenderOutput {
        color,
        mask_weight,
        semantic_probs,
        expected_depth: depth_num / mask_weight.max(DEPTH_EPS),
        weights: weights.to_vec(),
    }
}

/// Quadrature rendering of the continuous density: returns
/// `(mask weight, expected depth, color)` by trapezoidal integration.
pub fn continuous_render(f: &[f64], ts: &[f64], s: f64, colors: Option<ArrayView2<f64>>) -> (f64, f64, [f64; 3]) {
    let sigma = opaque_density(f, ts, s);
    let n = ts.len();
    // transmittance by cumulative trapezoid of sigma
    let mut t_acc = vec![1.0; n];
    let mut integral = 0.0;
    for i in 1..n {
        integral += 0.5 * (sigma[i] + sigma[i - 1]) * (ts[i] - ts[i - 1]);
        t_acc[i] = (-integral).exp();
    }
    let w: Vec<f64> = (0..n).map(|i| t_acc[i] * sigma[i]).collect();
    let trapz = |vals: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.0;
       for i in 1..n {
            acc += 0.5 * (vals(i) + vals(i - 1)) * (ts[i] - ts[i - 1]);
        }
        acc
    };
    let o_w = trapz(&|i| w[i]);
    let depth = trapz(&|i| w[i] * ts[i]) / o_w.max(DEPTH_EPS);
    let mut color = [0.0; 3];
    if let Some(c) = colors {
        for k in 0..3 {
            color[k] = trapz(&|i| w[i] * c[[i, k]]);
        }
    }
    (o_w, depth, color)
}

/// Analytic signed distance fields for tests and oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticSdf {
    /// `f(x) = x . normal - offset`
    Plane { normal: [f64; 3], offset: f64 },
    /// `f(x) = |x - center| - radius`
    Sphere { center: [f64; 3], radius: f64 },
}

impl AnalyticSdf {
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        match self {
            AnalyticSdf::Plane { normal, offset } => {
                x[0] * normal[0] + x[1] * normal[1] + x[2] * normal[2] - offset
            }
            AnalyticSdf::Sphere { center, radius } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let dz = x[2] - center[2];
                (dx * dx + dy * dy + dz * dz).sqrt() - radius
            }
        }
    }

    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter(x.rows().into_iter().map(|r| self.eval([r[0], r[1], r[2]])))
    }
}

/// What supplies signed distances (and optionally appearance) to the
/// rendering chain.
pub enum SdfSource<'a> {
    Neural(&'a FieldParams),
    Analytic(AnalyticSdf),
}

pub enum AppearanceSource<'a> {
    /// Radiance net conditioned on normals, warped directions and codes.
    Neural { fields: &'a FieldParams, z_cc: &'a Array1<f64> },
    Constant([f64; 3]),
}

pub enum DeformSource<'a> {
    Identity,
    Codes { fields: &'a FieldParams, z_r: [f64; 6], z_d: &'a Array1<f64> },
}

impl DeformSource<'_> {
    fn canonical_points(&self, x_p: ArrayView2<f64>, progress: f64) -> (Array2<f64>, Array2<f64>) {
        match self {
            DeformSource::Identity => (x_p.to_owned(), Array2::zeros((x_p.nrows(), 2))),
            DeformSource::Codes { fields, z_r, z_d } => {
                let batch = canonicalize(fields, x_p, z_r, z_d.view(), progress);
                (batch.x_c, batch.w_h)
            }
        }
    }
}

/// Full plain-path description of a renderable scene.
pub struct RenderScene<'a> {
    pub sdf: SdfSource<'a>,
    pub appearance: AppearanceSource<'a>,
    pub deform: DeformSource<'a>,
    /// Evaluate the semantic head (neural SDF only).
    pub semantics: bool,
    pub sharpness: f64,
    pub anneal_progress: f64,
    pub bounds: BoundingSphere,
    pub bounds_inflate: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl RenderScene<'_> {
    fn sdf_values(&self, x_c: ArrayView2<f64>, w_h: ArrayView2<f64>) -> (Array1<f64>, Option<Array2<f64>>) {
        match &self.sdf {
            SdfSource::Neural(fields) => {
                let (f, z_cg) = sdf_net(fields, x_c, w_h, self.anneal_progress);
                (f, Some(z_cg))
            }
            SdfSource::Analytic(a) => (a.eval_batch(x_c), None),
        }
    }
}

/// Stratified coarse samples plus inverse-CDF fine samples, merged and
/// strictly sorted. Deterministic for a fixed RNG state.
pub fn sample_hierarchical(
    ray: &Ray,
    scene: &RenderScene,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    let (t_n, t_f) = (ray.t_near, ray.t_far);
    let n_c = scene.n_coarse;
    let range = t_f - t_n;
    let mut coarse = Vec::with_capacity(n_c);
    for i in 0..n_c {
        let u: f64 = rng.gen_range(0.0..1.0);
        coarse.push(t_n + range * (i as f64 + u) / n_c as f64);
    }

    // coarse weights from the SDF through the deformation chain
    let x_p = points_on_ray(ray, &coarse);
    let (x_c, w_h) = scene.deform.canonical_points(x_p.view(), scene.anneal_progress);
    let (f, _) = self_sdf(scene, x_c.view(), w_h.view());
    let alphas: Vec<f64> = (0..n_c.saturating_sub(1))
        .map(|i| sdf_to_alpha(f[i], f[i + 1], scene.sharpness))
        .collect();
    let (_, weights) = transmittance_weights(&alphas);

    // inverse-CDF sampling over the coarse intervals
    let pad = 1e-5;
    let padded: Vec<f64> = weights.iter().map(|w| w + pad).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(padded.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &padded {
        acc += w / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut fine = Vec::with_capacity(scene.n_fine);
    for _ in 0..scene.n_fine {
        let u: f64 = rng.gen_range(0.0..1.0);
        // find bin with cdf[b] <= u < cdf[b+1]
        let mut b = match cdf.binary_search_by(|probe| probe.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if b >= padded.len() {
            b = padded.len() - 1;
        }
        let span = cdf[b + 1] - cdf[b];
        let frac = if span > 0.0 { (u - cdf[b]) / span } else { 0.5 };
        let t0 = coarse[b];
        let t1 = coarse[b + 1];
        fine.push(t0 + frac * (t1 - t0));
    }

    let mut ts = coarse;
    ts.extend(fine);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            ts[i] = ts[i - 1] + range * 1e-12;
        }
    }

    let x_p = points_on_ray(ray, &ts);
    let (x_c, w_h) = scene.deform.canonical_points(x_p.view(), scene.anneal_progress);
    let points = (0..ts.len())
        .map(|i| DeformedPoint {
            x_p: [x_p[[i, 0]], x_p[[i, 1]], x_p[[i, 2]]],
            x_r: [x_p[[i, 0]], x_p[[i, 1]], x_p[[i, 2]]],
            x_c: [x_c[[i, 0]], x_c[[i, 1]], x_c[[i, 2]]],
            w_h: [w_h[[i, 0]], w_h[[i, 1]]],
            v_c: None,
        })
        .collect();
    Ok(RaySamples { ray: *ray, ts, points })
}

fn self_sdf(scene: &RenderScene, x_c: ArrayView2<f64>, w_h: ArrayView2<f64>) -> (Array1<f64>, Option<Array2<f64>>) {
    scene.sdf_values(x_c, w_h)
}

fn points_on_ray(ray: &Ray, ts: &[f64]) -> Array2<f64> {
    let mut x = Array2::zeros((ts.len(), 3));
    for (i, &t) in ts.iter().enumerate() {
        let p = ray.point_at(t);
        x[[i, 0]] = p.x;
        x[[i, 1]] = p.y;
        x[[i, 2]] = p.z;
    }
    x
}

/// Render one ray through the full plain-path chain: hierarchical sampling,
/// deformation, field evaluation, discrete compositing. Rays that miss the
/// inflated bounding sphere composite to background.
pub fn render_ray(scene: &RenderScene, origin: Vector3<f64>, dir: Vector3<f64>, rng: &mut impl Rng) -> Result<RenderOutput> {
    let classes = match &self_classes(scene) {
        Some(k) => *k,
        None => 0,
    };
    let (t_n, t_f) = match scene.bounds.ray_bounds(origin, dir, scene.bounds_inflate) {
        Some(b) => b,
        None => return Ok(RenderOutput::background(classes)),
    };
    let ray = Ray::new(origin, dir, t_n, t_f)?;
    let samples = sample_hierarchical(&ray, scene, rng)?;
    let s_count = samples.ts.len();

    let x_p = points_on_ray(&ray, &samples.ts);
    let (x_c, w_h) = scene.deform.canonical_points(x_p.view(), scene.anneal_progress);
    let (f, z_cg) = scene.sdf_values(x_c.view(), w_h.view());

    let alphas: Vec<f64> = (0..s_count - 1)
        .map(|i| sdf_to_alpha(f[i], f[i + 1], scene.sharpness))
        .collect();
    let (_, weights) = transmittance_weights(&alphas);
    let mids: Vec<f64> = (0..s_count - 1)
        .map(|i| 0.5 * (samples.ts[i] + samples.ts[i + 1]))
        .collect();

    let head = |a: ArrayView2<f64>| a.slice(ndarray::s![0..s_count - 1, ..]).to_owned();

    let colors: Array2<f64> = match &scene.appearance {
        AppearanceSource::Constant(c) => {
            Array2::from_shape_fn((s_count - 1, 3), |(_, k)| c[k])
        }
        AppearanceSource::Neural { fields, z_cc } => {
            let grad = sdf_gradient(fields, x_c.view(), w_h.view(), scene.anneal_progress);
            let mut normals = Array2::zeros(grad.raw_dim());
            for i in 0..grad.nrows() {
                let n = grad.row(i);
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-8);
                for k in 0..3 {
                    normals[[i, k]] = grad[[i, k]] / norm;
                }
            }
            let v_c = match &scene.deform {
                DeformSource::Identity => {
                    Array2::from_shape_fn((s_count, 3), |(_, k)| dir[k])
                }
                DeformSource::Codes { fields, z_r, z_d } => {
                    let v = Array2::from_shape_fn((s_count, 3), |(_, k)| dir[k]);
                    crate::deform::warp_direction(fields, x_p.view(), v.view(), z_r, z_d.view(), scene.anneal_progress)?
                }
            };
            let z_cg_arr = z_cg.clone().expect("neural appearance requires neural sdf");
            let c = radiance_net(
                fields,
                x_c.view(),
                normals.view(),
                v_c.view(),
                z_cg_arr.view(),
                z_cc.view(),
                scene.anneal_progress,
            );
            head(c.view())
        }
    };

    let sem = if scene.semantics {
        match (&scene.sdf, &z_cg) {
            (SdfSource::Neural(fields), Some(z)) => {
                let logits = semantic_net(fields, x_c.view(), z.view(), scene.anneal_progress);
                Some(head(logits.view()))
            }
            _ => None,
        }
    } else {
        None
    };

    Ok(composite(&weights, Some(colors.view()), sem.as_ref().map(|s| s.view()), &mids))
}

fn self_classes(scene: &RenderScene) -> Option<usize> {
    match (&scene.sdf, scene.semantics) {
        (SdfSource::Neural(f), true) => Some(f.config.semantic_classes),
        _ => None,
    }
}

/// Render the ray through a pixel of a posed camera.
pub fn render_pixel(
    scene: &RenderScene,
    pixel: [f64; 2],
    pose: &crate::geometry::CameraPose,
    intrinsics: &crate::geometry::Intrinsics,
    rng: &mut impl Rng,
) -> Result<RenderOutput> {
    if !intrinsics.contains(pixel[0], pixel[1]) {
        return Err(Error::PixelOutOfBounds {
            x: pixel[0],
            y: pixel[1],
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    let dir_cam = Vector3::new(
        (pixel[0] - intrinsics.cx) / intrinsics.fx,
        (pixel[1] - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let r = pose.rotation();
    let dir = (r.transpose() * dir_cam).normalize();
    let origin = pose.center();
    render_ray(scene, origin, dir, rng)
}

// ---------------------------------------------------------------------------
// Taped batch rendering (the training path)
// ---------------------------------------------------------------------------

/// Leaves of all trainable quantities for one frame on one tape.
pub struct FieldLeaves {
    pub offset: MlpLeaves,
    pub topology: MlpLeaves,
    pub sdf: MlpLeaves,
    pub radiance: MlpLeaves,
    pub semantic: MlpLeaves,
    pub z_r: NodeId,
    pub z_cc: NodeId,
    pub z_d: NodeId,
    pub log_s: NodeId,
}

impl FieldLeaves {
    pub fn new(
        tape: &mut Tape,
        fields: &FieldParams,
        z_r: &[f64; 6],
        z_d: ArrayView1<f64>,
        z_cc: ArrayView1<f64>,
        sharpness: &SharpnessParam,
    ) -> Self {
        let z_r_arr = Array2::from_shape_vec((1, 6), z_r.to_vec()).unwrap();
        FieldLeaves {
            offset: MlpLeaves::new(tape, &fields.offset, true),
            topology: MlpLeaves::new(tape, &fields.topology, true),
            sdf: MlpLeaves::new(tape, &fields.sdf, true),
            radiance: MlpLeaves::new(tape, &fields.radiance, true),
            semantic: MlpLeaves::new(tape, &fields.semantic, true),
            z_r: tape.leaf(z_r_arr),
            z_cc: tape.leaf(z_cc.to_owned().insert_axis(Axis(0))),
            z_d: tape.constant(z_d.to_owned().insert_axis(Axis(0))),
            log_s: tape.leaf(Array2::from_elem((1, 1), sharpness.log_s)),
        }
    }

    pub fn sharpness_node(&self, tape: &mut Tape) -> NodeId {
        tape.exp(self.log_s)
    }
}

/// A batch of rays of one frame prepared for the taped renderer. Rays are
/// ordered inside-mask first; every ray carries the same sample count.
pub struct FrameRayBatch {
    /// R x 3 ray origins (world).
    pub origins: Array2<f64>,
    /// R x 3 unit directions.
    pub dirs: Array2<f64>,
    /// Flattened sample positions, ray-major, length R * S.
    pub ts: Vec<f64>,
    pub samples_per_ray: usize,
    /// Count of leading rays that are inside the mask.
    pub n_inside: usize,
}

impl FrameRayBatch {
    pub fn n_rays(&self) -> usize {
        self.origins.nrows()
    }

    /// World-space sample points, ray-major rows.
    pub fn sample_points(&self) -> Array2<f64> {
        let s = self.samples_per_ray;
        let n = self.n_rays() * s;
        let mut x = Array2::zeros((n, 3));
        for r in 0..self.n_rays() {
            for i in 0..s {
                let t = self.ts[r * s + i];
                for k in 0..3 {
                    x[[r * s + i, k]] = self.origins[[r, k]] + t * self.dirs[[r, k]];
                }
            }
        }
        x
    }

    /// Per-sample directions (each ray's direction repeated).
    pub fn sample_dirs(&self) -> Array2<f64> {
        let s = self.samples_per_ray;
        let n = self.n_rays() * s;
        let mut v = Array2::zeros((n, 3));
        for r in 0..self.n_rays() {
            for i in 0..s {
                for k in 0..3 {
                    v[[r * s + i, k]] = self.dirs[[r, k]];
                }
            }
        }
        v
    }

    /// Midpoints of the sample intervals, ray-major, length R * (S-1).
    pub fn interval_midpoints(&self) -> Vec<f64> {
        let s = self.samples_per_ray;
        let mut mids = Vec::with_capacity(self.n_rays() * (s - 1));
        for r in 0..self.n_rays() {
            for i in 0..s - 1 {
                mids.push(0.5 * (self.ts[r * s + i] + self.ts[r * s + i + 1]));
            }
        }
        mids
    }
}

/// Tape nodes produced by rendering one frame batch.
pub struct TapedFrameRender {
    /// (R*S) x 1 signed distances.
    pub f: NodeId,
    /// R x 1 mask weights.
    pub mask_weight: NodeId,
    /// R_in x 3 composited colors (inside rays only).
    pub color: Option<NodeId>,
    /// R_in x K composited semantic probabilities.
    pub semantics: Option<NodeId>,
    /// R_in x 1 expected depths.
    pub depth: Option<NodeId>,
    /// Deformation chain of all samples (for reuse by loss terms).
    pub chain: TapedDeform,
}

/// The full differentiable rendering chain for one frame's ray batch.
/// Radiance and semantics are evaluated on inside-mask rays only; mask
/// weights cover every ray.
pub fn render_frame_taped(
    tape: &mut Tape,
    fields: &FieldParams,
    leaves: &FieldLeaves,
    batch: &FrameRayBatch,
    progress: f64,
) -> Result<TapedFrameRender> {
    let s_count = batch.samples_per_ray;
    let n_rays = batch.n_rays();
    let n_rows = n_rays * s_count;
    assert!(s_count >= 2, "need at least two samples per ray");
    assert_eq!(batch.ts.len(), n_rows);

    let x_p = tape.leaf(batch.sample_points());
    let chain = deform_taped(tape, fields, &leaves.offset, &leaves.topology, x_p, leaves.z_r, leaves.z_d, progress);

    // SDF over every sample
    let enc_x = pos_encode_taped(tape, chain.x_c, &fields.config.point_enc(progress));
    let enc_w = pos_encode_taped(tape, chain.w_h, &fields.config.ambient_enc(progress));
    let sdf_in = tape.concat_cols(&[enc_x, enc_w]);
    let sdf_out = mlp_forward_taped(tape, &fields.sdf.spec, &leaves.sdf, sdf_in);
    let f = tape.slice_cols(sdf_out, 0..1);
    let z_cg = tape.slice_cols(sdf_out, 1..1 + fields.config.z_cg_dim);

    // discrete alphas in log space
    let s_node = leaves.sharpness_node(tape);
    let sf = tape.mul_scalar_node(f, s_node);
    let log_phi = tape.log_sigmoid(sf);
    let (head_idx, tail_idx) = interval_indices(n_rays, s_count);
    let head_idx = Arc::new(head_idx);
    let lp_head = tape.gather_rows(log_phi, head_idx.clone());
    let lp_tail = tape.gather_rows(log_phi, Arc::new(tail_idx));
    let ln_ratio = tape.sub(lp_tail, lp_head);
    let ln_ratio_c = tape.clamp_max(ln_ratio, 0.0);
    let one_minus_alpha = tape.exp(ln_ratio_c);
    let neg = tape.neg(one_minus_alpha);
    let alpha = tape.add_const(neg, 1.0);
    let ln_t = tape.seg_cumsum_excl(ln_ratio_c, s_count - 1);
    let transmittance = tape.exp(ln_t);
    let weights = tape.mul(transmittance, alpha);
    let mask_weight = tape.segment_sum(weights, s_count - 1);

    let n_inside = batch.n_inside;
    let (color, semantics, depth) = if n_inside > 0 {
        // normals: inner gradient of the SDF sum w.r.t. canonical points
        let grads = tape.backward(f, &[chain.x_c]);
        let grad_x = grads[0].expect("sdf depends on x_c");
        let gnorm = tape.norm_rows(grad_x);
        let gnorm_safe = tape.clamp_min(gnorm, 1e-8);
        let normals = tape.div_col(grad_x, gnorm_safe);

        // warped viewing directions
        let v = tape.constant(batch.sample_dirs());
        let v_c = warp_direction_taped(tape, &chain, v)?;

        // inside-sample rows come first by construction
        let inside_rows: Vec<usize> = (0..n_inside * s_count).collect();
        let inside_rows = Arc::new(inside_rows);
        let x_in = tape.gather_rows(chain.x_c, inside_rows.clone());
        let n_in = tape.gather_rows(normals, inside_rows.clone());
        let v_in = tape.gather_rows(v_c, inside_rows.clone());
        let zg_in = tape.gather_rows(z_cg, inside_rows.clone());

        let enc_xi = pos_encode_taped(tape, x_in, &fields.config.point_enc(progress));
        let enc_vi = pos_encode_taped(tape, v_in, &fields.config.direction_enc(progress));
        let z_cc_b = tape.broadcast_row(leaves.z_cc, n_inside * s_count);
        let rad_in = tape.concat_cols(&[enc_xi, n_in, enc_vi, zg_in, z_cc_b]);
        let colors_all = mlp_forward_taped(tape, &fields.radiance.spec, &leaves.radiance, rad_in);

        let sem_in = tape.concat_cols(&[enc_xi, zg_in]);
        let logits_all = mlp_forward_taped(tape, &fields.semantic.spec, &leaves.semantic, sem_in);
        let probs_all = tape.softmax_rows(logits_all);

        // per-interval head rows within the inside block
        let (head_in, _) = interval_indices(n_inside, s_count);
        let head_in = Arc::new(head_in);
        let colors_head = tape.gather_rows(colors_all, head_in.clone());
        let probs_head = tape.gather_rows(probs_all, head_in);

        let w_inside_rows: Vec<usize> = (0..n_inside * (s_count - 1)).collect();
        let w_inside_rows = Arc::new(w_inside_rows);
        let w_in = tape.gather_rows(weights, w_inside_rows);

        let cw = tape.mul_col(colors_head, w_in);
        let color = tape.segment_sum(cw, s_count - 1);
        let pw = tape.mul_col(probs_head, w_in);
        let sem = tape.segment_sum(pw, s_count - 1);

        let mids = batch.interval_midpoints();
        let mids_in =
            Array2::from_shape_vec((n_inside * (s_count - 1), 1), mids[0..n_inside * (s_count - 1)].to_vec()).unwrap();
        let mids_n = tape.constant(mids_in);
        let tw = tape.mul(w_in, mids_n);
        let depth_num = tape.segment_sum(tw, s_count - 1);
        let ow_in_rows: Vec<usize> = (0..n_inside).collect();
        let ow_in = tape.gather_rows(mask_weight, Arc::new(ow_in_rows));
        let ow_safe = tape.clamp_min(ow_in, DEPTH_EPS);
        let depth = tape.div(depth_num, ow_safe);

        (Some(color), Some(sem), Some(depth))
    } else {
        (None, None, None)
    };

    Ok(TapedFrameRender { f, mask_weight, color, semantics, depth, chain })
}

/// Row indices of interval heads (`i`) and tails (`i+1`) for `n_rays`
/// segments of `s` samples.
fn interval_indices(n_rays: usize, s: usize) -> (Vec<usize>, Vec<usize>) {
    let mut head = Vec::with_capacity(n_rays * (s - 1));
    let mut tail = Vec::with_capacity(n_rays * (s - 1));
    for r in 0..n_rays {
        for i in 0..s - 1 {
            head.push(r * s + i);
            tail.push(r * s + i + 1);
        }
    }
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn plane_scene(sharpness: f64, n_coarse: usize, n_fine: usize) -> RenderScene<'static> {
        RenderScene {
            sdf: SdfSource::Analytic(AnalyticSdf::Plane { normal: [0.0, 0.0, -1.0], offset: -2.0 }),
            appearance: AppearanceSource::Constant([0.3, 0.6, 0.9]),
            deform: DeformSource::Identity,
            semantics: false,
            sharpness,
            anneal_progress: 1.0,
            bounds: BoundingSphere { center: [0.0, 0.0, 2.0], radius: 1.5 },
            bounds_inflate: 1.3,
            n_coarse,
            n_fine,
        }
    }

    #[test]
    fn density_of_unit_slope_entry() {
        // f(t) = -(t - t0): crossing at t0 with slope -1
        let t0 = 2.0;
        let s = 50.0;
        let dt = 0.001;
        let ts: Vec<f64> = (0..2001).map(|i| 1.0 + i as f64 * dt).collect();
        let f: Vec<f64> = ts.iter().map(|&t| -(t - t0)).collect();
        let sigma = opaque_density(&f, &ts, s);
        let closed: Vec<f64> = f.iter().map(|&fi| s * (1.0 - stable_sigmoid(s * fi))).collect();
        let at_t0 = ts.iter().position(|&t| (t - t0).abs() < 1e-9).unwrap();
        // central differences carry O((s dt)^2) relative error
        let tol = s * (s * dt).powi(2);
        assert_abs_diff_eq!(sigma[at_t0], s / 2.0, epsilon = tol);
        for i in 1..ts.len() - 1 {
            assert_abs_diff_eq!(sigma[i], closed[i], epsilon = tol);
        }
    }

    #[test]
    fn density_clamps_on_exit_and_constant() {
        let ts: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let rising: Vec<f64> = ts.iter().map(|&t| t - 0.5).collect();
        assert!(opaque_density(&rising, &ts, 100.0).iter().all(|&v| v == 0.0));
        let flat = vec![0.3; ts.len()];
        assert!(opaque_density(&flat, &ts, 100.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_basic_properties() {
        assert_eq!(sdf_to_alpha(0.4, 0.4, 100.0), 0.0);
        assert_eq!(sdf_to_alpha(0.1, 0.5, 100.0), 0.0);
        let a = sdf_to_alpha(0.1, -0.1, 200.0);
        assert!(a > 0.999, "alpha across a sharp crossing = {a}");
    }

    #[test]
    fn transmittance_empty_space() {
        let (t, w) = transmittance_weights(&[0.0; 8]);
        assert!(t.iter().all(|&v| v == 1.0));
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transmittance_matches_constant_density_closed_form() {
        // constant continuous sigma: T(t) = exp(-sigma (t - t_n))
        let sigma = 2.0;
        let n = 512;
        let t_n = 0.0;
        let t_f = 1.0;
        let dt = (t_f - t_n) / n as f64;
        let alphas = vec![1.0 - (-sigma * dt as f64).exp(); n];
        let (t, _) = transmittance_weights(&alphas);
        for i in (0..n).step_by(64) {
            let expected = (-sigma * (i as f64 * dt)).exp();
            assert_abs_diff_eq!(t[i], expected, epsilon = 1e-3);
        }
        for i in 1..n {
            assert!(t[i] <= t[i - 1]);
        }
    }

    #[test]
    fn composite_single_surface_plane() {
        let scene = plane_scene(200.0, 512, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = render_ray(&scene, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), &mut rng).unwrap();
        let spacing = (scene.bounds.radius * scene.bounds_inflate * 2.0) / 512.0;
        assert!((out.mask_weight - 1.0).abs() < 1e-2, "o_w = {}", out.mask_weight);
        for k in 0..3 {
            assert!((out.color[k] - [0.3, 0.6, 0.9][k]).abs() < 1e-2);
        }
        assert!((out.expected_depth - 2.0).abs() < spacing, "depth = {}", out.expected_depth);
    }

    #[test]
    fn ray_missing_bounds_is_background() {
        let scene = plane_scene(200.0, 64, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = render_ray(&scene, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), &mut rng).unwrap();
        assert_eq!(out.mask_weight, 0.0);
        assert_eq!(out.color, [0.0; 3]);
    }

    #[test]
    fn all_positive_sdf_composites_to_nothing() {
        let scene = RenderScene {
            sdf: SdfSource::Analytic(AnalyticSdf::Plane { normal: [0.0, 0.0, -1.0], offset: -50.0 }),
            ..plane_scene(200.0, 128, 0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = render_ray(&scene, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), &mut rng).unwrap();
        assert!(out.mask_weight <= 1e-3);
        assert!(out.color.iter().all(|&c| c.abs() <= 1e-3));
    }

    #[test]
    fn discrete_and_continuous_depth_agree_on_plane() {
        let s = 200.0;
        let n = 512;
        let t_n = 0.5;
        let t_f = 4.4;
        let t0 = 2.0;
        let ts: Vec<f64> = (0..n).map(|i| t_n + (t_f - t_n) * (i as f64 + 0.5) / n as f64).collect();
        let f: Vec<f64> = ts.iter().map(|&t| t0 - t).collect();
        let spacing = (t_f - t_n) / n as f64;

        let alphas: Vec<f64> = (0..n - 1).map(|i| sdf_to_alpha(f[i], f[i + 1], s)).collect();
        let (_, w) = transmittance_weights(&alphas);
        let mids: Vec<f64> = (0..n - 1).map(|i| 0.5 * (ts[i] + ts[i + 1])).collect();
        let discrete = composite(&w, None, None, &mids);

        let (o_w, depth_cont, _) = continuous_render(&f, &ts, s, None);
        // the quadrature mass carries O(s dt) bias; only depth agreement is
        // contractual
        assert!(o_w > 0.9, "continuous o_w = {o_w}");
        assert!((discrete.expected_depth - depth_cont).abs() <= spacing);
        assert!((discrete.expected_depth - t0).abs() <= spacing);
    }

    #[test]
    fn doubling_samples_converges() {
        let mut prev_color: Option<[f64; 3]> = None;
        for &n in &[256usize, 512, 1024] {
            let scene = plane_scene(200.0, n, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let out = render_ray(&scene, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), &mut rng).unwrap();
            if let Some(prev) = prev_color {
                for k in 0..3 {
                    assert!((out.color[k] - prev[k]).abs() <= 1e-3, "n={n}: {:?} vs {:?}", out.color, prev);
                }
            }
            prev_color = Some(out.color);
        }
    }

    #[test]
    fn sharper_sigmoid_concentrates_weights() {
        let mut prev_std: Option<f64> = None;
        for &s in &[10.0, 50.0, 200.0] {
            let scene = plane_scene(s, 512, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let out = render_ray(&scene, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), &mut rng).unwrap();
            let total: f64 = out.weights.iter().sum();
            let ts: Vec<f64> = {
                // reconstruct midpoints from the scene bounds and sample count
                let (t_n, t_f) = scene
                    .bounds
                    .ray_bounds(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), scene.bounds_inflate)
                    .unwrap();
                let n = out.weights.len() + 1;
                let mut rng2 = ChaCha8Rng::seed_from_u64(11);
                let range = t_f - t_n;
                let raw: Vec<f64> = (0..n)
                    .map(|i| {
                        let u: f64 = rng2.gen_range(0.0..1.0);
                        t_n + range * (i as f64 + u) / n as f64
                    })
                    .collect();
                (0..n - 1).map(|i| 0.5 * (raw[i] + raw[i + 1])).collect()
            };
            let mean: f64 = out.weights.iter().zip(&ts).map(|(w, t)| w * t).sum::<f64>() / total;
            let var: f64 = out.weights.iter().zip(&ts).map(|(w, t)| w * (t - mean).powi(2)).sum::<f64>() / total;
            let std = var.sqrt();
            if let Some(p) = prev_std {
                assert!(std <= p + 1e-9, "s={s}: std {std} > previous {p}");
            }
            prev_std = Some(std);
        }
    }

    #[test]
    fn hierarchical_sampling_contract() {
        let scene = plane_scene(200.0, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t_n, t_f) = scene
            .bounds
            .ray_bounds(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), scene.bounds_inflate)
            .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), t_n, t_f).unwrap();
        let samples = sample_hierarchical(&ray, &scene, &mut rng).unwrap();
        assert_eq!(samples.ts.len(), 128);
        for i in 1..samples.ts.len() {
            assert!(samples.ts[i] > samples.ts[i - 1]);
        }
        assert!(samples.ts.iter().all(|&t| t >= t_n && t <= t_f));

        // determinism
        let mut rng2 = ChaCha8Rng::seed_from_u64(21);
        let again = sample_hierarchical(&ray, &scene, &mut rng2).unwrap();
        assert_eq!(samples.ts, again.ts);
    }

    #[test]
    fn uniform_weights_give_nearly_uniform_fine_samples() {
        // far-away plane: all coarse weights ~ 0, so the padded CDF is uniform
        let scene = RenderScene {
            sdf: SdfSource::Analytic(AnalyticSdf::Plane { normal: [0.0, 0.0, -1.0], offset: -50.0 }),
            ..plane_scene(200.0, 64, 64)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), 1.0, 3.0).unwrap();
        let samples = sample_hierarchical(&ray, &scene, &mut rng).unwrap();
        // Kolmogorov-Smirnov statistic of all samples vs uniform on [1, 3]
        let mut ts = samples.ts.clone();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ts.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &t) in ts.iter().enumerate() {
            let empirical = (i + 1) as f64 / n;
            let theoretical = (t - 1.0) / 2.0;
            ks = ks.max((empirical - theoretical).abs());
        }
        assert!(ks <= 0.15, "KS = {ks}");
    }

    #[test]
    fn concentrated_weights_confine_fine_samples() {
        let scene = plane_scene(200.0, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (t_n, t_f) = scene
            .bounds
            .ray_bounds(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), scene.bounds_inflate)
            .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0), t_n, t_f).unwrap();
        let samples = sample_hierarchical(&ray, &scene, &mut rng).unwrap();
        // most samples should cluster around the surface at t = 2
        let near: usize = samples.ts.iter().filter(|&&t| (t - 2.0).abs() < 0.3).count();
        assert!(near >= 64, "only {near} samples near the surface");
    }

    /// The taped neural chain against the plain path on the same inputs.
    #[test]
    fn taped_render_matches_plain_composite() {
        use crate::fields::{FieldConfig, FieldParams};
        let cfg = FieldConfig { z_cg_dim: 16, ..FieldConfig::desk() };
        let fields = FieldParams::init(cfg, 71);
        let sharp = SharpnessParam::from_s(10.0);
        let z_d = Array1::zeros(cfg.z_d_dim);
        let z_cc = Array1::zeros(cfg.z_cc_dim);
        let z_r = [0.0; 6];

        let s_count = 9;
        let n_rays = 3;
        let mut ts = Vec::new();
        for r in 0..n_rays {
            for i in 0..s_count {
                ts.push(0.5 + 0.35 * i as f64 + 0.01 * r as f64);
            }
        }
        let origins = Array2::from_shape_fn((n_rays, 3), |(r, k)| if k == 0 { -1.2 + 0.2 * r as f64 } else { 0.0 });
        let dirs = Array2::from_shape_fn((n_rays, 3), |(_, k)| if k == 0 { 1.0 } else { 0.0 });
        let batch = FrameRayBatch { origins, dirs, ts, samples_per_ray: s_count, n_inside: 2 };

        let mut tape = Tape::new();
        let leaves = FieldLeaves::new(&mut tape, &fields, &z_r, z_d.view(), z_cc.view(), &sharp);
        let render = render_frame_taped(&mut tape, &fields, &leaves, &batch, 0.3).unwrap();

        // plain reference for ray 0 (inside)
        let x = batch.sample_points();
        let x0 = x.slice(ndarray::s![0..s_count, ..]);
        let d = canonicalize(&fields, x0, &z_r, z_d.view(), 0.3);
        let (f, _) = sdf_net(&fields, d.x_c.view(), d.w_h.view(), 0.3);
        let alphas: Vec<f64> = (0..s_count - 1).map(|i| sdf_to_alpha(f[i], f[i + 1], sharp.s())).collect();
        let (_, w) = transmittance_weights(&alphas);
        let ow: f64 = w.iter().sum();
        let taped_ow = tape.value(render.mask_weight)[[0, 0]];
        assert!((taped_ow - ow).abs() < 1e-9, "taped {taped_ow} vs plain {ow}");
    }

    /// Gradients of a rendered-color scalar w.r.t. every parameter family.
    #[test]
    fn render_gradients_match_finite_differences() {
        use crate::fields::{FieldConfig, FieldParams};
        let cfg = FieldConfig { z_cg_dim: 8, z_cc_dim: 4, z_d_dim: 4, ..FieldConfig::desk() };
        let mut fields = FieldParams::init(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // nonzero offset/topology output layers so those paths are live
        for mlp in [&mut fields.offset, &mut fields.topology] {
            let n = mlp.params.len();
            for p in mlp.params[n - 300..].iter_mut() {
                *p = 0.02 * rng.gen_range(-1.0f64..1.0);
            }
        }
        let sharp = SharpnessParam::from_s(12.0);
        let z_d = Array1::from_shape_fn(cfg.z_d_dim, |_| rng.gen_range(-0.2..0.2));
        let z_cc = Array1::from_shape_fn(cfg.z_cc_dim, |_| rng.gen_range(-0.2..0.2));
        let z_r = [0.02, -0.03, 0.01, 0.005, -0.01, 0.02];

        let s_count = 6;
        let ts: Vec<f64> = (0..s_count).map(|i| 0.8 + 0.3 * i as f64).collect();
        let origins = Array2::from_shape_fn((1, 3), |(_, k)| if k == 2 { -1.0 } else { 0.05 });
        let dirs = Array2::from_shape_fn((1, 3), |(_, k)| if k == 2 { 1.0 } else { 0.0 });
        let batch = FrameRayBatch { origins, dirs, ts, samples_per_ray: s_count, n_inside: 1 };

        let eval = |fields: &FieldParams, z_r: &[f64; 6], z_cc: &Array1<f64>, log_s: f64, grad: bool| {
            let mut tape = Tape::new();
            let sharp = SharpnessParam { log_s };
            let leaves = FieldLeaves::new(&mut tape, fields, z_r, z_d.view(), z_cc.view(), &sharp);
            let render = render_frame_taped(&mut tape, fields, &leaves, &batch, 0.5).unwrap();
            let color = render.color.unwrap();
            let sq = tape.mul(color, color);
            let loss = tape.sum_all(sq);
            let v = tape.scalar_value(loss);
            if !grad {
                return (v, None);
            }
            let mut wrt = vec![leaves.z_r, leaves.z_cc, leaves.log_s];
            wrt.extend(leaves.sdf.all_ids());
            wrt.extend(leaves.radiance.all_ids());
            wrt.extend(leaves.offset.all_ids());
            let adj = tape.backward(loss, &wrt);
            let gz_r = adj[0].map(|id| tape.value(id).clone());
            let gz_cc = adj[1].map(|id| tape.value(id).clone());
            let gs = adj[2].map(|id| tape.value(id)[[0, 0]]);
            let g_sdf = leaves.sdf.flatten_grads(&tape, &fields.sdf.spec, &adj[3..3 + leaves.sdf.all_ids().len()]);
            let off = 3 + leaves.sdf.all_ids().len();
            let g_rad = leaves
                .radiance
                .flatten_grads(&tape, &fields.radiance.spec, &adj[off..off + leaves.radiance.all_ids().len()]);
            let off2 = off + leaves.radiance.all_ids().len();
            let g_off = leaves
                .offset
                .flatten_grads(&tape, &fields.offset.spec, &adj[off2..]);
            (v, Some((gz_r, gz_cc, gs, g_sdf, g_rad, g_off)))
        };

        let (_, grads) = eval(&fields, &z_r, &z_cc, sharp.log_s, true);
        let (gz_r, gz_cc, gs, g_sdf, g_rad, g_off) = grads.unwrap();
        let h = 1e-5;
        let tol = |ad: f64, fd: f64| {
            let denom = ad.abs().max(fd.abs());
            (ad - fd).abs() <= 1e-4 * denom + 1e-7
        };

        // z_r
        let gz_r = gz_r.unwrap();
        for i in 0..6 {
            let mut zp = z_r;
            zp[i] += h;
            let mut zm = z_r;
            zm[i] -= h;
            let fd = (eval(&fields, &zp, &z_cc, sharp.log_s, false).0 - eval(&fields, &zm, &z_cc, sharp.log_s, false).0) / (2.0 * h);
            assert!(tol(gz_r[[0, i]], fd), "z_r[{i}]: ad={} fd={fd}", gz_r[[0, i]]);
        }
        // z_cc
        let gz_cc = gz_cc.unwrap();
        for i in 0..cfg.z_cc_dim {
            let mut zp = z_cc.clone();
            zp[i] += h;
            let mut zm = z_cc.clone();
            zm[i] -= h;
            let fd = (eval(&fields, &z_r, &zp, sharp.log_s, false).0 - eval(&fields, &z_r, &zm, sharp.log_s, false).0) / (2.0 * h);
            assert!(tol(gz_cc[[0, i]], fd), "z_cc[{i}]: ad={} fd={fd}", gz_cc[[0, i]]);
        }
        // log_s
        let fd = (eval(&fields, &z_r, &z_cc, sharp.log_s + h, false).0 - eval(&fields, &z_r, &z_cc, sharp.log_s - h, false).0) / (2.0 * h);
        assert!(tol(gs.unwrap(), fd), "log_s: ad={} fd={fd}", gs.unwrap());

        // random probes into each net
        let mut probe = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..6 {
            let idx = probe.gen_range(0..fields.sdf.params.len());
            let orig = fields.sdf.params[idx];
            fields.sdf.params[idx] = orig + h;
            let lp = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.sdf.params[idx] = orig - h;
            let lm = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.sdf.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(tol(g_sdf[idx], fd), "eta[{idx}]: ad={} fd={fd}", g_sdf[idx]);
        }
        for _ in 0..6 {
            let idx = probe.gen_range(0..fields.radiance.params.len());
            let orig = fields.radiance.params[idx];
            fields.radiance.params[idx] = orig + h;
            let lp = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.radiance.params[idx] = orig - h;
            let lm = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.radiance.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(tol(g_rad[idx], fd), "theta[{idx}]: ad={} fd={fd}", g_rad[idx]);
        }
        for _ in 0..6 {
            let idx = probe.gen_range(0..fields.offset.params.len());
            let orig = fields.offset.params[idx];
            fields.offset.params[idx] = orig + h;
            let lp = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.offset.params[idx] = orig - h;
            let lm = eval(&fields, &z_r, &z_cc, sharp.log_s, false).0;
            fields.offset.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(tol(g_off[idx], fd), "beta[{idx}]: ad={} fd={fd}", g_off[idx]);
        }
    }
}
