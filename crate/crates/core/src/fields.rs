//! The five trainable field networks and positional encoding.
//!
//! Offset net `d`, topology net `h`, SDF net `F_s` (signed distance plus a
//! global geometry feature), radiance net `g`, and semantic net `s`. Hidden
//! activations are softplus with beta = 100 throughout: numerically a
//! rectifier, but smooth enough that every gradient check against central
//! finite differences is meaningful. The SDF net is geometrically
//! initialized so the zero level set starts as a sphere; offset and topology
//! nets start as the exact zero map.

use crate::linalg;
use crate::tape::{stable_sigmoid, stable_softplus, NodeId, Tape};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Positional encoding for one input kind.
///
/// Bands are `sin(2^k pi x), cos(2^k pi x)` for `k < frequencies`, each
/// weighted by the coarse-to-fine window
/// `w_k(alpha) = (1 - cos(pi clamp(alpha - k, 0, 1))) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub frequencies: usize,
    pub include_identity: bool,
    /// Anneal parameter in band units; `alpha >= frequencies` enables all bands.
    pub alpha: f64,
}

impl PosEncConfig {
    pub fn new(frequencies: usize, alpha: f64) -> Self {
        PosEncConfig { frequencies, include_identity: true, alpha }
    }

    pub fn band_weight(&self, k: usize) -> f64 {
        let t = (self.alpha - k as f64).clamp(0.0, 1.0);
        (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        let id = if self.include_identity { input_dim } else { 0 };
        id + 2 * input_dim * self.frequencies
    }
}

/// Plain positional encoding of a batch (rows = points).
pub fn pos_encode(x: ArrayView2<f64>, cfg: &PosEncConfig) -> Array2<f64> {
    let (n, d) = (x.nrows(), x.ncols());
    let mut out = Array2::zeros((n, cfg.output_dim(d)));
    let mut at = 0;
    if cfg.include_identity {
        out.slice_mut(s![.., 0..d]).assign(&x);
        at = d;
    }
    for k in 0..cfg.frequencies {
        let w = cfg.band_weight(k);
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        let scaled = x.mapv(|v| v * freq);
        out.slice_mut(s![.., at..at + d]).assign(&scaled.mapv(|v| v.sin() * w));
        at += d;
        out.slice_mut(s![.., at..at + d]).assign(&scaled.mapv(|v| v.cos() * w));
        at += d;
    }
    out
}

/// Taped positional encoding; mirrors [`pos_encode`] operation for operation.
pub fn pos_encode_taped(tape: &mut Tape, x: NodeId, cfg: &PosEncConfig) -> NodeId {
    let mut parts = Vec::with_capacity(1 + 2 * cfg.frequencies);
    if cfg.include_identity {
        parts.push(x);
    }
    for k in 0..cfg.frequencies {
        let w = cfg.band_weight(k);
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        let scaled = tape.scale(x, freq);
        let sn = tape.sin(scaled);
        parts.push(tape.scale(sn, w));
        let cn = tape.cos(scaled);
        parts.push(tape.scale(cn, w));
    }
    tape.concat_cols(&parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// softplus(beta x) / beta
    Softplus(f64),
    Sigmoid,
    Linear,
}

/// Layer-count/width description of one MLP. `num_layers` counts weight
/// matrices; the optional skip re-injects the network input by column
/// concatenation at the given layer index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub skip_layer: Option<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// (input, output) dimensions of each weight layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let mut inp = if i == 0 { self.input_dim } else { self.hidden_dim };
                if self.skip_layer == Some(i) && i != 0 {
                    inp += self.input_dim;
                }
                let out = if i + 1 == self.num_layers { self.output_dim } else { self.hidden_dim };
                (inp, out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One MLP: spec plus a flat little-endian-serializable parameter vector.
/// Layout: per layer, row-major `W (in x out)` followed by `b (out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

/// How to draw initial weights.
pub enum WeightInit {
    /// He-style `N(0, sqrt(2 / fan_in))`, optionally zeroing the last layer
    /// so the network starts as the exact zero map.
    Standard { zero_last: bool },
    /// Sphere initialization: before training `f(x, 0) ~ |x| - radius`.
    /// `raw_dims` counts the leading input columns holding raw coordinates;
    /// all other first-layer (and skip) columns start at zero.
    Geometric { radius: f64, raw_dims: usize },
}

impl Mlp {
    pub fn init(spec: MlpSpec, init: WeightInit, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.layer_dims();
        let mut params = Vec::with_capacity(spec.param_count());
        for (li, &(din, dout)) in dims.iter().enumerate() {
            let last = li + 1 == dims.len();
            match &init {
                WeightInit::Standard { zero_last } => {
                    let std = (2.0 / din as f64).sqrt();
                    if last && *zero_last {
                        params.extend(std::iter::repeat(0.0).take(din * dout + dout));
                    } else {
                        for _ in 0..din * dout {
                            params.push(normal(&mut rng) * std);
                        }
                        params.extend(std::iter::repeat(0.0).take(dout));
                    }
                }
                WeightInit::Geometric { radius, raw_dims } => {
                    if last {
                        // Column 0 is the signed distance output; it gets
                        // calibrated below. Feature columns stay random.
                        let mean = (std::f64::consts::PI / din as f64).sqrt();
                        let feat_std = (2.0 / din as f64).sqrt();
                        let mut w = vec![0.0; din * dout];
                        for r in 0..din {
                            for c in 0..dout {
                                w[r * dout + c] = if c == 0 {
                                    mean + 1e-4 * normal(&mut rng)
                                } else {
                                    feat_std * normal(&mut rng)
                                };
                            }
                        }
                        params.extend(w);
                        let mut b = vec![0.0; dout];
                        b[0] = -radius;
                        params.extend(b);
                    } else {
                        let std = (2.0 / dout as f64).sqrt();
                        let mut w = vec![0.0; din * dout];
                        for r in 0..din {
                            for c in 0..dout {
                                w[r * dout + c] = std * normal(&mut rng);
                            }
                        }
                        // Zero the columns that do not carry raw coordinates:
                        // encoded bands at layer 0, the whole re-injected
                        // input at the skip layer.
                        if li == 0 {
                            for r in *raw_dims..din {
                                for c in 0..dout {
                                    w[r * dout + c] = 0.0;
                                }
                            }
                        } else if spec.skip_layer == Some(li) {
                            for r in spec.hidden_dim..din {
                                for c in 0..dout {
                                    w[r * dout + c] = 0.0;
                                }
                            }
                        }
                        params.extend(w);
                        params.extend(std::iter::repeat(0.0).take(dout));
                    }
                }
            }
        }
        let mut mlp = Mlp { spec, params };
        if let WeightInit::Geometric { radius, raw_dims } = init {
            mlp.calibrate_sphere(radius, raw_dims, seed ^ 0x9e37);
        }
        mlp
    }

    /// Fit the signed-distance output (last-layer column 0 plus its bias) by
    /// ridge regression so that `f(x, 0) ~ |x| - radius` over a ball of three
    /// radii. The random trunk provides the features; the solve is exact and
    /// deterministic.
    fn calibrate_sphere(&mut self, radius: f64, raw_dims: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_fit = 2048;
        let mut input = Array2::zeros((n_fit, self.spec.input_dim));
        let mut target = Array1::zeros(n_fit);
        for i in 0..n_fit {
            let mut dir = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-9);
            dir.iter_mut().for_each(|d| *d /= norm);
            // denser sampling toward the cone tip at the origin
            let u: f64 = rng.gen_range(0.0..1.0);
            let r = 3.0 * radius * u.powf(1.5);
            for j in 0..raw_dims.min(3) {
                input[[i, j]] = dir[j] * r;
            }
            target[i] = r - radius;
        }
        let hidden = self.eval_trunk(input.view());
        let d = hidden.ncols();
        // normal equations with ones column for the bias
        let mut a = nalgebra::DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut rhs = nalgebra::DVector::<f64>::zeros(d + 1);
        for i in 0..n_fit {
            for r in 0..d {
                let hi = hidden[[i, r]];
                rhs[r] += hi * target[i];
                for c in r..d {
                    a[(r, c)] += hi * hidden[[i, c]];
                }
                a[(r, d)] += hi;
            }
            rhs[d] += target[i];
            a[(d, d)] += 1.0;
        }
        for r in 0..=d {
            for c in 0..r {
                a[(r, c)] = a[(c, r)];
            }
            a[(r, r)] += 1e-8 * n_fit as f64;
        }
        let sol = a
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .expect("sphere calibration normal equations are positive definite");

        let dims = self.spec.layer_dims();
        let mut offset = 0;
        for &(din, dout) in dims.iter().take(dims.len() - 1) {
            offset += din * dout + dout;
        }
        let (din, dout) = dims[dims.len() - 1];
        for r in 0..din {
            self.params[offset + r * dout] = sol[r];
        }
        self.params[offset + din * dout] = sol[d];
    }

    /// Activations after the last hidden layer (everything but the output
    /// weight layer).
    fn eval_trunk(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut h = input.to_owned();
        for i in 0..self.spec.num_layers - 1 {
            if self.spec.skip_layer == Some(i) && i != 0 {
                let mut cat = Array2::zeros((h.nrows(), h.ncols() + input.ncols()));
                cat.slice_mut(s![.., 0..h.ncols()]).assign(&h);
                cat.slice_mut(s![.., h.ncols()..]).assign(&input);
                h = cat;
            }
            let (w, b) = self.layer(i);
            let mut z = linalg::matmul(h.view(), w);
            z += &b;
            h = apply_activation_plain(z, self.spec.hidden_activation);
        }
        h
    }

    /// Borrow layer `i` as `(W: in x out, b: out)`.
    pub fn layer(&self, i: usize) -> (ArrayView2<f64>, ArrayView1<f64>) {
        let dims = self.spec.layer_dims();
        let mut offset = 0;
        for &(din, dout) in dims.iter().take(i) {
            offset += din * dout + dout;
        }
        let (din, dout) = dims[i];
        let w = ArrayView2::from_shape((din, dout), &self.params[offset..offset + din * dout]).unwrap();
        let b = ArrayView1::from_shape(dout, &self.params[offset + din * dout..offset + din * dout + dout]).unwrap();
        (w, b)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn apply_activation_plain(x: Array2<f64>, act: Activation) -> Array2<f64> {
    match act {
        Activation::Softplus(beta) => x.mapv(|v| stable_softplus(v, beta)),
        Activation::Sigmoid => x.mapv(stable_sigmoid),
        Activation::Linear => x,
    }
}

fn apply_activation_taped(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Softplus(beta) => tape.softplus(x, beta),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Linear => x,
    }
}

/// Forward evaluation without a tape. Operation-for-operation identical to
/// the taped path, so both produce bit-equal outputs.
pub fn mlp_eval(mlp: &Mlp, input: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(input.ncols(), mlp.spec.input_dim, "mlp input width");
    let mut h = input.to_owned();
    for i in 0..mlp.spec.num_layers {
        if mlp.spec.skip_layer == Some(i) && i != 0 {
            let mut cat = Array2::zeros((h.nrows(), h.ncols() + input.ncols()));
            cat.slice_mut(s![.., 0..h.ncols()]).assign(&h);
            cat.slice_mut(s![.., h.ncols()..]).assign(&input);
            h = cat;
        }
        let (w, b) = mlp.layer(i);
        let mut z = linalg::matmul(h.view(), w);
        z += &b;
        let act = if i + 1 == mlp.spec.num_layers {
            mlp.spec.output_activation
        } else {
            mlp.spec.hidden_activation
        };
        h = apply_activation_plain(z, act);
    }
    h
}

/// Per-layer parameter leaves of one MLP on a tape.
pub struct MlpLeaves {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl MlpLeaves {
    pub fn new(tape: &mut Tape, mlp: &Mlp, trainable: bool) -> Self {
        let layers = (0..mlp.spec.num_layers)
            .map(|i| {
                let (w, b) = mlp.layer(i);
                let wn = if trainable {
                    tape.leaf(w.to_owned())
                } else {
                    tape.constant(w.to_owned())
                };
                let brow = b.to_owned().insert_axis(ndarray::Axis(0));
                let bn = if trainable { tape.leaf(brow) } else { tape.constant(brow) };
                (wn, bn)
            })
            .collect();
        MlpLeaves { layers }
    }

    /// Assemble adjoints into the flat parameter layout (zeros where the
    /// backward pass produced none).
    pub fn flatten_grads(&self, tape: &Tape, spec: &MlpSpec, adjoints: &[Option<NodeId>]) -> Vec<f64> {
        let dims = spec.layer_dims();
        let mut out = Vec::with_capacity(spec.param_count());
        debug_assert_eq!(adjoints.len(), 2 * dims.len());
        for (i, &(din, dout)) in dims.iter().enumerate() {
            match adjoints[2 * i] {
                Some(id) => out.extend(tape.value(id).iter().cloned()),
                None => out.extend(std::iter::repeat(0.0).take(din * dout)),
            }
            match adjoints[2 * i + 1] {
                Some(id) => out.extend(tape.value(id).iter().cloned()),
                None => out.extend(std::iter::repeat(0.0).take(dout)),
            }
        }
        out
    }

    /// All leaf ids, weights and biases interleaved, for `Tape::backward`.
    pub fn all_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Taped forward pass through `spec` with parameters from `leaves`.
pub fn mlp_forward_taped(tape: &mut Tape, spec: &MlpSpec, leaves: &MlpLeaves, input: NodeId) -> NodeId {
    debug_assert_eq!(tape.shape(input).1, spec.input_dim, "mlp input width");
    let mut h = input;
    for i in 0..spec.num_layers {
        if spec.skip_layer == Some(i) && i != 0 {
            h = tape.concat_cols(&[h, input]);
        }
        let (w, b) = leaves.layers[i];
        let z = tape.matmul(h, w);
        let zb = tape.add_row(z, b);
        let act = if i + 1 == spec.num_layers { spec.output_activation } else { spec.hidden_activation };
        h = apply_activation_taped(tape, zb, act);
    }
    h
}

/// Dimensions and encoding setup shared by the five networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub z_d_dim: usize,
    pub z_cc_dim: usize,
    pub z_cg_dim: usize,
    pub semantic_classes: usize,
    /// Radius of the initial SDF zero set.
    pub sphere_init_radius: f64,
    pub point_frequencies: usize,
    pub ambient_frequencies: usize,
    pub direction_frequencies: usize,
}

impl FieldConfig {
    /// Dimensions used in the published configuration.
    pub fn paper() -> Self {
        FieldConfig {
            z_d_dim: 100,
            z_cc_dim: 64,
            z_cg_dim: 256,
            semantic_classes: 4,
            sphere_init_radius: 1.0,
            point_frequencies: 6,
            ambient_frequencies: 1,
            direction_frequencies: 4,
        }
    }

    /// Small-latent profile for desk-scale runs; network widths and depths
    /// are unchanged.
    pub fn desk() -> Self {
        FieldConfig { z_d_dim: 8, z_cc_dim: 16, z_cg_dim: 64, ..Self::paper() }
    }

    /// Anneal parameter for an encoding with `freqs` bands at training
    /// progress `p` (0 at the start, 1 once annealing completes).
    pub fn alpha(freqs: usize, p: f64) -> f64 {
        freqs as f64 * p.clamp(0.0, 1.0)
    }

    pub fn point_enc(&self, progress: f64) -> PosEncConfig {
        PosEncConfig::new(self.point_frequencies, Self::alpha(self.point_frequencies, progress))
    }

    pub fn ambient_enc(&self, progress: f64) -> PosEncConfig {
        PosEncConfig::new(self.ambient_frequencies, Self::alpha(self.ambient_frequencies, progress))
    }

    pub fn direction_enc(&self, progress: f64) -> PosEncConfig {
        PosEncConfig::new(self.direction_frequencies, Self::alpha(self.direction_frequencies, progress))
    }

    fn point_enc_dim(&self) -> usize {
        3 + 6 * self.point_frequencies
    }

    fn ambient_enc_dim(&self) -> usize {
        2 + 4 * self.ambient_frequencies
    }

    fn direction_enc_dim(&self) -> usize {
        3 + 6 * self.direction_frequencies
    }

    pub fn offset_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.point_enc_dim() + self.z_d_dim,
            hidden_dim: 128,
            output_dim: 3,
            num_layers: 7,
            skip_layer: Some(3),
            hidden_activation: Activation::Softplus(100.0),
            output_activation: Activation::Linear,
        }
    }

    pub fn topology_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.point_enc_dim() + self.z_d_dim,
            hidden_dim: 64,
            output_dim: 2,
            num_layers: 7,
            skip_layer: Some(3),
            hidden_activation: Activation::Softplus(100.0),
            output_activation: Activation::Linear,
        }
    }

    pub fn sdf_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.point_enc_dim() + self.ambient_enc_dim(),
            hidden_dim: 512,
            output_dim: 1 + self.z_cg_dim,
            num_layers: 8,
            skip_layer: Some(4),
            hidden_activation: Activation::Softplus(100.0),
            output_activation: Activation::Linear,
        }
    }

    pub fn radiance_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.point_enc_dim() + 3 + self.direction_enc_dim() + self.z_cg_dim + self.z_cc_dim,
            hidden_dim: 512,
            output_dim: 3,
            num_layers: 4,
            skip_layer: None,
            hidden_activation: Activation::Softplus(100.0),
            output_activation: Activation::Sigmoid,
        }
    }

    pub fn semantic_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.point_enc_dim() + self.z_cg_dim,
            hidden_dim: 512,
            output_dim: self.semantic_classes,
            num_layers: 4,
            skip_layer: None,
            hidden_activation: Activation::Softplus(100.0),
            output_activation: Activation::Linear,
        }
    }
}

/// The five trainable parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub offset: Mlp,
    pub topology: Mlp,
    pub sdf: Mlp,
    pub radiance: Mlp,
    pub semantic: Mlp,
}

impl FieldParams {
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        FieldParams {
            config,
            offset: Mlp::init(config.offset_spec(), WeightInit::Standard { zero_last: true }, seed ^ 0x0f5e),
            topology: Mlp::init(config.topology_spec(), WeightInit::Standard { zero_last: true }, seed ^ 0x701f),
            sdf: Mlp::init(
                config.sdf_spec(),
                WeightInit::Geometric { radius: config.sphere_init_radius, raw_dims: 3 },
                seed ^ 0x5df0,
            ),
            radiance: Mlp::init(config.radiance_spec(), WeightInit::Standard { zero_last: false }, seed ^ 0x4ad1),
            semantic: Mlp::init(config.semantic_spec(), WeightInit::Standard { zero_last: false }, seed ^ 0x5e3a),
        }
    }
}

/// Everything the renderer needs to know about one canonical-space query.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    pub sdf: f64,
    pub geometry_feature: Vec<f64>,
    pub normal: [f64; 3],
    pub color: [f64; 3],
    pub semantic_logits: Vec<f64>,
}

fn broadcast_code(n: usize, code: ArrayView1<f64>) -> Array2<f64> {
    let d = code.len();
    Array2::from_shape_fn((n, d), |(_, j)| code[j])
}

/// Point-wise offset `d(x_r, z_d | beta)` for a batch of points.
pub fn offset_net(fields: &FieldParams, x_r: ArrayView2<f64>, z_d: ArrayView1<f64>, progress: f64) -> Array2<f64> {
    assert_eq!(z_d.len(), fields.config.z_d_dim, "z_d length");
    let enc = pos_encode(x_r, &fields.config.point_enc(progress));
    let code = broadcast_code(x_r.nrows(), z_d);
    let input = ndarray::concatenate(ndarray::Axis(1), &[enc.view(), code.view()]).unwrap();
    mlp_eval(&fields.offset, input.view())
}

/// Ambient coordinate `h(x_r, z_d | gamma)`.
pub fn topology_net(fields: &FieldParams, x_r: ArrayView2<f64>, z_d: ArrayView1<f64>, progress: f64) -> Array2<f64> {
    assert_eq!(z_d.len(), fields.config.z_d_dim, "z_d length");
    let enc = pos_encode(x_r, &fields.config.point_enc(progress));
    let code = broadcast_code(x_r.nrows(), z_d);
    let input = ndarray::concatenate(ndarray::Axis(1), &[enc.view(), code.view()]).unwrap();
    mlp_eval(&fields.topology, input.view())
}

/// Signed distance and geometry feature `(d_s, z_cg)` of canonical points.
pub fn sdf_net(
    fields: &FieldParams,
    x_c: ArrayView2<f64>,
    w_h: ArrayView2<f64>,
    progress: f64,
) -> (Array1<f64>, Array2<f64>) {
    let enc_x = pos_encode(x_c, &fields.config.point_enc(progress));
    let enc_w = pos_encode(w_h, &fields.config.ambient_enc(progress));
    let input = ndarray::concatenate(ndarray::Axis(1), &[enc_x.view(), enc_w.view()]).unwrap();
    let out = mlp_eval(&fields.sdf, input.view());
    let d_s = out.column(0).to_owned();
    let z_cg = out.slice(s![.., 1..]).to_owned();
    (d_s, z_cg)
}

/// Rendered color `g(x_c, n_c, v_c, z_cg, z_cc | theta)` in [0,1]^3.
pub fn radiance_net(
    fields: &FieldParams,
    x_c: ArrayView2<f64>,
    n_c: ArrayView2<f64>,
    v_c: ArrayView2<f64>,
    z_cg: ArrayView2<f64>,
    z_cc: ArrayView1<f64>,
    progress: f64,
) -> Array2<f64> {
    assert_eq!(z_cc.len(), fields.config.z_cc_dim, "z_cc length");
    let enc_x = pos_encode(x_c, &fields.config.point_enc(progress));
    let enc_v = pos_encode(v_c, &fields.config.direction_enc(progress));
    let code = broadcast_code(x_c.nrows(), z_cc);
    let input = ndarray::concatenate(
        ndarray::Axis(1),
        &[enc_x.view(), n_c.view(), enc_v.view(), z_cg.view(), code.view()],
    )
    .unwrap();
    mlp_eval(&fields.radiance, input.view())
}

/// Semantic logits `s(x_c, z_cg | zeta)`.
pub fn semantic_net(fields: &FieldParams, x_c: ArrayView2<f64>, z_cg: ArrayView2<f64>, progress: f64) -> Array2<f64> {
    let enc_x = pos_encode(x_c, &fields.config.point_enc(progress));
    let input = ndarray::concatenate(ndarray::Axis(1), &[enc_x.view(), z_cg.view()]).unwrap();
    mlp_eval(&fields.semantic, input.view())
}

/// Exact reverse-mode gradient of the signed distance w.r.t. `x_c`
/// (ambient coordinate held fixed).
pub fn sdf_gradient(
    fields: &FieldParams,
    x_c: ArrayView2<f64>,
    w_h: ArrayView2<f64>,
    progress: f64,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_c.to_owned());
    let w = tape.constant(w_h.to_owned());
    let leaves = MlpLeaves::new(&mut tape, &fields.sdf, false);
    let enc_x = pos_encode_taped(&mut tape, x, &fields.config.point_enc(progress));
    let enc_w = pos_encode_taped(&mut tape, w, &fields.config.ambient_enc(progress));
    let input = tape.concat_cols(&[enc_x, enc_w]);
    let out = mlp_forward_taped(&mut tape, &fields.sdf.spec, &leaves, input);
    let d_s = tape.slice_cols(out, 0..1);
    let grads = tape.backward(d_s, &[x]);
    tape.value(grads[0].expect("sdf depends on x")).clone()
}
