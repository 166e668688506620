//! Reverse-mode automatic differentiation on a flat tape of 2-D arrays.
//!
//! Every value is an `Array2<f64>` (rows = batch items, columns = features;
//! scalars are 1x1). Operations evaluate eagerly and record themselves.
//! [`Tape::backward`] emits the adjoint computation as *new tape nodes*, so a
//! gradient is itself differentiable: surface normals and Eikonal terms are
//! inner gradients that later receive gradients of their own.
//!
//! Determinism: evaluation order is the construction order, reductions are
//! sequential, and matrix products use the fixed-block kernels in
//! [`crate::linalg`].

use crate::linalg;
use ndarray::{s, Array2, Axis};
use std::ops::Range;
use std::sync::Arc;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    /// a * b
    Matmul(NodeId, NodeId),
    /// a^T * b
    MatmulTn(NodeId, NodeId),
    /// a * b^T
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// b is 1 x m, broadcast over rows of a
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    /// c is n x 1, broadcast over columns of a
    MulCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    /// s is 1 x 1
    MulScalarNode(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    /// log(sigmoid(x)), numerically stable
    LogSigmoid(NodeId),
    /// softplus(beta * x) / beta
    Softplus(NodeId, f64),
    Abs(NodeId),
    Relu(NodeId),
    ClampMin(NodeId, f64),
    ClampMax(NodeId, f64),
    /// elementwise multiply by a constant array (masks, signs)
    MulConst(NodeId, Arc<Array2<f64>>),
    SumAll(NodeId),
    /// n x m -> 1 x m
    SumRows(NodeId),
    /// n x m -> n x 1
    SumCols(NodeId),
    /// 1 x m -> n x m
    BroadcastRow(NodeId, usize),
    /// n x 1 -> n x m
    BroadcastCol(NodeId, usize),
    /// 1 x 1 -> n x m
    BroadcastScalar(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, Range<usize>),
    /// place g into a zero array of `total` columns at `start`
    PadCols(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// scatter-add rows of g into `rows` output rows
    ScatterAddRows(NodeId, Arc<Vec<usize>>, usize),
    /// R x m -> (R*S) x m, each row repeated S times consecutively
    RepeatRowsEach(NodeId, usize),
    /// (R*S) x m -> R x m, sum over consecutive blocks of S rows
    SegmentSum(NodeId, usize),
    /// exclusive prefix sum within consecutive blocks of S rows
    SegCumsumExcl(NodeId, usize),
    /// exclusive suffix sum within consecutive blocks of S rows
    SegCumsumRevExcl(NodeId, usize),
    /// row-major reshape (same element order)
    Reshape(NodeId, usize, usize),
    /// accumulate per-face cross products onto vertices (unnormalized
    /// area-weighted normals); first-order differentiable only
    FaceCrossAccum(NodeId, Arc<Vec<[usize; 3]>>),
    FaceCrossAccumVjp(NodeId, NodeId, Arc<Vec<[usize; 3]>>),
    /// value copy that blocks gradient flow
    Detach(NodeId),
    /// bilinear image sample at continuous pixel coords q (n x 2) -> n x C
    BilinearSample(Arc<ImageGrid>, NodeId),
    /// VJP of the above w.r.t. q; not differentiable further
    BilinearSampleVjp(Arc<ImageGrid>, NodeId, NodeId),
}

/// Dense image seen by [`Tape::bilinear_sample`]: row-major `H x W x C`
/// with pixel centers at integer + 0.5 coordinates, clamped at the border.
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear lookup plus the in-cell spatial derivative for channel `c`.
    fn sample_and_grad(&self, qx: f64, qy: f64, c: usize) -> (f64, f64, f64) {
        let u = qx - 0.5;
        let v = qy - 0.5;
        let x0f = u.floor();
        let y0f = v.floor();
        let fx = u - x0f;
        let fy = v - y0f;
        let clamp = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
        let x0 = clamp(x0f, self.width);
        let x1 = clamp(x0f + 1.0, self.width);
        let y0 = clamp(y0f, self.height);
        let y1 = clamp(y0f + 1.0, self.height);
        let p00 = self.at(y0, x0, c);
        let p01 = self.at(y0, x1, c);
        let p10 = self.at(y1, x0, c);
        let p11 = self.at(y1, x1, c);
        let top = p00 + fx * (p01 - p00);
        let bot = p10 + fx * (p11 - p10);
        let value = top + fy * (bot - top);
        let ddx = (p01 - p00) + fy * ((p11 - p10) - (p01 - p00));
        let ddy = bot - top;
        (value, ddx, ddy)
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

/// Gradient tape. Create one per computation, build the graph through the
/// constructor methods, call [`Tape::backward`], then read values out.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.nrows(), v.ncols())
    }

    /// Scalar convenience for 1x1 nodes.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, grad });
        self.nodes.len() - 1
    }

    fn g(&self, id: NodeId) -> bool {
        self.nodes[id].grad
    }

    // ---- leaves ----

    /// Constant input: gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    // ---- arithmetic ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul(self.nodes[a].value.view(), self.nodes[b].value.view());
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul_tn(self.nodes[a].value.view(), self.nodes[b].value.view());
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatmulTn(a, b), g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul_nt(self.nodes[a].value.view(), self.nodes[b].value.view());
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatmulNt(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Div(a, b), g)
    }

    /// `a + row` where `row` is 1 x m.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let r = self.nodes[row].value.row(0).to_owned();
        let v = &self.nodes[a].value + &r;
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let r = self.nodes[row].value.row(0).to_owned();
        let v = &self.nodes[a].value * &r;
        let g = self.g(a) || self.g(row);
        self.push(v, Op::MulRow(a, row), g)
    }

    /// `a * col` where `col` is n x 1, broadcast across columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(col).1, 1);
        let c = &self.nodes[col].value;
        let v = &self.nodes[a].value * c;
        let g = self.g(a) || self.g(col);
        self.push(v, Op::MulCol(a, col), g)
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(col).1, 1);
        let c = &self.nodes[col].value;
        let v = &self.nodes[a].value / c;
        let g = self.g(a) || self.g(col);
        self.push(v, Op::DivCol(a, col), g)
    }

    /// `a * s` where `s` is 1 x 1.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(s), (1, 1));
        let sv = self.nodes[s].value[[0, 0]];
        let v = &self.nodes[a].value * sv;
        let g = self.g(a) || self.g(s);
        self.push(v, Op::MulScalarNode(a, s), g)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        let g = self.g(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = &self.nodes[a].value * k;
        let g = self.g(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = &self.nodes[a].value + k;
        let g = self.g(a);
        self.push(v, Op::AddConst(a, k), g)
    }

    // ---- elementwise nonlinearities ----

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sin);
        let g = self.g(a);
        self.push(v, Op::Sin(a), g)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::cos);
        let g = self.g(a);
        self.push(v, Op::Cos(a), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let g = self.g(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        let g = self.g(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        let g = self.g(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(stable_sigmoid);
        let g = self.g(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(stable_log_sigmoid);
        let g = self.g(a);
        self.push(v, Op::LogSigmoid(a), g)
    }

    /// `softplus(beta x) / beta`, the smooth rectifier used by the field MLPs.
    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| stable_softplus(x, beta));
        let g = self.g(a);
        self.push(v, Op::Softplus(a, beta), g)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        let g = self.g(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let g = self.g(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn clamp_min(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(k));
        let g = self.g(a);
        self.push(v, Op::ClampMin(a, k), g)
    }

    pub fn clamp_max(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.min(k));
        let g = self.g(a);
        self.push(v, Op::ClampMax(a, k), g)
    }

    pub fn mul_const(&mut self, a: NodeId, k: Arc<Array2<f64>>) -> NodeId {
        let v = &self.nodes[a].value * &*k;
        let g = self.g(a);
        self.push(v, Op::MulConst(a, k), g)
    }

    // ---- reductions and shape ops ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let g = self.g(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .nodes[a]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        let g = self.g(a);
        self.push(v, Op::SumRows(a), g)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self
            .nodes[a]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let g = self.g(a);
        self.push(v, Op::SumCols(a), g)
    }

    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> NodeId {
        debug_assert_eq!(self.shape(a).0, 1);
        let m = self.shape(a).1;
        let row = self.nodes[a].value.row(0).to_owned();
        let v = Array2::from_shape_fn((n, m), |(_, j)| row[j]);
        let g = self.g(a);
        self.push(v, Op::BroadcastRow(a, n), g)
    }

    pub fn broadcast_col(&mut self, a: NodeId, m: usize) -> NodeId {
        debug_assert_eq!(self.shape(a).1, 1);
        let n = self.shape(a).0;
        let col = self.nodes[a].value.column(0).to_owned();
        let v = Array2::from_shape_fn((n, m), |(i, _)| col[i]);
        let g = self.g(a);
        self.push(v, Op::BroadcastCol(a, m), g)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, n: usize, m: usize) -> NodeId {
        debug_assert_eq!(self.shape(a), (1, 1));
        let v = Array2::from_elem((n, m), self.nodes[a].value[[0, 0]]);
        let g = self.g(a);
        self.push(v, Op::BroadcastScalar(a, n, m), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let w = self.shape(p).1;
            debug_assert_eq!(self.shape(p).0, n);
            v.slice_mut(s![.., at..at + w]).assign(&self.nodes[p].value);
            at += w;
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, range: Range<usize>) -> NodeId {
        let v = self.nodes[a].value.slice(s![.., range.clone()]).to_owned();
        let g = self.g(a);
        self.push(v, Op::SliceCols(a, range), g)
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> NodeId {
        let n = self.shape(a).0;
        let w = self.shape(a).1;
        let mut v = Array2::zeros((n, total));
        v.slice_mut(s![.., start..start + w]).assign(&self.nodes[a].value);
        let g = self.g(a);
        self.push(v, Op::PadCols(a, start, total), g)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let m = self.shape(a).1;
        let mut v = Array2::zeros((idx.len(), m));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&self.nodes[a].value.row(r));
        }
        let g = self.g(a);
        self.push(v, Op::GatherRows(a, idx), g)
    }

    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>, rows: usize) -> NodeId {
        let m = self.shape(a).1;
        debug_assert_eq!(self.shape(a).0, idx.len());
        let mut v = Array2::zeros((rows, m));
        for (i, &r) in idx.iter().enumerate() {
            let src = self.nodes[a].value.row(i).to_owned();
            let mut dst = v.row_mut(r);
            dst += &src;
        }
        let g = self.g(a);
        self.push(v, Op::ScatterAddRows(a, idx, rows), g)
    }

    pub fn repeat_rows_each(&mut self, a: NodeId, times: usize) -> NodeId {
        let (n, m) = self.shape(a);
        let mut v = Array2::zeros((n * times, m));
        for i in 0..n {
            let src = self.nodes[a].value.row(i).to_owned();
            for k in 0..times {
                v.row_mut(i * times + k).assign(&src);
            }
        }
        let g = self.g(a);
        self.push(v, Op::RepeatRowsEach(a, times), g)
    }

    pub fn segment_sum(&mut self, a: NodeId, seg: usize) -> NodeId {
        let (n, m) = self.shape(a);
        debug_assert_eq!(n % seg, 0);
        let r = n / seg;
        let mut v = Array2::zeros((r, m));
        for i in 0..n {
            let src = self.nodes[a].value.row(i).to_owned();
            let mut dst = v.row_mut(i / seg);
            dst += &src;
        }
        let g = self.g(a);
        self.push(v, Op::SegmentSum(a, seg), g)
    }

    pub fn seg_cumsum_excl(&mut self, a: NodeId, seg: usize) -> NodeId {
        let (n, m) = self.shape(a);
        debug_assert_eq!(n % seg, 0);
        let src = &self.nodes[a].value;
        let mut v = Array2::zeros((n, m));
        for b in 0..n / seg {
            let base = b * seg;
            let mut acc = vec![0.0; m];
            for i in 0..seg {
                for j in 0..m {
                    v[[base + i, j]] = acc[j];
                    acc[j] += src[[base + i, j]];
                }
            }
        }
        let g = self.g(a);
        self.push(v, Op::SegCumsumExcl(a, seg), g)
    }

    pub fn seg_cumsum_rev_excl(&mut self, a: NodeId, seg: usize) -> NodeId {
        let (n, m) = self.shape(a);
        debug_assert_eq!(n % seg, 0);
        let src = &self.nodes[a].value;
        let mut v = Array2::zeros((n, m));
        for b in 0..n / seg {
            let base = b * seg;
            let mut acc = vec![0.0; m];
            for i in (0..seg).rev() {
                for j in 0..m {
                    v[[base + i, j]] = acc[j];
                    acc[j] += src[[base + i, j]];
                }
            }
        }
        let g = self.g(a);
        self.push(v, Op::SegCumsumRevExcl(a, seg), g)
    }

    /// Row-major reshape preserving element order.
    pub fn reshape(&mut self, a: NodeId, n: usize, m: usize) -> NodeId {
        let (an, am) = self.shape(a);
        assert_eq!(an * am, n * m, "reshape must preserve element count");
        let flat: Vec<f64> = self.nodes[a].value.iter().cloned().collect();
        let v = Array2::from_shape_vec((n, m), flat).unwrap();
        let g = self.g(a);
        self.push(v, Op::Reshape(a, n, m), g)
    }

    /// Sum of face cross products `(v1-v0) x (v2-v0)` accumulated onto the
    /// three vertices of each face: the unnormalized area-weighted vertex
    /// normal field. First-order differentiable.
    pub fn face_cross_accum(&mut self, vertices: NodeId, faces: Arc<Vec<[usize; 3]>>) -> NodeId {
        debug_assert_eq!(self.shape(vertices).1, 3);
        let n_v = self.shape(vertices).0;
        let src = &self.nodes[vertices].value;
        let mut acc = Array2::zeros((n_v, 3));
        for f in faces.iter() {
            let [i0, i1, i2] = *f;
            let v0 = [src[[i0, 0]], src[[i0, 1]], src[[i0, 2]]];
            let v1 = [src[[i1, 0]], src[[i1, 1]], src[[i1, 2]]];
            let v2 = [src[[i2, 0]], src[[i2, 1]], src[[i2, 2]]];
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
        let g = self.g(vertices);
        self.push(acc, Op::FaceCrossAccum(vertices, faces), g)
    }

    fn face_cross_accum_vjp(&mut self, vertices: NodeId, gout: NodeId, faces: Arc<Vec<[usize; 3]>>) -> NodeId {
        let n_v = self.shape(vertices).0;
        let v_arr = self.nodes[vertices].value.clone();
        let g_arr = self.nodes[gout].value.clone();
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
        };
        let mut gv = Array2::zeros((n_v, 3));
        for f in faces.iter() {
            let [i0, i1, i2] = *f;
            let v0 = [v_arr[[i0, 0]], v_arr[[i0, 1]], v_arr[[i0, 2]]];
            let v1 = [v_arr[[i1, 0]], v_arr[[i1, 1]], v_arr[[i1, 2]]];
            let v2 = [v_arr[[i2, 0]], v_arr[[i2, 1]], v_arr[[i2, 2]]];
            let e1 = [v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]];
            let e2 = [v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]];
            // adjoint of this face's cross product: sum of the three
            // receiving vertices' adjoints
            let gf = [
                g_arr[[i0, 0]] + g_arr[[i1, 0]] + g_arr[[i2, 0]],
                g_arr[[i0, 1]] + g_arr[[i1, 1]] + g_arr[[i2, 1]],
                g_arr[[i0, 2]] + g_arr[[i1, 2]] + g_arr[[i2, 2]],
            ];
            let ge1 = cross(e2, gf);
            let ge2 = cross(gf, e1);
            for k in 0..3 {
                gv[[i1, k]] += ge1[k];
                gv[[i2, k]] += ge2[k];
                gv[[i0, k]] -= ge1[k] + ge2[k];
            }
        }
        self.push(gv, Op::FaceCrossAccumVjp(vertices, gout, faces), true)
    }

    /// Copy that stops gradients.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::Detach(a), false)
    }

    pub fn bilinear_sample(&mut self, img: Arc<ImageGrid>, q: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(q).1, 2);
        let n = self.shape(q).0;
        let mut v = Array2::zeros((n, img.channels));
        for i in 0..n {
            let qx = self.nodes[q].value[[i, 0]];
            let qy = self.nodes[q].value[[i, 1]];
            for c in 0..img.channels {
                v[[i, c]] = img.sample_and_grad(qx, qy, c).0;
            }
        }
        let g = self.g(q);
        self.push(v, Op::BilinearSample(img, q), g)
    }

    fn bilinear_sample_vjp(&mut self, img: Arc<ImageGrid>, q: NodeId, gout: NodeId) -> NodeId {
        let n = self.shape(q).0;
        let mut v = Array2::zeros((n, 2));
        for i in 0..n {
            let qx = self.nodes[q].value[[i, 0]];
            let qy = self.nodes[q].value[[i, 1]];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for c in 0..img.channels {
                let (_, ddx, ddy) = img.sample_and_grad(qx, qy, c);
                let g = self.nodes[gout].value[[i, c]];
                gx += g * ddx;
                gy += g * ddy;
            }
            v[[i, 0]] = gx;
            v[[i, 1]] = gy;
        }
        self.push(v, Op::BilinearSampleVjp(img, q, gout), true)
    }

    // ---- composites ----

    /// Row-wise Euclidean norm: n x m -> n x 1.
    pub fn norm_rows(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        let ssum = self.sum_cols(sq);
        self.sqrt(ssum)
    }

    /// Row-wise softmax with a detached max shift (shift-invariant, exact).
    pub fn softmax_rows(&mut self, logits: NodeId) -> NodeId {
        let (_, m) = self.shape(logits);
        let maxes = self
            .nodes[logits]
            .value
            .map_axis(Axis(1), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .insert_axis(Axis(1));
        let shift = self.constant(maxes);
        let shift_b = self.broadcast_col(shift, m);
        let centered = self.sub(logits, shift_b);
        let e = self.exp(centered);
        let denom = self.sum_cols(e);
        self.div_col(e, denom)
    }

    /// Gradient of `sum(output)` with respect to each node in `wrt`.
    ///
    /// The adjoints are emitted as new tape nodes, so they can participate in
    /// further taped computation (higher-order derivatives). Entries whose
    /// node is not reached (or not differentiable) come back as `None`,
    /// meaning a zero gradient.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        let mut adj: Vec<Option<NodeId>> = vec![None; output + 1];
        let (n, m) = self.shape(output);
        let seed = self.constant(Array2::ones((n, m)));
        adj[output] = Some(seed);

        for i in (0..=output).rev() {
            let g = match adj[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.push_vjps(i, g, op, &mut adj);
        }

        wrt.iter()
            .map(|&w| if w <= output { adj[w] } else { None })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contribution: NodeId) {
        if !self.nodes[target].grad {
            return;
        }
        adj[target] = Some(match adj[target] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }

    fn push_vjps(&mut self, node: NodeId, g: NodeId, op: Op, adj: &mut [Option<NodeId>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.g(a) {
                    let ga = self.matmul_nt(g, b);
                    self.accumulate(adj, a, ga);
                }
                if self.g(b) {
                    let gb = self.matmul_tn(a, g);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::MatmulTn(a, b) => {
                // out = a^T b, a: k x n, b: k x m, out: n x m
                if self.g(a) {
                    let ga = self.matmul_nt(b, g);
                    self.accumulate(adj, a, ga);
                }
                if self.g(b) {
                    let gb = self.matmul(a, g);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::MatmulNt(a, b) => {
                // out = a b^T, a: n x k, b: m x k, out: n x m
                if self.g(a) {
                    let ga = self.matmul(g, b);
                    self.accumulate(adj, a, ga);
                }
                if self.g(b) {
                    let gb = self.matmul_tn(g, a);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, g);
                self.accumulate(adj, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g);
                if self.g(b) {
                    let gb = self.neg(g);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.g(a) {
                    let ga = self.mul(g, b);
                    self.accumulate(adj, a, ga);
                }
                if self.g(b) {
                    let gb = self.mul(g, a);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Div(a, b) => {
                if self.g(a) {
                    let ga = self.div(g, b);
                    self.accumulate(adj, a, ga);
                }
                if self.g(b) {
                    let q = self.div(node, b);
                    let gq = self.mul(g, q);
                    let gb = self.neg(gq);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(adj, a, g);
                if self.g(r) {
                    let gr = self.sum_rows(g);
                    self.accumulate(adj, r, gr);
                }
            }
            Op::MulRow(a, r) => {
                if self.g(a) {
                    let ga = self.mul_row(g, r);
                    self.accumulate(adj, a, ga);
                }
                if self.g(r) {
                    let p = self.mul(g, a);
                    let gr = self.sum_rows(p);
                    self.accumulate(adj, r, gr);
                }
            }
            Op::MulCol(a, c) => {
                if self.g(a) {
                    let ga = self.mul_col(g, c);
                    self.accumulate(adj, a, ga);
                }
                if self.g(c) {
                    let p = self.mul(g, a);
                    let gc = self.sum_cols(p);
                    self.accumulate(adj, c, gc);
                }
            }
            Op::DivCol(a, c) => {
                if self.g(a) {
                    let ga = self.div_col(g, c);
                    self.accumulate(adj, a, ga);
                }
                if self.g(c) {
                    let q = self.div_col(node, c);
                    let p = self.mul(g, q);
                    let sc = self.sum_cols(p);
                    let gc = self.neg(sc);
                    self.accumulate(adj, c, gc);
                }
            }
            Op::MulScalarNode(a, sn) => {
                if self.g(a) {
                    let ga = self.mul_scalar_node(g, sn);
                    self.accumulate(adj, a, ga);
                }
                if self.g(sn) {
                    let p = self.mul(g, a);
                    let gs = self.sum_all(p);
                    self.accumulate(adj, sn, gs);
                }
            }
            Op::Neg(a) => {
                if self.g(a) {
                    let ga = self.neg(g);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Scale(a, k) => {
                if self.g(a) {
                    let ga = self.scale(g, k);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::AddConst(a, _) => {
                self.accumulate(adj, a, g);
            }
            Op::Sin(a) => {
                if self.g(a) {
                    let c = self.cos(a);
                    let ga = self.mul(g, c);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Cos(a) => {
                if self.g(a) {
                    let sn = self.sin(a);
                    let nsn = self.neg(sn);
                    let ga = self.mul(g, nsn);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Exp(a) => {
                if self.g(a) {
                    let ga = self.mul(g, node);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Ln(a) => {
                if self.g(a) {
                    let ga = self.div(g, a);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Sqrt(a) => {
                if self.g(a) {
                    let two = self.scale(node, 2.0);
                    let ga = self.div(g, two);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.g(a) {
                    let one_minus = self.add_const(node, -1.0);
                    let nm = self.neg(one_minus);
                    let d = self.mul(node, nm);
                    let ga = self.mul(g, d);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::LogSigmoid(a) => {
                if self.g(a) {
                    // d/dx log sigmoid(x) = 1 - sigmoid(x)
                    let sg = self.sigmoid(a);
                    let neg_sg = self.neg(sg);
                    let d = self.add_const(neg_sg, 1.0);
                    let ga = self.mul(g, d);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Softplus(a, beta) => {
                if self.g(a) {
                    let scaled = self.scale(a, beta);
                    let d = self.sigmoid(scaled);
                    let ga = self.mul(g, d);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Abs(a) => {
                if self.g(a) {
                    let sign = Arc::new(self.nodes[a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }));
                    let ga = self.mul_const(g, sign);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Relu(a) => {
                if self.g(a) {
                    let mask = Arc::new(self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                    let ga = self.mul_const(g, mask);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::ClampMin(a, k) => {
                if self.g(a) {
                    let mask = Arc::new(self.nodes[a].value.mapv(|x| if x > k { 1.0 } else { 0.0 }));
                    let ga = self.mul_const(g, mask);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::ClampMax(a, k) => {
                if self.g(a) {
                    let mask = Arc::new(self.nodes[a].value.mapv(|x| if x < k { 1.0 } else { 0.0 }));
                    let ga = self.mul_const(g, mask);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::MulConst(a, k) => {
                if self.g(a) {
                    let ga = self.mul_const(g, k);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SumAll(a) => {
                if self.g(a) {
                    let (n, m) = self.shape(a);
                    let ga = self.broadcast_scalar(g, n, m);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SumRows(a) => {
                if self.g(a) {
                    let n = self.shape(a).0;
                    let ga = self.broadcast_row(g, n);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SumCols(a) => {
                if self.g(a) {
                    let m = self.shape(a).1;
                    let ga = self.broadcast_col(g, m);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::BroadcastRow(a, _) => {
                if self.g(a) {
                    let ga = self.sum_rows(g);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::BroadcastCol(a, _) => {
                if self.g(a) {
                    let ga = self.sum_cols(g);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::BroadcastScalar(a, _, _) => {
                if self.g(a) {
                    let ga = self.sum_all(g);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    if self.g(p) {
                        let gp = self.slice_cols(g, at..at + w);
                        self.accumulate(adj, p, gp);
                    }
                    at += w;
                }
            }
            Op::SliceCols(a, range) => {
                if self.g(a) {
                    let total = self.shape(a).1;
                    let ga = self.pad_cols(g, range.start, total);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::PadCols(a, start, _) => {
                if self.g(a) {
                    let w = self.shape(a).1;
                    let ga = self.slice_cols(g, start..start + w);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.g(a) {
                    let rows = self.shape(a).0;
                    let ga = self.scatter_add_rows(g, idx, rows);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::ScatterAddRows(a, idx, _) => {
                if self.g(a) {
                    let ga = self.gather_rows(g, idx);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::RepeatRowsEach(a, times) => {
                if self.g(a) {
                    let ga = self.segment_sum(g, times);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SegmentSum(a, seg) => {
                if self.g(a) {
                    let ga = self.repeat_rows_each(g, seg);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SegCumsumExcl(a, seg) => {
                if self.g(a) {
                    let ga = self.seg_cumsum_rev_excl(g, seg);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::SegCumsumRevExcl(a, seg) => {
                if self.g(a) {
                    let ga = self.seg_cumsum_excl(g, seg);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::Reshape(a, _, _) => {
                if self.g(a) {
                    let (an, am) = self.shape(a);
                    let ga = self.reshape(g, an, am);
                    self.accumulate(adj, a, ga);
                }
            }
            Op::FaceCrossAccum(vertices, faces) => {
                if self.g(vertices) {
                    let gv = self.face_cross_accum_vjp(vertices, g, faces);
                    self.accumulate(adj, vertices, gv);
                }
            }
            Op::FaceCrossAccumVjp(..) => {
                panic!("second-order differentiation through vertex normals is unsupported");
            }
            Op::Detach(_) => {}
            Op::BilinearSample(img, q) => {
                if self.g(q) {
                    let gq = self.bilinear_sample_vjp(img, q, g);
                    self.accumulate(adj, q, gq);
                }
            }
            Op::BilinearSampleVjp(..) => {
                panic!("second-order differentiation through bilinear sampling is unsupported");
            }
        }
    }
}

/// Sigmoid without overflow on large negative inputs.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without catastrophic cancellation.
pub fn stable_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `softplus(beta x) / beta` without overflow.
pub fn stable_softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 0.0 {
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}
