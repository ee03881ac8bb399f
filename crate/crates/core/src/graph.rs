//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node whose inputs precede it, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep. There
//! is no implicit broadcasting: bias addition and column repetition are their
//! own primitives.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, DeformDims, RoiAlignSpec};
use crate::tensor::{axis_split, Result, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const INVERSE_SIGMOID_EPS: Scalar = 1e-5;
pub(crate) const LAYER_NORM_EPS: Scalar = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    InverseSigmoid(Var),
    Log(Var),
    Abs(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Box<[Scalar]>,
        rstd: Box<[Scalar]>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    RepeatCols(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ShiftRows {
        x: Var,
        offset: isize,
    },
    InterpSample {
        x: Var,
        coords: Var,
    },
    DeformSample {
        value: Var,
        coords: Var,
        weights: Var,
        heads: usize,
    },
    RoiAlign {
        x: Var,
        segments: Var,
        spec: RoiAlignSpec,
    },
    SegmentIou(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and computes gradients for leaves marked trainable.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: alloc::string::String) -> TensorError {
    TensorError::InvalidArgument { op, reason }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        })
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() == rank {
        Ok(())
    } else {
        Err(invalid(op, format!("expected rank {rank}, got shape {shape:?}")))
    }
}

#[inline]
pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Log-odds with the input clamped to `[1e-5, 1 - 1e-5]`.
#[inline]
pub fn inverse_sigmoid(x: Scalar) -> Scalar {
    let c = x.clamp(INVERSE_SIGMOID_EPS, 1.0 - INVERSE_SIGMOID_EPS);
    libm::log(c / (1.0 - c))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[Scalar] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<Scalar> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(Scalar) -> Scalar, op: Op) -> Var {
        let t = self.value(x);
        let out: Vec<Scalar> = t.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(t.shape(), out).expect("same numel");
        let rg = self.any_grad(&[x]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: Scalar) -> Var {
        self.map_op(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: Scalar) -> Var {
        self.map_op(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn inverse_sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, inverse_sigmoid, Op::InverseSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_op(x, libm::log, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_op(x, libm::fabs, Op::Abs(x))
    }

    /// `x[m, n] + bias[n]` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.data(bias).to_vec();
        let out: Vec<Scalar> = self.data(x).iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let t = Tensor::new(sx, out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let shape = self.shape(x);
        check_axis(if log { "log_softmax" } else { "softmax" }, shape, axis)?;
        let (outer, n, inner) = axis_split(shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(Scalar::NEG_INFINITY, Scalar::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = libm::exp(src[at(j)] - max);
                    out[at(j)] = e;
                    sum += e;
                }
                if log {
                    let lse = max + libm::log(sum);
                    for j in 0..n {
                        out[at(j)] = src[at(j)] - lse;
                    }
                } else {
                    for j in 0..n {
                        out[at(j)] /= sum;
                    }
                }
            }
        }
        Tensor::new(shape, out)
    }

    /// Softmax along `axis`; every slice along the axis sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_impl(x, axis, false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_impl(x, axis, true)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes each row of `x[m, n]`, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(invalid("layer_norm", format!("expected a matrix, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(mismatch("layer_norm", sx, self.shape(p)));
            }
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Scalar>() / n as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / n as Scalar;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: xhat.into_boxed_slice(),
                rstd: rstd.into_boxed_slice(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat", "no inputs".into()))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// The sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(&new_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        expect_rank("transpose", s, 2)?;
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as Scalar;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Repeats each of the `m` entries of `x` across `n` columns, giving `[m, n]`.
    pub fn repeat_cols(&mut self, x: Var, n: usize) -> Var {
        let src = self.data(x);
        let m = src.len();
        let mut out = Vec::with_capacity(m * n);
        for &v in src {
            out.extend(std::iter::repeat_n(v, n));
        }
        let t = Tensor::new(&[m, n], out).expect("numel");
        let rg = self.any_grad(&[x]);
        self.push(t, Op::RepeatCols(x), rg)
    }

    /// Picks entries of the flattened `x`, giving a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let out: Vec<Scalar> = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_vec(out);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        expect_rank("select_rows", s, 2)?;
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(invalid("select_rows", format!("row {bad} out of range for {m} rows")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(&[rows.len(), n], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// `out[t] = x[t + offset]`, zero where the source row is out of range.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Result<Var> {
        let s = self.shape(x);
        expect_rank("shift_rows", s, 2)?;
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for t in 0..m {
            let from = t as isize + offset;
            if from >= 0 && (from as usize) < m {
                let f = from as usize;
                out[t * n..(t + 1) * n].copy_from_slice(&src[f * n..(f + 1) * n]);
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::ShiftRows { x, offset }, rg))
    }

    /// Linearly interpolated rows of `x[T, C]` at continuous frame
    /// coordinates `coords[n]`; returns `[n, C]`.
    pub fn interp_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let sx = self.shape(x);
        expect_rank("interp_sample", sx, 2)?;
        let (rows, cols) = (sx[0], sx[1]);
        let n = self.value(coords).numel();
        let mut out = vec![0.0; n * cols];
        kernels::interp_forward(self.data(x), rows, cols, self.data(coords), &mut out);
        let t = Tensor::new(&[n, cols], out)?;
        let rg = self.any_grad(&[x, coords]);
        Ok(self.push(t, Op::InterpSample { x, coords }, rg))
    }

    /// Multi-head deformable gather.
    ///
    /// `value` is `[T, C]` with `C` split into `heads` contiguous blocks;
    /// `coords` and `weights` are `[Q, heads·K]` laid out head-major. Row `q`
    /// of the `[Q, C]` output holds, per head, the weighted sum of the head's
    /// value block interpolated at each of its `K` coordinates.
    pub fn deform_sample(&mut self, value: Var, coords: Var, weights: Var, heads: usize) -> Result<Var> {
        let sv = self.shape(value);
        expect_rank("deform_sample", sv, 2)?;
        let (rows, cols) = (sv[0], sv[1]);
        if heads == 0 || cols % heads != 0 {
            return Err(invalid(
                "deform_sample",
                format!("{cols} channels not divisible into {heads} heads"),
            ));
        }
        let sc = self.shape(coords);
        if sc.len() != 2 || !sc[1].is_multiple_of(heads) || sc[1] == 0 {
            return Err(mismatch("deform_sample", sv, sc));
        }
        if self.shape(weights) != sc {
            return Err(mismatch("deform_sample", sc, self.shape(weights)));
        }
        let dims = DeformDims {
            rows,
            cols,
            queries: sc[0],
            heads,
            points: sc[1] / heads,
        };
        let mut out = vec![0.0; dims.queries * cols];
        kernels::deform_forward(dims, self.data(value), self.data(coords), self.data(weights), &mut out);
        let t = Tensor::new(&[dims.queries, cols], out)?;
        let rg = self.any_grad(&[value, coords, weights]);
        Ok(self.push(
            t,
            Op::DeformSample {
                value,
                coords,
                weights,
                heads,
            },
            rg,
        ))
    }

    /// Temporal RoIAlign of `x[T, C]` over normalized `(center, length)`
    /// segments `[n, 2]`; returns `[n, bins·C]`.
    pub fn roi_align(&mut self, x: Var, segments: Var, spec: RoiAlignSpec) -> Result<Var> {
        let sx = self.shape(x);
        expect_rank("roi_align", sx, 2)?;
        let ss = self.shape(segments);
        if ss.len() != 2 || ss[1] != 2 {
            return Err(mismatch("roi_align", sx, ss));
        }
        if spec.bins == 0 || spec.samples_per_bin == 0 {
            return Err(invalid("roi_align", "bins and samples must be positive".into()));
        }
        let (rows, cols, n) = (sx[0], sx[1], ss[0]);
        let mut out = vec![0.0; n * spec.bins * cols];
        kernels::roi_forward(spec, self.data(x), rows, cols, self.data(segments), &mut out);
        let t = Tensor::new(&[n, spec.bins * cols], out)?;
        let rg = self.any_grad(&[x, segments]);
        Ok(self.push(t, Op::RoiAlign { x, segments, spec }, rg))
    }

    /// Row-wise IoU of `(center, length)` segments `[n, 2]`; returns `[n]`.
    pub fn segment_iou(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa[1] != 2 || sa != sb {
            return Err(mismatch("segment_iou", sa, sb));
        }
        let out: Vec<Scalar> = self
            .data(a)
            .chunks_exact(2)
            .zip(self.data(b).chunks_exact(2))
            .map(|(x, y)| kernels::segment_iou_with_grad([x[0], x[1]], [y[0], y[1]]).0)
            .collect();
        let t = Tensor::from_vec(out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::SegmentIou(a, b), rg))
    }

    /// Reverse sweep from a one-element `loss`, accumulating into leaf grads.
    ///
    /// Calling it again without [`Graph::zero_grad`] adds to existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<Scalar>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut pending);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[Scalar], pending: &mut [Option<Vec<Scalar>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Returns the gradient buffer of `v`, or None when `v` is constant.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(pending[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        macro_rules! acc_map {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                let src = nodes[v.0].value.data();
                if let Some(buf) = slot!(v) {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b += $f(j, src[j], g[j]);
                    }
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot!(*a) {
                    // ga += g · bᵀ
                    kernels::gemm(m, n, k, g, (n as isize, 1), db, (1, n as isize), 1.0, ga);
                }
                if let Some(gb) = slot!(*b) {
                    // gb += aᵀ · g
                    kernels::gemm(k, m, n, da, (1, k as isize), g, (n as isize, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                acc_map!(*a, |_, _, gj| gj);
                acc_map!(*b, |_, _, gj| gj);
            }
            Op::Sub(a, b) => {
                acc_map!(*a, |_, _, gj| gj);
                acc_map!(*b, |_, _, gj: Scalar| -gj);
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc_map!(*a, |j, _, gj| gj * db[j]);
                acc_map!(*b, |j, _, gj| gj * da[j]);
            }
            Op::Scale(x, f) => acc_map!(*x, |_, _, gj| gj * f),
            Op::AddScalar(x) => acc_map!(*x, |_, _, gj| gj),
            Op::AddBias(x, bias) => {
                acc_map!(*x, |_, _, gj| gj);
                let n = nodes[bias.0].value.numel();
                if let Some(gb) = slot!(*bias) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[j % n] += gj;
                    }
                }
            }
            Op::Relu(x) => acc_map!(*x, |_, v: Scalar, gj| if v > 0.0 { gj } else { 0.0 }),
            Op::Sigmoid(x) => {
                let y = out.data();
                acc_map!(*x, |j, _, gj| gj * y[j] * (1.0 - y[j]));
            }
            Op::InverseSigmoid(x) => acc_map!(*x, |_, v: Scalar, gj| {
                if (INVERSE_SIGMOID_EPS..=1.0 - INVERSE_SIGMOID_EPS).contains(&v) {
                    gj / (v * (1.0 - v))
                } else {
                    0.0
                }
            }),
            Op::Log(x) => acc_map!(*x, |_, v, gj| gj / v),
            Op::Abs(x) => acc_map!(*x, |_, v: Scalar, gj: Scalar| if v > 0.0 {
                gj
            } else if v < 0.0 {
                -gj
            } else {
                0.0
            }),
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let is_log = matches!(nodes[i].op, Op::LogSoftmax { .. });
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + c;
                            if is_log {
                                let gs: Scalar = (0..n).map(|j| g[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += g[at(j)] - libm::exp(y[at(j)]) * gs;
                                }
                            } else {
                                let dot: Scalar = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let m = out.rows();
                let gam = nodes[gamma.0].value.data();
                if let Some(gg) = slot!(*gamma) {
                    for (j, gj) in g.iter().enumerate() {
                        gg[j % n] += gj * xhat[j];
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for (j, gj) in g.iter().enumerate() {
                        gb[j % n] += gj;
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let nf = n as Scalar;
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..n {
                            let dy = g[row.start + c] * gam[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[row.start + c];
                        }
                        for c in 0..n {
                            let j = row.start + c;
                            let dy = g[j] * gam[c];
                            gx[j] += rstd[r] / nf * (nf * dy - sum_dy - xhat[j] * sum_dy_xhat);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = slot!(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in gv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => acc_map!(*x, |_, _, gj| gj),
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                if let Some(gx) = slot!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::RepeatCols(x) => {
                let n = out.cols();
                if let Some(gx) = slot!(*x) {
                    for (r, gr) in gx.iter_mut().enumerate() {
                        *gr += g[r * n..(r + 1) * n].iter().sum::<Scalar>();
                    }
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = slot!(*x) {
                    for (gj, &idx) in g.iter().zip(indices) {
                        gx[idx] += gj;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let n = out.cols();
                if let Some(gx) = slot!(*x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            gx[r * n + c] += g[k * n + c];
                        }
                    }
                }
            }
            Op::ShiftRows { x, offset } => {
                let (m, n) = (out.rows(), out.cols());
                if let Some(gx) = slot!(*x) {
                    for t in 0..m {
                        let from = t as isize + offset;
                        if from >= 0 && (from as usize) < m {
                            let f = from as usize;
                            for c in 0..n {
                                gx[f * n + c] += g[t * n + c];
                            }
                        }
                    }
                }
            }
            Op::InterpSample { x, coords } => {
                let sx = nodes[x.0].value.shape();
                let mut gx = scratch(nodes, *x);
                let mut gc = scratch(nodes, *coords);
                kernels::interp_backward(
                    nodes[x.0].value.data(),
                    sx[0],
                    sx[1],
                    nodes[coords.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gc.as_deref_mut(),
                );
                deposit(pending, *x, gx);
                deposit(pending, *coords, gc);
            }
            Op::DeformSample {
                value,
                coords,
                weights,
                heads,
            } => {
                let sv = nodes[value.0].value.shape();
                let sc = nodes[coords.0].value.shape();
                let dims = DeformDims {
                    rows: sv[0],
                    cols: sv[1],
                    queries: sc[0],
                    heads: *heads,
                    points: sc[1] / heads,
                };
                let mut gv = scratch(nodes, *value);
                let mut gc = scratch(nodes, *coords);
                let mut gw = scratch(nodes, *weights);
                kernels::deform_backward(
                    dims,
                    nodes[value.0].value.data(),
                    nodes[coords.0].value.data(),
                    nodes[weights.0].value.data(),
                    g,
                    gv.as_deref_mut(),
                    gc.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                deposit(pending, *value, gv);
                deposit(pending, *coords, gc);
                deposit(pending, *weights, gw);
            }
            Op::RoiAlign { x, segments, spec } => {
                let sx = nodes[x.0].value.shape();
                let mut gx = scratch(nodes, *x);
                let mut gs = scratch(nodes, *segments);
                kernels::roi_backward(
                    *spec,
                    nodes[x.0].value.data(),
                    sx[0],
                    sx[1],
                    nodes[segments.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gs.as_deref_mut(),
                );
                deposit(pending, *x, gx);
                deposit(pending, *segments, gs);
            }
            Op::SegmentIou(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let mut ga_local = vec![0.0; da.len()];
                let mut gb_local = vec![0.0; db.len()];
                for (r, gr) in g.iter().enumerate() {
                    let (_, dga, dgb) =
                        kernels::segment_iou_with_grad([da[2 * r], da[2 * r + 1]], [db[2 * r], db[2 * r + 1]]);
                    for c in 0..2 {
                        ga_local[2 * r + c] += gr * dga[c];
                        gb_local[2 * r + c] += gr * dgb[c];
                    }
                }
                if nodes[a.0].requires_grad {
                    deposit(pending, *a, Some(ga_local));
                }
                if nodes[b.0].requires_grad {
                    deposit(pending, *b, Some(gb_local));
                }
            }
        }
    }
}

fn scratch(nodes: &[Node], v: Var) -> Option<Vec<Scalar>> {
    nodes[v.0].requires_grad.then(|| vec![0.0; nodes[v.0].value.numel()])
}

fn deposit(pending: &mut [Option<Vec<Scalar>>], v: Var, local: Option<Vec<Scalar>>) {
    let Some(local) = local else { return };
    match &mut pending[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&local) {
                *a += b;
            }
        }
        slot => *slot = Some(local),
    }
}
