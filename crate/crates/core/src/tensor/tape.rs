use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{ConvGeometry, PoolGeometry};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which axis survives a reduction (and is expanded again by a broadcast).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    /// Reduce everything to a scalar.
    Nothing,
    /// Keep axis 0, the batch axis.
    Rows,
    /// Keep axis 1, the feature/channel axis.
    Channels,
}

impl Keep {
    fn reduced_shape(self, shape: &[usize]) -> Option<Vec<usize>> {
        match self {
            Keep::Nothing => Some(Vec::new()),
            Keep::Rows => shape.first().map(|&n| vec![n]),
            Keep::Channels => shape.get(1).map(|&c| vec![c]),
        }
    }

    /// Index of the kept entry for flat position `i` of `shape`.
    fn project(self, shape: &[usize]) -> impl Fn(usize) -> usize {
        let (div, modulo) = match self {
            Keep::Nothing => (1, 1),
            Keep::Rows => (numel(shape) / shape[0], shape[0]),
            Keep::Channels => (numel(&shape[2..]), shape[1]),
        };
        move |i| (i / div) % modulo
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Sigmoid(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Pow(Var, T),
    Sum(Var, Keep),
    Broadcast(Var, Keep),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Pad { a: Var, axis: usize, before: usize },
    Conv { x: Var, w: Var, geom: ConvGeometry },
    ConvT { y: Var, w: Var, geom: ConvGeometry },
    ConvW { x: Var, y: Var, geom: ConvGeometry },
    Gather { a: Var, idx: Arc<[usize]> },
    Scatter { a: Var, idx: Arc<[usize]> },
    Custom { a: Var, local: Var, name: &'static str },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul { .. } => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Pow(..) => "pow",
            Op::Sum(..) => "sum",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::Conv { .. } => "conv2d",
            Op::ConvT { .. } => "transconv2d",
            Op::ConvW { .. } => "conv2d_weight",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Pow(a, _)
            | Op::Sum(a, _)
            | Op::Broadcast(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Narrow { a, .. } | Op::Pad { a, .. } => vec![*a],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::ConvT { y, w, .. } => vec![*y, *w],
            Op::ConvW { x, y, .. } => vec![*x, *y],
            Op::Gather { a, .. } | Op::Scatter { a, .. } => vec![*a],
            // `local` is a constant; only `a` receives gradient.
            Op::Custom { a, .. } => vec![*a],
        }
    }

    /// Whether the backward rule is itself differentiable in the op input.
    fn second_order(&self) -> bool {
        !matches!(self, Op::Custom { .. })
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every flagged leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Ordered record of evaluated ops.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. An op only records its backward rule when recording is enabled and at
/// least one input requires a gradient; otherwise the result is stored as a
/// plain constant.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Disable recording to evaluate without building backward rules.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// A constant copy of `v`, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, |x| x + c, Op::Shift(a, c))
    }

    /// `c * a + d`.
    pub fn affine(&mut self, a: Var, c: f64, d: f64) -> Var {
        let scaled = self.scale(a, c);
        self.shift(scaled, d)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * s },
            Op::LeakyRelu(a, s),
        )
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                value: bad.as_f64(),
                domain: "(0, inf)",
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    /// Elementwise power with a fixed exponent; fails on non-finite results.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let pt = T::of(p);
        let value = self.value(a).map(|x| x.powf(pt));
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "pow",
                value: self.value(a).data()[i].as_f64(),
                domain: "finite power",
            });
        }
        Ok(self.push(value, Op::Pow(a, pt)))
    }

    /// Matrix product of two 2-d values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        super::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }))
    }

    /// Sum over every axis except the kept one.
    pub fn sum(&mut self, a: Var, keep: Keep) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(out_shape) = keep.reduced_shape(&shape) else {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("cannot reduce keeping {keep:?}"),
            });
        };
        let mut out = vec![T::zero(); numel(&out_shape)];
        let project = keep.project(&shape);
        for (i, &x) in self.value(a).data().iter().enumerate() {
            let j = project(i);
            out[j] = out[j] + x;
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Sum(a, keep)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum(a, Keep::Nothing).expect("full reduction accepts any shape")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Expand `a` (shaped like `shape` reduced by `keep`) to `shape`.
    pub fn broadcast(&mut self, a: Var, keep: Keep, shape: &[usize]) -> Result<Var> {
        let expected = keep.reduced_shape(shape);
        if expected.as_deref() != Some(self.shape(a)) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let project = keep.project(shape);
        let src = self.value(a).data();
        let data = (0..numel(shape)).map(|i| src[project(i)]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(value, Op::Broadcast(a, keep)))
    }

    /// `x + b` with `b` broadcast along axis 1 (bias per feature or channel).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, Keep::Channels, &shape)?;
        self.add(x, bb)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Flatten every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let rows = v.rows();
        let cols = v.len() / rows;
        self.reshape(a, &[rows, cols])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape {
                shape: Vec::new(),
                reason: "concat of zero tensors".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                shape: base,
                reason: format!("no axis {axis}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = around(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// The slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("cannot take {start}..{} of axis {axis}", start + len),
            });
        }
        let (outer, n, inner) = around(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * n + start) * inner;
            data.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Narrow { a, axis, start }))
    }

    /// Zero-pad `axis` with `before` and `after` entries.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, n, inner) = around(&shape, axis);
        let total = before + n + after;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Pad { a, axis, before }))
    }

    /// Cross-correlation of `x: [n, ci, h, w]` with `w: [co, ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::for_conv(self.shape(x), self.shape(w), stride, pad)?;
        Ok(self.conv_with(x, w, geom))
    }

    /// Transposed convolution of `y: [n, co, h, w]` with a kernel stored as
    /// `[co, ci, kh, kw]`; this is the adjoint of [`conv2d`](Self::conv2d)
    /// with the same kernel. Output spatial size is `(h - 1) * stride + kh - 2 * pad`.
    pub fn conv_transpose2d(&mut self, y: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::for_transpose(self.shape(y), self.shape(w), stride, pad)?;
        Ok(self.conv_t_with(y, w, geom))
    }

    fn conv_with(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Var {
        let out = geom.conv(self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(geom.output_shape(), out);
        self.push(value, Op::Conv { x, w, geom })
    }

    fn conv_t_with(&mut self, y: Var, w: Var, geom: ConvGeometry) -> Var {
        let out = geom.conv_transpose(self.value(y).data(), self.value(w).data());
        let value = Tensor::from_parts(geom.input_shape(), out);
        self.push(value, Op::ConvT { y, w, geom })
    }

    fn conv_w_with(&mut self, x: Var, y: Var, geom: ConvGeometry) -> Var {
        let out = geom.conv_weight(self.value(x).data(), self.value(y).data());
        let value = Tensor::from_parts(geom.kernel_shape(), out);
        self.push(value, Op::ConvW { x, y, geom })
    }

    /// Max pooling; the gradient flows to the first maximum of each window.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (idx, shape) =
            PoolGeometry { kernel, stride }.argmax(self.value(x).data(), self.shape(x))?;
        Ok(self.gather(x, idx.into(), shape))
    }

    fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Var {
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape, data);
        self.push(value, Op::Gather { a, idx })
    }

    fn scatter(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Var {
        let mut data = vec![T::zero(); numel(&shape)];
        for (&i, &x) in idx.iter().zip(self.value(a).data()) {
            data[i] = data[i] + x;
        }
        let value = Tensor::from_parts(shape, data);
        self.push(value, Op::Scatter { a, idx })
    }

    /// Record `value` as a function of `a` whose backward pass multiplies the
    /// upstream gradient elementwise by `local`.
    ///
    /// The forward value is taken as given, so non-differentiable forwards
    /// (thresholding, sampling) can carry a surrogate derivative. The rule has
    /// no second-order form.
    pub fn custom_grad(
        &mut self,
        name: &'static str,
        a: Var,
        value: Tensor<T>,
        local: Tensor<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), value.shape())?;
        same_shape(name, value.shape(), local.shape())?;
        let local = self.constant(local);
        Ok(self.push(value, Op::Custom { a, local, name }))
    }

    /// Per-sample Euclidean norm over every axis after the first:
    /// `sqrt(sum(x^2) + eps)`.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq, Keep::Rows)?;
        let s = self.shift(s, eps);
        self.pow(s, 0.5)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the gradient computation is itself recorded, so
    /// the returned values can be differentiated again. Inputs that `output`
    /// does not depend on get zero gradients.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if numel(&out_shape) != 1 {
            return Err(Error::NonScalarLoss(out_shape));
        }
        let end = output.0 + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            let node = &self.nodes[i];
            if !needed[i]
                && node.requires_grad
                && node.op.inputs().iter().any(|v| needed[v.0])
            {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if needed[output.0] {
            let seed = self.constant(Tensor::ones(out_shape));
            grads[output.0] = Some(seed);
        }
        let prev = self.recording;
        self.recording = create_graph;
        let result = self.propagate(end, &needed, &mut grads, create_graph);
        self.recording = prev;
        result?;

        let out = wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Tensor::zeros(self.shape(*w).to_vec());
                    self.constant(zeros)
                }
            })
            .collect();
        Ok(out)
    }

    fn propagate(
        &mut self,
        end: usize,
        needed: &[bool],
        grads: &mut [Option<Var>],
        create_graph: bool,
    ) -> Result<()> {
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            if create_graph && !op.second_order() {
                return Err(Error::UnsupportedSecondOrder(op.name()));
            }
            let contributions = self.vjp(Var(i), &op, g, needed).map_err(|e| match e {
                Error::Domain { .. } => Error::NonFiniteGradient {
                    node: i,
                    op: op.name(),
                },
                other => other,
            })?;
            for (input, ig) in contributions {
                if !self.value(ig).is_finite() {
                    return Err(Error::NonFiniteGradient {
                        node: i,
                        op: op.name(),
                    });
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(prev) => self.add(prev, ig)?,
                    None => ig,
                });
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `out` for each needed input.
    fn vjp(&mut self, out: Var, op: &Op<T>, g: Var, needed: &[bool]) -> Result<Vec<(Var, Var)>> {
        let need = |v: &Var| needed[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if need(&a) {
                    res.push((a, self.mul(g, b)?));
                }
                if need(&b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => res.push((a, self.scale(g, c.as_f64()))),
            Op::Shift(a, _) => res.push((a, g)),
            Op::MatMul { a, b, ta, tb } => {
                if need(&a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    res.push((a, ga));
                }
                if need(&b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Sigmoid(a) => {
                // s * (1 - s) with s the recorded output
                let one_minus = self.affine(out, -1.0, 1.0);
                let ds = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, ds)?));
            }
            Op::Log(a) => {
                let inv = self.pow(a, -1.0)?;
                res.push((a, self.mul(g, inv)?));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                res.push((a, self.mul(g, s)?));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                res.push((a, self.mul(g, mask)?));
            }
            Op::LeakyRelu(a, s) => {
                let mask = self.value(a).map(|x| if x > T::zero() { T::one() } else { s });
                let mask = self.constant(mask);
                res.push((a, self.mul(g, mask)?));
            }
            Op::Pow(a, p) => {
                let d = self.pow(a, p.as_f64() - 1.0)?;
                let d = self.scale(d, p.as_f64());
                res.push((a, self.mul(g, d)?));
            }
            Op::Sum(a, keep) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.broadcast(g, keep, &shape)?));
            }
            Op::Broadcast(a, keep) => res.push((a, self.sum(g, keep)?)),
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.reshape(g, &shape)?));
            }
            Op::Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if need(&p) {
                        res.push((p, self.narrow(g, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let total = self.shape(a)[axis];
                let len = self.shape(out)[axis];
                res.push((a, self.pad(g, axis, start, total - start - len)?));
            }
            Op::Pad { a, axis, before } => {
                let len = self.shape(a)[axis];
                res.push((a, self.narrow(g, axis, before, len)?));
            }
            Op::Conv { x, w, geom } => {
                if need(&x) {
                    res.push((x, self.conv_t_with(g, w, geom)));
                }
                if need(&w) {
                    res.push((w, self.conv_w_with(x, g, geom)));
                }
            }
            Op::ConvT { y, w, geom } => {
                if need(&y) {
                    res.push((y, self.conv_with(g, w, geom)));
                }
                if need(&w) {
                    res.push((w, self.conv_w_with(g, y, geom)));
                }
            }
            Op::ConvW { x, y, geom } => {
                if need(&x) {
                    res.push((x, self.conv_t_with(y, g, geom)));
                }
                if need(&y) {
                    res.push((y, self.conv_with(x, g, geom)));
                }
            }
            Op::Gather { a, ref idx } => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.scatter(g, idx.clone(), shape)));
            }
            Op::Scatter { a, ref idx } => {
                let shape = self.shape(a).to_vec();
                res.push((a, self.gather(g, idx.clone(), shape)));
            }
            Op::Custom { a, local, .. } => res.push((a, self.mul(g, local)?)),
        }
        Ok(res)
    }

    /// Backpropagate a scalar loss into every leaf flagged `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let leaves: Vec<Var> = (0..=loss.0.min(self.nodes.len().saturating_sub(1)))
            .filter(|&i| {
                let n = &self.nodes[i];
                n.requires_grad && matches!(n.op, Op::Leaf)
            })
            .map(Var)
            .collect();
        let grads = self.grad(loss, &leaves, false)?;
        let map = leaves
            .into_iter()
            .zip(grads)
            .map(|(leaf, g)| (leaf, self.value(g).clone()))
            .collect();
        Ok(Gradients { map })
    }

    /// Differentiable gradient of `scalar` with respect to `wrt`: the result
    /// is on the tape and can feed a loss that is backpropagated again.
    pub fn grad_of_grad(&mut self, scalar: Var, wrt: Var) -> Result<Var> {
        Ok(self.grad(scalar, &[wrt], true)?[0])
    }
}
