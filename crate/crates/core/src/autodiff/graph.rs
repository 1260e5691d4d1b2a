use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
// Unused whenever std ends up linked into the build, since std then supplies
// the float methods inherently.
#[allow(unused_imports)]
use num_traits::Float;

use super::kernels::{self, axis_split, ConvGeometry};
use super::params::{ParamId, ParamRef, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Lower clamp applied to arguments of `log`.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

/// Elementwise operation tags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
    Shift(f64),
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Reduce {
        kind: Reduce,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LogSoftmax(Var),
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    PairwiseSqDist(Var, Var),
    TileSpatial {
        x: Var,
        h: usize,
        w: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    binding: Option<ParamRef>,
}

/// Dynamically recorded computation.
///
/// Nodes are appended in evaluation order, so the node list is topological by
/// construction. A graph supports exactly one [`Graph::backward`] call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    bindings: Vec<(usize, ParamRef)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter bound from `store` into its buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, r) in &self.bindings {
            if r.store != store.uid() {
                continue;
            }
            if let Some(g) = &self.leaves[node] {
                store.get_mut(ParamId(r.index)).accumulate_grad(g);
            }
        }
    }
}

fn unary_forward(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.max(LOG_EPS).ln(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Scale(c) => c * x,
        Unary::Shift(c) => x + c,
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
    }
}

/// Local derivative given the input `x` and output `y`.
fn unary_derivative(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => {
            if x > LOG_EPS {
                1.0 / x
            } else {
                0.0
            }
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Scale(c) => c,
        Unary::Shift(_) => 1.0,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *dst = Some(delta.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            binding: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it requires gradients iff the tensor does.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_values());
        self.push(value, Op::Leaf, rg)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_values());
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Gradient tracking follows the
    /// parameter's `requires_grad` flag.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.values().to_vec());
        let v = self.push(value, Op::Leaf, t.requires_grad());
        self.nodes[v.0].binding = Some(store.reference(id));
        v
    }

    /// Copies a node's value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
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

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let values = xv.values().iter().map(|&a| unary_forward(op, a)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), values);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary(op, x), rg)
    }

    /// Elementwise binary op; the only broadcast allowed is a one-element operand.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = if av.shape() == bv.shape() {
            Broadcast::None
        } else if bv.numel() == 1 {
            Broadcast::Rhs
        } else if av.numel() == 1 {
            Broadcast::Lhs
        } else {
            return shape_err("elementwise", av.shape(), bv.shape());
        };
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, values): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::None => (
                av.shape().to_vec(),
                av.values()
                    .iter()
                    .zip(bv.values())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Broadcast::Rhs => {
                let y = bv.item();
                (
                    av.shape().to_vec(),
                    av.values().iter().map(|&x| f(x, y)).collect(),
                )
            }
            Broadcast::Lhs => {
                let x = av.item();
                (
                    bv.shape().to_vec(),
                    bv.values().iter().map(|&y| f(x, y)).collect(),
                )
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, values),
            Op::Binary(op, a, b, bc),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// Natural log with the argument clamped below at [`LOG_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Shift(c), x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// `1 - x`, used by the GAN losses.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.shift(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return shape_err("matmul", av.shape(), bv.shape());
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = kernels::matmul_nn(av.values(), bv.values(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let src = xv.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), rg))
    }

    /// Cross-correlation of `input` (`C×H×W` or `N×C×H×W`) with
    /// `kernel` (`O×C×kh×kw`). No kernel flip.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (batch, c, h, w, batched) = match iv.shape() {
            &[c, h, w] => (1, c, h, w, false),
            &[n, c, h, w] => (n, c, h, w, true),
            s => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!("input must be rank 3 or 4, got {s:?}"),
                })
            }
        };
        let &[o, kc, kh, kw] = kv.shape() else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel must be rank 4, got {:?}", kv.shape()),
            });
        };
        if kc != c {
            return shape_err("conv2d", iv.shape(), kv.shape());
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!(
                        "({size} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
                    ),
                });
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: out_dim(h, kh)?,
            out_w: out_dim(w, kw)?,
        };
        let (img_len, p) = (c * h * w, geom.positions());
        let mut out = Vec::with_capacity(batch * o * p);
        for n in 0..batch {
            let cols = kernels::im2col(&iv.values()[n * img_len..(n + 1) * img_len], &geom);
            out.extend(kernels::matmul_nn(
                kv.values(),
                &cols,
                o,
                geom.patch_len(),
                p,
            ));
        }
        let shape = if batched {
            vec![batch, o, geom.out_h, geom.out_w]
        } else {
            vec![o, geom.out_h, geom.out_w]
        };
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernel,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Adds the vector `bias` along `axis` of `x` (`bias.len() == shape[axis]`).
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if axis >= xv.rank() || bv.rank() != 1 || bv.numel() != xv.shape()[axis] {
            return shape_err("bias_add", xv.shape(), bv.shape());
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.values().to_vec();
        for o in 0..outer {
            for (j, &b) in bv.values().iter().enumerate() {
                let base = (o * len + j) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::BiasAdd { x, bias, axis },
            rg,
        ))
    }

    /// Sum, mean or max over one axis, or over all elements when `axis` is `None`.
    ///
    /// Max routes gradients to the first (lowest-index) maximum.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, xv.numel(), 1, vec![1]),
            Some(a) if a < shape.len() => {
                let (o, l, i) = axis_split(&shape, a);
                (o, l, i, reduced_shape(&shape, a))
            }
            Some(a) => {
                return Err(Error::InvalidShape {
                    op: "reduce",
                    detail: format!("axis {a} out of range for shape {shape:?}"),
                })
            }
        };
        let src = xv.values();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut acc = 0.0;
                        for l in 0..len {
                            acc += src[idx(l)];
                        }
                        out[slot] = if kind == Reduce::Mean {
                            acc / len as f64
                        } else {
                            acc
                        };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if src[idx(l)] > src[idx(best)] {
                                best = l;
                            }
                        }
                        out[slot] = src[idx(best)];
                        argmax[slot] = idx(best);
                    }
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduce::Sum, x, None)
            .expect("full reduction is infallible")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduce::Mean, x, None)
            .expect("full reduction is infallible")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if shape.is_empty() || shape.contains(&0) || numel(shape) != xv.numel() {
            return shape_err("reshape", xv.shape(), shape);
        }
        let out = Tensor::from_parts(shape.to_vec(), xv.values().to_vec());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[inputs.first().ok_or(Error::EmptySequence)?.0]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            });
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv.values()[base..base + len * inner]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Row lookup: `table[V×D]`, ids → `[ids.len()×D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 || ids.is_empty() {
            return shape_err("gather_rows", tv.shape(), &[ids.len()]);
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = *xv.shape().last().expect("non-empty shape");
        let mut out = xv.values().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter() {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LogSoftmax(x),
            rg,
        )
    }

    /// `out[r] = x[r, indices[r]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || xv.shape()[0] != indices.len() {
            return shape_err("pick", xv.shape(), &[indices.len()]);
        }
        let cols = xv.shape()[1];
        let mut out = Vec::with_capacity(indices.len());
        for (r, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::TokenOutOfRange { id: c, vocab: cols });
            }
            out.push(xv.values()[r * cols + c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn spatial_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.nodes[x.0].value.shape() {
            [n, c, h, w] => Ok((n * c, h, w)),
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::InvalidShape {
                op,
                detail: format!("expected rank 3 or 4, got {s:?}"),
            }),
        }
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial_dims(x, "upsample2x")?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv.values()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample2x(x), rg))
    }

    /// 2×2 average pooling of the last two axes (dimensions must be even).
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial_dims(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2x",
                detail: format!("spatial size {h}×{w} is not even"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    let at =
                        |dy: usize, dx: usize| xv.values()[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                    out[(p * oh + y) * ow + xx] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool2x(x), rg))
    }

    /// `out[i,j] = ‖a_i − b_j‖²` for `a[n×d]`, `b[m×d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return shape_err("pairwise_sq_dist", av.shape(), bv.shape());
        }
        let (n, m) = (av.shape()[0], bv.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for (x, y) in av.row(i).iter().zip(bv.row(j)) {
                    let d = x - y;
                    acc += d * d;
                }
                out.push(acc);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::PairwiseSqDist(a, b),
            rg,
        ))
    }

    /// Repeats `x[N×D]` over an `h×w` grid, giving `[N×D×h×w]`.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || h == 0 || w == 0 {
            return shape_err("tile_spatial", xv.shape(), &[h, w]);
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(n * d * h * w);
        for &v in xv.values() {
            out.extend(core::iter::repeat_n(v, h * w));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d, h, w], out),
            Op::TileSpatial { x, h, w },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        let bindings = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| node.binding.map(|b| (i, b)))
            .collect();
        Ok(Gradients {
            leaves: grads,
            bindings,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(op, x) => {
                let xv = val(x).values();
                let yv = node.value.values();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&x, &y))| g * unary_derivative(op, x, y))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            &Op::Binary(op, a, b, bc) => {
                let (av, bv) = (val(a), val(b));
                let at = |i: usize| {
                    if bc == Broadcast::Lhs {
                        av.item()
                    } else {
                        av.values()[i]
                    }
                };
                let bt = |i: usize| {
                    if bc == Broadcast::Rhs {
                        bv.item()
                    } else {
                        bv.values()[i]
                    }
                };
                let (da, db): (Vec<f64>, Vec<f64>) = match op {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(i, &g)| g * bt(i)).collect(),
                        g.iter().enumerate().map(|(i, &g)| g * at(i)).collect(),
                    ),
                };
                let collapse = |d: Vec<f64>| -> Vec<f64> { vec![d.iter().sum()] };
                if self.needs(a) {
                    let d = if bc == Broadcast::Lhs {
                        collapse(da)
                    } else {
                        da
                    };
                    add_into(&mut grads[a.0], &d);
                }
                if self.needs(b) {
                    let d = if bc == Broadcast::Rhs {
                        collapse(db)
                    } else {
                        db
                    };
                    add_into(&mut grads[b.0], &d);
                }
            }
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(a) {
                    add_into(
                        &mut grads[a.0],
                        &kernels::matmul_nt(g, bv.values(), m, n, k),
                    );
                }
                if self.needs(b) {
                    add_into(
                        &mut grads[b.0],
                        &kernels::matmul_tn(av.values(), g, k, m, n),
                    );
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::Conv2d {
                input,
                kernel,
                ref geom,
                batch,
            } => {
                let (iv, kv) = (val(input), val(kernel));
                let o = kv.shape()[0];
                let (img_len, p, ck) = (
                    geom.channels * geom.height * geom.width,
                    geom.positions(),
                    geom.patch_len(),
                );
                let mut dk = vec![0.0; o * ck];
                let mut di = if self.needs(input) {
                    vec![0.0; batch * img_len]
                } else {
                    Vec::new()
                };
                for s in 0..batch {
                    let go = &g[s * o * p..(s + 1) * o * p];
                    if self.needs(kernel) {
                        let cols =
                            kernels::im2col(&iv.values()[s * img_len..(s + 1) * img_len], geom);
                        let part = kernels::matmul_nt(go, &cols, o, p, ck);
                        dk.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                    }
                    if self.needs(input) {
                        let dcols = kernels::matmul_tn(kv.values(), go, ck, o, p);
                        kernels::col2im_add(&dcols, geom, &mut di[s * img_len..(s + 1) * img_len]);
                    }
                }
                if self.needs(kernel) {
                    add_into(&mut grads[kernel.0], &dk);
                }
                if self.needs(input) {
                    add_into(&mut grads[input.0], &di);
                }
            }
            &Op::BiasAdd { x, bias, axis } => {
                if self.needs(x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.needs(bias) {
                    let (outer, len, inner) = axis_split(val(x).shape(), axis);
                    let mut db = vec![0.0; len];
                    for o in 0..outer {
                        for (j, slot) in db.iter_mut().enumerate() {
                            let base = (o * len + j) * inner;
                            *slot += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = match axis {
                    None => (1, val(*x).numel(), 1),
                    Some(a) => axis_split(xs, *a),
                };
                let mut d = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                let gv = if *kind == Reduce::Mean {
                                    g[slot] / len as f64
                                } else {
                                    g[slot]
                                };
                                for l in 0..len {
                                    d[(o * len + l) * inner + i] += gv;
                                }
                            }
                            Reduce::Max => d[argmax[slot]] += g[slot],
                        }
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for v in inputs {
                    let chunk = val(*v).shape()[*axis] * inner;
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + chunk]);
                        }
                        add_into(&mut grads[v.0], &d);
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(val(x).shape(), axis);
                let len = node.value.shape()[axis];
                let mut d = vec![0.0; val(x).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::Gather { table, ids } => {
                let d_len = val(*table).shape()[1];
                let mut d = vec![0.0; val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id * d_len..(id + 1) * d_len];
                    dst.iter_mut()
                        .zip(&g[r * d_len..(r + 1) * d_len])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[table.0], &d);
            }
            &Op::LogSoftmax(x) => {
                let cols = *node.value.shape().last().expect("non-empty");
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(node.value.values().chunks(cols))
                {
                    let gs: f64 = grow.iter().sum();
                    for ((dv, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = gv - y.exp() * gs;
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::Pick { x, indices } => {
                let cols = val(*x).shape()[1];
                let mut d = vec![0.0; val(*x).numel()];
                for (r, &c) in indices.iter().enumerate() {
                    d[r * cols + c] += g[r];
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::Upsample2x(x) => {
                let (planes, h, w) = self.spatial_dims(x, "upsample2x")?;
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::AvgPool2x(x) => {
                let (planes, h, w) = self.spatial_dims(x, "avg_pool2x")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = 0.25 * g[(p * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, m, dim) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let mut da = vec![0.0; n * dim];
                let mut db = vec![0.0; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..dim {
                            let diff = av.values()[i * dim + k] - bv.values()[j * dim + k];
                            da[i * dim + k] += gij * diff;
                            db[j * dim + k] -= gij * diff;
                        }
                    }
                }
                if self.needs(a) {
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(b) {
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::TileSpatial { x, h, w } => {
                let d: Vec<f64> = g.chunks(h * w).map(|c| c.iter().sum()).collect();
                add_into(&mut grads[x.0], &d);
            }
        }
        Ok(())
    }
}
