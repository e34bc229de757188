//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation during the forward pass; [`Tape::backward`]
//! replays it in reverse, accumulating gradients additively across fan-out.
//! All arithmetic is double precision.

mod store;

pub use store::{AdamParams, Bindings, ParamStore};

use crate::error::{Error, Result};

/// Dense multidimensional array, flat row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                detail: "zero dimension".into(),
            });
        }
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                detail: format!("{} values for {} elements", data.len(), numel),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a row-major matrix from 3-component rows.
    pub fn from_rows3(rows: &[[f64; 3]]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), 3],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Relu,
    Square,
    Log,
    Sqrt,
    Recip,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Value),
    Binary(BinaryKind, Value, Value),
    Scale(Value, f64),
    AddConst(Value),
    Clamp(Value, f64, f64),
    Matmul(Value, Value),
    Concat { axis: usize, inputs: Vec<Value> },
    GatherRows(Value, Vec<usize>),
    MaxReduceAxis { input: Value, argmax: Vec<usize> },
    SumReduceAxis { input: Value, axis: usize },
    MeanReduce(Value),
    Sqnorm(Value),
    Reshape(Value),
}

struct Node {
    value: Tensor,
    op: Op,
    /// True if a requires-grad leaf is reachable through this node.
    needs_grad: bool,
}

/// Operation kind for the generic dispatcher; mirrors the typed methods.
#[derive(Debug, Clone)]
pub enum OpKind {
    Matmul,
    AddBroadcast,
    Sub,
    Mul,
    Relu,
    Square,
    Log,
    Sqrt,
    Recip,
    Sigmoid,
    Clamp(f64, f64),
    Scale(f64),
    AddConst(f64),
    ConcatAxis(usize),
    GatherRows(Vec<usize>),
    MaxReduceAxis(usize),
    SumReduceAxis(usize),
    MeanReduce,
    Sqnorm,
    Reshape(Vec<usize>),
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations in topological order for reverse replay.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a leaf tensor; gradients flow into it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Value {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- elementwise -----

    fn unary(&mut self, kind: UnaryKind, x: Value) -> Result<Value> {
        let xt = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(xt.numel());
        for &v in xt.data() {
            let y = match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Square => v * v,
                UnaryKind::Log => {
                    if v <= 0.0 {
                        return Err(Error::Domain {
                            op: "log",
                            detail: format!("log of non-positive value {v}"),
                        });
                    }
                    v.ln()
                }
                UnaryKind::Sqrt => {
                    if v < 0.0 {
                        return Err(Error::Domain {
                            op: "sqrt",
                            detail: format!("sqrt of negative value {v}"),
                        });
                    }
                    v.sqrt()
                }
                UnaryKind::Recip => {
                    if v == 0.0 {
                        return Err(Error::Domain {
                            op: "recip",
                            detail: "reciprocal of zero".into(),
                        });
                    }
                    1.0 / v
                }
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            };
            data.push(y);
        }
        let shape = xt.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Unary(kind, x), needs))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn square(&mut self, x: Value) -> Value {
        self.unary(UnaryKind::Square, x).expect("square is total")
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn log(&mut self, x: Value) -> Result<Value> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Value) -> Result<Value> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn recip(&mut self, x: Value) -> Result<Value> {
        self.unary(UnaryKind::Recip, x)
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let xt = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data: xt.data().iter().map(|v| v * c).collect(),
        };
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn add_const(&mut self, x: Value, c: f64) -> Value {
        let xt = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data: xt.data().iter().map(|v| v + c).collect(),
        };
        let needs = self.needs(x);
        self.push(t, Op::AddConst(x), needs)
    }

    pub fn clamp(&mut self, x: Value, lo: f64, hi: f64) -> Value {
        let xt = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data: xt.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let needs = self.needs(x);
        self.push(t, Op::Clamp(x, lo, hi), needs)
    }

    // ----- broadcasting binary ops -----

    fn binary(&mut self, kind: BinaryKind, a: Value, b: Value) -> Result<Value> {
        let (ashape, bshape) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        let out_shape = broadcast_shape(&ashape, &bshape).ok_or(Error::ShapeMismatch {
            op: "binary broadcast",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        })?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        if ashape == bshape {
            for i in 0..numel {
                data[i] = apply_binary(kind, ad[i], bd[i]);
            }
        } else {
            let (astr, bstr) = (
                broadcast_strides(&ashape, &out_shape),
                broadcast_strides(&bshape, &out_shape),
            );
            let mut it = Odometer::new(&out_shape);
            for out in data.iter_mut() {
                *out = apply_binary(kind, ad[it.offset(&astr)], bd[it.offset(&bstr)]);
                it.step();
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Binary(kind, a, b),
            needs,
        ))
    }

    /// Elementwise addition with numpy-style broadcasting.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(BinaryKind::Mul, a, b)
    }

    // ----- matmul -----

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ashape, bshape) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            needs,
        ))
    }

    // ----- structure -----

    pub fn concat(&mut self, axis: usize, inputs: &[Value]) -> Result<Value> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("concat of zero tensors".into()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut axis_len = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_len;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row = axis_len * inner;
        let mut base = 0;
        for v in inputs {
            let t = &self.nodes[v.0].value;
            let len = t.shape()[axis] * inner;
            for o in 0..outer {
                data[o * row + base..o * row + base + len]
                    .copy_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
            base += len;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Select rows of a rank-2 tensor; duplicate indices allowed.
    pub fn gather_rows(&mut self, x: Value, indices: &[usize]) -> Result<Value> {
        let xt = &self.nodes[x.0].value;
        let shape = xt.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape,
                detail: "expected rank 2".into(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&xt.data()[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), d],
                data,
            },
            Op::GatherRows(x, indices.to_vec()),
            needs,
        ))
    }

    fn reduce_axis_dims(&self, x: Value, axis: usize, op: &'static str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op,
                shape,
                detail: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((outer, len, inner, out_shape))
    }

    /// Maximum along `axis`; ties resolved toward the lower index.
    pub fn max_reduce_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        let (outer, len, inner, out_shape) = self.reduce_axis_dims(x, axis, "max_reduce_axis")?;
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * len * inner + i];
                let mut best_j = 0;
                for j in 1..len {
                    let v = xd[(o * len + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = (o * len + best_j) * inner + i;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::MaxReduceAxis { input: x, argmax },
            needs,
        ))
    }

    pub fn sum_reduce_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        let (outer, len, inner, out_shape) = self.reduce_axis_dims(x, axis, "sum_reduce_axis")?;
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += xd[(o * len + j) * inner + i];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::SumReduceAxis { input: x, axis },
            needs,
        ))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_reduce(&mut self, x: Value) -> Value {
        let xt = &self.nodes[x.0].value;
        let mean = xt.data().iter().sum::<f64>() / xt.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanReduce(x), needs)
    }

    /// Sum of squares over all elements, producing a scalar.
    pub fn sqnorm(&mut self, x: Value) -> Value {
        let xt = &self.nodes[x.0].value;
        let s = xt.data().iter().map(|v| v * v).sum::<f64>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sqnorm(x), needs)
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let xt = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("cannot hold {} elements", xt.numel()),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: xt.data().to_vec(),
        };
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Generic dispatcher over the primitive set.
    pub fn forward_op(&mut self, kind: &OpKind, inputs: &[Value]) -> Result<Value> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::Matmul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::AddBroadcast => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                want(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Square => {
                want(1)?;
                Ok(self.square(inputs[0]))
            }
            OpKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            OpKind::Sqrt => {
                want(1)?;
                self.sqrt(inputs[0])
            }
            OpKind::Recip => {
                want(1)?;
                self.recip(inputs[0])
            }
            OpKind::Sigmoid => {
                want(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Clamp(lo, hi) => {
                want(1)?;
                Ok(self.clamp(inputs[0], *lo, *hi))
            }
            OpKind::Scale(c) => {
                want(1)?;
                Ok(self.scale(inputs[0], *c))
            }
            OpKind::AddConst(c) => {
                want(1)?;
                Ok(self.add_const(inputs[0], *c))
            }
            OpKind::ConcatAxis(axis) => self.concat(*axis, inputs),
            OpKind::GatherRows(idx) => {
                want(1)?;
                self.gather_rows(inputs[0], idx)
            }
            OpKind::MaxReduceAxis(axis) => {
                want(1)?;
                self.max_reduce_axis(inputs[0], *axis)
            }
            OpKind::SumReduceAxis(axis) => {
                want(1)?;
                self.sum_reduce_axis(inputs[0], *axis)
            }
            OpKind::MeanReduce => {
                want(1)?;
                Ok(self.mean_reduce(inputs[0]))
            }
            OpKind::Sqnorm => {
                want(1)?;
                Ok(self.sqnorm(inputs[0]))
            }
            OpKind::Reshape(shape) => {
                want(1)?;
                self.reshape(inputs[0], shape)
            }
        }
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`; returns gradients for every node
    /// through which gradient was required to flow.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
                detail: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut Vec<Option<Vec<f64>>>, v: Value, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        add(slot);
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xd = self.nodes[x.0].value.data();
                let yd = self.nodes[id].value.data();
                let kind = *kind;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * xd[i],
                            UnaryKind::Log => 1.0 / xd[i],
                            UnaryKind::Sqrt => {
                                if yd[i] == 0.0 {
                                    0.0
                                } else {
                                    0.5 / yd[i]
                                }
                            }
                            UnaryKind::Recip => -yd[i] * yd[i],
                            UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (a, b, kind) = (*a, *b, *kind);
                let ashape = self.nodes[a.0].value.shape().to_vec();
                let bshape = self.nodes[b.0].value.shape().to_vec();
                let out_shape = self.nodes[id].value.shape().to_vec();
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                if ashape == bshape {
                    self.accumulate(grads, a, |ga| {
                        for i in 0..ga.len() {
                            ga[i] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[i],
                                BinaryKind::Mul => g[i] * bd[i],
                            };
                        }
                    });
                    self.accumulate(grads, b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] += match kind {
                                BinaryKind::Add => g[i],
                                BinaryKind::Sub => -g[i],
                                BinaryKind::Mul => g[i] * ad[i],
                            };
                        }
                    });
                } else {
                    let astr = broadcast_strides(&ashape, &out_shape);
                    let bstr = broadcast_strides(&bshape, &out_shape);
                    if self.nodes[a.0].needs_grad {
                        self.accumulate(grads, a, |ga| {
                            let mut it = Odometer::new(&out_shape);
                            for &gv in g {
                                let (ai, bi) = (it.offset(&astr), it.offset(&bstr));
                                ga[ai] += match kind {
                                    BinaryKind::Add | BinaryKind::Sub => gv,
                                    BinaryKind::Mul => gv * bd[bi],
                                };
                                it.step();
                            }
                        });
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(grads, b, |gb| {
                            let mut it = Odometer::new(&out_shape);
                            for &gv in g {
                                let (ai, bi) = (it.offset(&astr), it.offset(&bstr));
                                gb[bi] += match kind {
                                    BinaryKind::Add => gv,
                                    BinaryKind::Sub => -gv,
                                    BinaryKind::Mul => gv * ad[ai],
                                };
                                it.step();
                            }
                        });
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * c;
                    }
                });
            }
            Op::AddConst(x) => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i];
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.nodes[x.0].value.data();
                let (lo, hi) = (*lo, *hi);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > lo && xd[i] < hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    self.accumulate(grads, a, |ga| {
                        matmul_nt(g, &bd, m, n, k, ga);
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(grads, b, |gb| {
                        matmul_tn(&ad, g, m, k, n, gb);
                    });
                }
            }
            Op::Concat { axis, inputs } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut base = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis] * inner;
                    self.accumulate(grads, *v, |gv| {
                        for o in 0..outer {
                            for i in 0..len {
                                gv[o * len + i] += g[o * row + base + i];
                            }
                        }
                    });
                    base += len;
                }
            }
            Op::GatherRows(x, indices) => {
                let d = self.nodes[id].value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            gx[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::MaxReduceAxis { input, argmax } => {
                self.accumulate(grads, *input, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::SumReduceAxis { input, axis } => {
                let shape = self.nodes[input.0].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                self.accumulate(grads, *input, |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanReduce(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                self.accumulate(grads, *x, |gx| {
                    let gv = g[0] / n;
                    for v in gx.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Sqnorm(x) => {
                let xd = self.nodes[x.0].value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * xd[i] * g[0];
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i];
                    }
                });
            }
        }
    }
}

fn apply_binary(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

/// numpy-style broadcast result shape, or None if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ad == bd {
            ad
        } else if ad == 1 {
            bd
        } else if bd == 1 {
            ad
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides into `shape` for each output axis, 0 where broadcast.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let axis = pad + i;
        strides[axis] = if shape[i] == 1 && out_shape[axis] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Multi-index iterator over a shape that tracks offsets under given strides.
struct Odometer {
    shape: Vec<usize>,
    index: Vec<usize>,
}

impl Odometer {
    fn new(shape: &[usize]) -> Odometer {
        Odometer {
            shape: shape.to_vec(),
            index: vec![0; shape.len()],
        }
    }

    fn offset(&self, strides: &[usize]) -> usize {
        self.index
            .iter()
            .zip(strides)
            .map(|(&i, &s)| i * s)
            .sum()
    }

    fn step(&mut self) {
        for axis in (0..self.shape.len()).rev() {
            self.index[axis] += 1;
            if self.index[axis] < self.shape[axis] {
                return;
            }
            self.index[axis] = 0;
        }
    }
}

/// out += a (m x k) * b (k x n)
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (m x n) * b^T where b is (k x n); result is m x k.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

/// out += a^T * b where a is (m x k), b is (m x n); result is k x n.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_by_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_reduce_axis1() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 5.0], &[7.0, 2.0]]));
        let y = tape.max_reduce_axis(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    }

    #[test]
    fn max_reduce_tie_takes_lower_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![3.0, 3.0]).unwrap(), true);
        let y = tape.max_reduce_axis(x, 0).unwrap();
        let loss = tape.mean_reduce(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = tape.square(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_mean_relu() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap(), true);
        let r = tape.relu(x);
        let loss = tape.mean_reduce(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fanout_accumulates_both_branches() {
        // loss = x^2 + 3x  =>  dloss/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let a = tape.square(x);
        let b = tape.scale(x, 3.0);
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let b = tape.leaf(Tensor::new(&[2], vec![10.0, 20.0]).unwrap(), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.mean_reduce(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn broadcast_column_vector() {
        // [2,3] * [2,1]
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let c = tape.constant(t2(&[&[2.0], &[10.0]]));
        let y = tape.mul(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn concat_axis1_roundtrip_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0], &[2.0]]), true);
        let b = tape.leaf(t2(&[&[3.0, 4.0], &[5.0, 6.0]]), true);
        let y = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let loss = tape.sqnorm(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(grads.get(b).unwrap(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let y = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let loss = tape.mean_reduce(y);
        let grads = tape.backward(loss).unwrap();
        // row 0 gathered twice: each of its entries contributes 1/6 twice.
        let g = grads.get(x).unwrap();
        assert!((g[0] - 2.0 / 6.0).abs() < 1e-15);
        assert!((g[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn determinism_same_inputs_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[4], vec![0.3, -0.7, 1.1, 2.2]).unwrap(), true);
            let s = tape.sigmoid(x);
            let q = tape.square(s);
            let loss = tape.mean_reduce(q);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                grads.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
