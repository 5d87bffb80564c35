//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes in execution order, so node ids are already a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use super::kernels::{self, Exec};
use super::{axis_extents, broadcast_shapes, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

/// Pointwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

impl ElementwiseKind {
    fn split(self) -> std::result::Result<BinaryKind, UnaryKind> {
        match self {
            ElementwiseKind::Add => Ok(BinaryKind::Add),
            ElementwiseKind::Sub => Ok(BinaryKind::Sub),
            ElementwiseKind::Mul => Ok(BinaryKind::Mul),
            ElementwiseKind::Div => Ok(BinaryKind::Div),
            ElementwiseKind::Sigmoid => Err(UnaryKind::Sigmoid),
            ElementwiseKind::Tanh => Err(UnaryKind::Tanh),
            ElementwiseKind::Relu => Err(UnaryKind::Relu),
            ElementwiseKind::Abs => Err(UnaryKind::Abs),
        }
    }
}

/// How an operand maps onto a broadcast output.
#[derive(Debug)]
enum Bcast {
    Same,
    /// Operand shape equals the trailing axes of the output.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], input: &[usize], in_len: usize) -> Self {
        if out == input {
            return Bcast::Same;
        }
        let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
        let core = &input[first..];
        if core.is_empty() {
            return Bcast::Cycle(1);
        }
        if core.len() <= out.len() && &out[out.len() - core.len()..] == core {
            return Bcast::Cycle(in_len);
        }
        // General case: explicit index map with zero strides on broadcast axes.
        let n = out.len();
        let mut strides = vec![0usize; n];
        let mut acc = 1;
        for (i, &d) in input.iter().enumerate().rev() {
            let oi = n - input.len() + i;
            strides[oi] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..n).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Debug)]
enum MatMulLayout {
    /// Right operand is 2-D; left batch axes fold into rows.
    Flat { rows: usize, k: usize, n: usize },
    /// Left operand is 2-D and shared across the right operand's batch.
    SharedLeft { batch: usize, m: usize, k: usize, n: usize },
    /// Matching batch axes on both sides.
    Paired { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, layout: MatMulLayout },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, a: Var },
    Scale { a: Var, factor: f64 },
    Softmax { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    MaxOf { inputs: Vec<Var> },
    Mean { a: Var },
    AbsSum { a: Var },
    SumAxis { a: Var, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(&contribution)
            .for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

/// Move `[outer, mid, inner]` to `[mid, outer, inner]`.
fn swap_outer(src: &[f64], outer: usize, mid: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for m in 0..mid {
            let s = (o * mid + m) * inner;
            let d = (m * outer + o) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default_mode())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two axes.
    ///
    /// Supported batch layouts: right operand 2-D (left batch axes fold into
    /// rows), left operand 2-D (shared across the right batch), or identical
    /// batch axes on both sides.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let exec = self.exec;
        let av = self.value(a).data();
        let bv = self.value(b).data();

        let (data, shape, layout) = if batch_b.is_empty() {
            let rows = av.len() / k;
            let mut out = vec![0.0; rows * n];
            kernels::gemm_nn(av, bv, rows, k, n, &mut out, exec);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (out, shape, MatMulLayout::Flat { rows, k, n })
        } else if batch_a.is_empty() {
            let batch: usize = batch_b.iter().product();
            // [batch, k, n] -> [k, batch*n] so one product covers the batch.
            let wide = swap_outer(bv, batch, k, n);
            let mut prod = vec![0.0; m * batch * n];
            kernels::gemm_nn(av, &wide, m, k, batch * n, &mut prod, exec);
            let out = swap_outer(&prod, m, batch, n);
            let mut shape = batch_b.to_vec();
            shape.extend([m, n]);
            (out, shape, MatMulLayout::SharedLeft { batch, m, k, n })
        } else if batch_a == batch_b {
            let batch: usize = batch_a.iter().product();
            let mut out = vec![0.0; batch * m * n];
            kernels::batched(&mut out, batch, m * n, batch * m * k * n, exec, |i, o| {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                kernels::gemm_nn(ai, bi, m, k, n, o, Exec::Sequential);
            });
            let mut shape = batch_a.to_vec();
            shape.extend([m, n]);
            (out, shape, MatMulLayout::Paired { batch, m, k, n })
        } else {
            return Err(err());
        };
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, layout }, rg))
    }

    /// Pointwise operation. Binary kinds require `b` and broadcast numpy-style.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.split(), b) {
            (Ok(bk), Some(b)) => self.binary(bk, a, b),
            (Err(uk), None) => Ok(self.unary(uk, a)),
            (Ok(_), None) => Err(Error::contract(format!("{kind:?} needs two operands"))),
            (Err(_), Some(_)) => Err(Error::contract(format!("{kind:?} takes one operand"))),
        }
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shapes(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let pa = Bcast::plan(&shape, &sa, av.len());
            let pb = Bcast::plan(&shape, &sb, bv.len());
            let total: usize = shape.iter().product();
            (0..total)
                .map(|i| f(av[pa.index(i)], bv[pb.index(i)]))
                .collect()
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Abs => f64::abs,
        };
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Max-shifted softmax of a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_values(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Concatenate along `axis`. A single input is returned unchanged.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} out of bounds for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { a, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Elementwise maximum over equally shaped tensors; ties go to the
    /// earliest input.
    pub fn reduce_max_over_list(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("max over an empty list"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        let mut data = self.value(first).data().to_vec();
        for &v in &inputs[1..] {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "max over list: {:?} differs from {shape:?}",
                    t.shape()
                )));
            }
            for (d, &x) in data.iter_mut().zip(t.data()) {
                if x > *d {
                    *d = x;
                }
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MaxOf {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(mean), Op::Mean { a }, rg)
    }

    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x.abs()).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::AbsSum { a }, rg)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SumAxis { a, axis }, rg))
    }

    /// Reverse sweep from a scalar `seed`.
    ///
    /// Every trainable leaf gets a gradient; leaves the seed does not reach
    /// get zeros.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        if self.value(seed).numel() != 1 {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape(seed)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![1.0]);
        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let shape = node.value.shape().to_vec();
                    Some(match grads[id].take() {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let exec = self.exec;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, layout } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                match *layout {
                    MatMulLayout::Flat { rows, k, n } => {
                        if self.wants(*a) {
                            let mut ga = vec![0.0; rows * k];
                            kernels::gemm_nt(g, bv, rows, n, k, &mut ga, exec);
                            accumulate(&mut grads[a.0], ga);
                        }
                        if self.wants(*b) {
                            let mut gb = vec![0.0; k * n];
                            kernels::gemm_tn(av, g, k, rows, n, &mut gb, exec);
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                    MatMulLayout::SharedLeft { batch, m, k, n } => {
                        let g_wide = swap_outer(g, batch, m, n);
                        if self.wants(*a) {
                            let b_wide = swap_outer(bv, batch, k, n);
                            let mut ga = vec![0.0; m * k];
                            kernels::gemm_nt(&g_wide, &b_wide, m, batch * n, k, &mut ga, exec);
                            accumulate(&mut grads[a.0], ga);
                        }
                        if self.wants(*b) {
                            let mut gb_wide = vec![0.0; k * batch * n];
                            kernels::gemm_tn(av, &g_wide, k, m, batch * n, &mut gb_wide, exec);
                            accumulate(&mut grads[b.0], swap_outer(&gb_wide, k, batch, n));
                        }
                    }
                    MatMulLayout::Paired { batch, m, k, n } => {
                        if self.wants(*a) {
                            let mut ga = vec![0.0; batch * m * k];
                            kernels::batched(&mut ga, batch, m * k, batch * m * k * n, exec, |i, o| {
                                let gi = &g[i * m * n..(i + 1) * m * n];
                                let bi = &bv[i * k * n..(i + 1) * k * n];
                                kernels::gemm_nt(gi, bi, m, n, k, o, Exec::Sequential);
                            });
                            accumulate(&mut grads[a.0], ga);
                        }
                        if self.wants(*b) {
                            let mut gb = vec![0.0; batch * k * n];
                            kernels::batched(&mut gb, batch, k * n, batch * m * k * n, exec, |i, o| {
                                let ai = &av[i * m * k..(i + 1) * m * k];
                                let gi = &g[i * m * n..(i + 1) * m * n];
                                kernels::gemm_tn(ai, gi, k, m, n, o, Exec::Sequential);
                            });
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (av, bv) = (ta.data(), tb.data());
                let pa = Bcast::plan(out_shape, ta.shape(), av.len());
                let pb = Bcast::plan(out_shape, tb.shape(), bv.len());
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (pa.index(i), pb.index(i));
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bv[ib],
                            BinaryKind::Div => gi / bv[ib],
                        };
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (pa.index(i), pb.index(i));
                        gb[ib] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[ia],
                            BinaryKind::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
                        };
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| {
                        gi * match kind {
                            UnaryKind::Sigmoid => yi * (1.0 - yi),
                            UnaryKind::Tanh => 1.0 - yi * yi,
                            UnaryKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Scale { a, factor } => {
                accumulate(&mut grads[a.0], g.iter().map(|x| x * factor).collect());
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                let ga = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Reshape { a } => accumulate(&mut grads[a.0], g.to_vec()),
            Op::MaxOf { inputs } => {
                let y = node.value.data();
                let mut claimed = vec![false; y.len()];
                for v in inputs {
                    let x = self.value(*v).data();
                    let mut gv = vec![0.0; y.len()];
                    for i in 0..y.len() {
                        if !claimed[i] && x[i] == y[i] {
                            claimed[i] = true;
                            gv[i] = g[i];
                        }
                    }
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            Op::AbsSum { a } => {
                let ga = self
                    .value(*a)
                    .data()
                    .iter()
                    .map(|&x| g[0] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
        }
    }
}

/// Softmax of a 1-D tensor outside any tape.
pub(crate) fn softmax_values(t: &Tensor) -> Result<Tensor> {
    if t.ndim() != 1 {
        return Err(Error::shape(format!("softmax expects a vector, got {:?}", t.shape())));
    }
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = t.data().iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(Tensor::vector(exp.into_iter().map(|e| e / sum).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let x = tape.constant(mat(2, 2, &[3., 4., 5., 6.]));
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4., 5., 6.]);

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let y = tape.matmul(z, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let a = tape.constant(mat(2, 2, &[1., 2., 3., 4.]));
        let b = tape.constant(mat(2, 1, &[5., 6.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn batched_layouts_match_per_sample_products() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let x = Tensor::new(vec![4, 3, 2], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let av = tape.constant(a.clone());
        let xv = tape.constant(x.clone());
        let y = tape.matmul(av, xv).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 2]);
        for b in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    let expect: f64 = (0..3).map(|p| a.at(&[i, p]) * x.at(&[b, p, j])).sum();
                    assert_abs_diff_eq!(tape.value(y).at(&[b, i, j]), expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).item(), 0.0);
        let a = tape.constant(Tensor::vector(vec![2., 3.]));
        let b = tape.constant(Tensor::vector(vec![4., 5.]));
        let m = tape.elementwise(ElementwiseKind::Mul, a, Some(b)).unwrap();
        assert_eq!(tape.value(m).data(), &[8., 15.]);
        assert!(tape.elementwise(ElementwiseKind::Add, a, None).is_err());
        let c = tape.constant(Tensor::vector(vec![1., 2., 3.]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0., 0., 0.]));
        let s = tape.softmax(v).unwrap();
        for &x in tape.value(s).data() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let c = 0.7;
        let v = tape.constant(Tensor::vector(vec![c, c + 3f64.ln()]));
        let s = tape.softmax(v).unwrap();
        assert_abs_diff_eq!(tape.value(s).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(s).data()[1], 0.75, epsilon = 1e-12);
        let v = tape.constant(Tensor::vector(vec![1000., 1000.]));
        let s = tape.softmax(v).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let v = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert!(matches!(tape.softmax(v), Err(Error::Numeric(_))));
    }

    #[test]
    fn structural_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1., 5.]));
        let b = tape.constant(Tensor::vector(vec![3., 2.]));
        let m = tape.reduce_max_over_list(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[3., 5.]);

        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(tape.concat(&[x], 0).unwrap(), x);

        let v = tape.constant(Tensor::vector(vec![-1., 2., -3.]));
        let s = tape.abs_sum(v);
        assert_eq!(tape.value(s).item(), 6.0);

        assert!(matches!(tape.slice(x, 1, 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(7.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.scale(x, 4.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn max_ties_route_to_first_input() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1., 2.]));
        let b = tape.param(Tensor::vector(vec![1., 3.]));
        let m = tape.reduce_max_over_list(&[a, b]).unwrap();
        let s = tape.abs_sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1., 0.]);
        assert_eq!(g.get(b).unwrap().data(), &[0., 1.]);
    }
}
