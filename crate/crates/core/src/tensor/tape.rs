//! Reverse-mode differentiation over a recorded operation list.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{wide_sum, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
pub enum Activation {
    Relu,
    Sigmoid,
    /// Negative slope 0.1.
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.1;

enum Op<T> {
    Leaf,
    Conv2d(ConvGeom),
    Binary(BinaryKind),
    Act(Activation),
    GlobalAvgPool,
    Dense,
    ConcatChannels,
    SliceChannels { start: usize },
    StackBatch,
    SelectBatch { index: usize },
    Reshape,
    Sum,
    Mean,
    Abs,
    Affine { scale: T },
    Gather { map: Rc<Vec<usize>> },
    CellMean(Rc<CellPartition>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Binary(_) => "elementwise",
            Op::Act(_) => "activation",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dense => "dense",
            Op::ConcatChannels => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::StackBatch => "stack_batch",
            Op::SelectBatch { .. } => "select_batch",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
            Op::Affine { .. } => "affine",
            Op::Gather { .. } => "gather",
            Op::CellMean(_) => "cell_mean",
        }
    }
}

/// Assignment of every pixel of a plane to a cell, plus each cell's member
/// pixels (repeats allowed). Used for per-patch averaging.
#[derive(Debug, Clone)]
pub struct CellPartition {
    pub cell_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Records executed operations so gradients can be propagated in reverse.
///
/// Nodes are appended in execution order, which is already a topological
/// order; `backward` walks them once from the end.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g.get(v.0).cloned().flatten())
    }

    /// Clears gradient buffers so `backward` may run again.
    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push(
            value,
            op,
            inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        ))
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// 2-D convolution with zero padding. `input` is NCHW, `kernel` OIHW,
    /// `bias` has O elements.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (n, cin, h, w) = x.dims4()?;
        let (cout, kin, kh, kw) = k.dims4()?;
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        if kin != cin {
            return Err(dim_err!(
                "conv2d input has {cin} channels but kernel expects {kin}"
            ));
        }
        if b.numel() != cout {
            return Err(dim_err!(
                "conv2d bias has {} entries, need {cout}",
                b.numel()
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err!(
                "conv2d padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&g, x.data(), k.data(), b.data());
        let out = Tensor::new(vec![n, cout, g.ho, g.wo], out)?;
        self.record(out, Op::Conv2d(g), &[input, kernel, bias])
    }

    /// Pointwise binary op. `b` must match `a` or be 1 along any non-leading axis.
    pub fn elementwise(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        check_broadcast(av.shape(), bv.shape())?;
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect()
        } else {
            let offs = kernels::broadcast_offsets(av.shape(), bv.shape());
            av.data()
                .iter()
                .zip(&offs)
                .map(|(&x, &o)| apply_binary(kind, x, bv.data()[o]))
                .collect()
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.record(out, Op::Binary(kind), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Div, a, b)
    }

    pub fn activation(&self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| apply_activation(kind, v));
        self.record(out, Op::Act(kind), &[x])
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn leaky_relu(&self, x: Var) -> Result<Var> {
        self.activation(Activation::LeakyRelu, x)
    }

    /// Per-channel spatial mean: NCHW -> NC11.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(dim_err!("global_avg_pool on empty spatial extent"));
        }
        let inv = T::one() / T::lit(hw as f64);
        let data = xv
            .data()
            .chunks(hw)
            .map(|plane| wide_sum(plane) * inv)
            .collect();
        let out = Tensor::new(vec![n, c, 1, 1], data)?;
        self.record(out, Op::GlobalAvgPool, &[x])
    }

    /// Affine map `x · Wᵀ + b` with `x` NC, `W` KC, `b` K.
    pub fn dense(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (n, c) = dims2(&xv)?;
        let (k, wc) = dims2(&wv)?;
        if wc != c {
            return Err(dim_err!(
                "dense input has {c} features, weight expects {wc}"
            ));
        }
        if bv.numel() != k {
            return Err(dim_err!("dense bias has {} entries, need {k}", bv.numel()));
        }
        let mut data: Vec<T> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
        T::gemm(
            n,
            k,
            c,
            xv.data(),
            false,
            wv.data(),
            true,
            &mut data,
            T::one(),
        );
        let out = Tensor::new(vec![n, k], data)?;
        self.record(out, Op::Dense, &[x, weight, bias])
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_channels of zero parts"));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = values[0].dims4()?;
        let mut total_c = 0;
        for v in &values {
            let (pn, pc, ph, pw) = v.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err!(
                    "concat_channels part {:?} does not match N={n} H={h} W={w}",
                    v.shape()
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], data)?;
        self.record(out, Op::ConcatChannels, parts)
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if start + len > c {
            return Err(dim_err!(
                "slice {start}..{} exceeds {c} channels",
                start + len
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&xv.data()[base..base + len * hw]);
        }
        let out = Tensor::new(vec![n, len, h, w], data)?;
        self.record(out, Op::SliceChannels { start }, &[x])
    }

    /// Concatenates along the leading (batch) axis.
    pub fn stack_batch(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("stack_batch of zero parts"));
        }
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let tail = values[0].shape().get(1..).unwrap_or(&[]).to_vec();
        if values[0].rank() == 0 {
            return Err(dim_err!("stack_batch needs rank >= 1"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &values {
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(dim_err!(
                    "stack_batch part {:?} does not match trailing {:?}",
                    v.shape(),
                    tail
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        self.record(out, Op::StackBatch, parts)
    }

    /// Item `index` of the leading axis, keeping a leading extent of 1.
    pub fn select_batch(&self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || index >= xv.shape()[0] {
            return Err(dim_err!(
                "select_batch {index} out of range for {:?}",
                xv.shape()
            ));
        }
        let stride = xv.numel() / xv.shape()[0];
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let data = xv.data()[index * stride..(index + 1) * stride].to_vec();
        let out = Tensor::new(shape, data)?;
        self.record(out, Op::SelectBatch { index }, &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        self.record(out, Op::Reshape, &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum, &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(dim_err!("mean of empty tensor"));
        }
        let out = Tensor::scalar(xv.sum() / T::lit(xv.numel() as f64));
        self.record(out, Op::Mean, &[x])
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.abs());
        self.record(out, Op::Abs, &[x])
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.record(out, Op::Affine { scale }, &[x])
    }

    pub fn scale(&self, x: Var, factor: T) -> Result<Var> {
        self.affine(x, factor, T::zero())
    }

    /// Per-plane pixel gather: `out[n, c, p] = x[n, c, map[p]]` with output
    /// spatial extent `out_hw`. Gradients scatter-add back through `map`.
    pub fn gather(&self, x: Var, map: Rc<Vec<usize>>, out_hw: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (ho, wo) = out_hw;
        if map.len() != ho * wo {
            return Err(dim_err!(
                "gather map has {} entries, need {}",
                map.len(),
                ho * wo
            ));
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= h * w) {
            return Err(dim_err!("gather index {bad} outside {h}x{w} plane"));
        }
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in xv.data().chunks(h * w) {
            data.extend(map.iter().map(|&i| plane[i]));
        }
        let out = Tensor::new(vec![n, c, ho, wo], data)?;
        self.record(out, Op::Gather { map }, &[x])
    }

    /// Replaces every pixel by the mean over the members of its cell.
    pub fn cell_mean(&self, x: Var, cells: Rc<CellPartition>) -> Result<Var> {
        let xv = self.value(x);
        let (_, _, h, w) = xv.dims4()?;
        if cells.cell_of.len() != h * w {
            return Err(dim_err!(
                "cell partition covers {} pixels, plane has {}",
                cells.cell_of.len(),
                h * w
            ));
        }
        if cells
            .members
            .iter()
            .any(|m| m.is_empty() || m.iter().any(|&i| i >= h * w))
        {
            return Err(dim_err!(
                "cell partition has empty cells or out-of-range members"
            ));
        }
        let mut data = Vec::with_capacity(xv.numel());
        let mut means = vec![T::zero(); cells.members.len()];
        for plane in xv.data().chunks(h * w) {
            for (m, members) in means.iter_mut().zip(&cells.members) {
                *m = T::lit(
                    members.iter().map(|&i| plane[i].as_f64()).sum::<f64>() / members.len() as f64,
                );
            }
            data.extend(cells.cell_of.iter().map(|&c| means[c]));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.record(out, Op::CellMean(cells), &[x])
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates gradients of the scalar `loss` to every node that depends on
    /// a `requires_grad` leaf. Fails if called twice without
    /// [`Tape::reset_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let seed_node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss variable not on this tape".into()))?;
        if seed_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(seed_node.value.shape().to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let want: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let input_grads = backward_op(&node.op, &ins, &node.value, &g, &want)?;
            for ((&i, gi), w) in node.inputs.iter().zip(input_grads).zip(want) {
                if !w {
                    continue;
                }
                let Some(gi) = gi else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            // Intermediate gradients are not retained, only leaves.
            grads[id] = None;
        }
        // Leaves that take part in the graph but got no gradient flow get zeros.
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.inputs.is_empty() && grads[id].is_none() && id <= loss.0 {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(dim_err!("expected rank-2 tensor, got {:?}", s)),
    }
}

fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
    let ok = a.len() == b.len()
        && a.iter()
            .zip(b)
            .enumerate()
            .all(|(ax, (&x, &y))| x == y || (ax > 0 && y == 1));
    if ok {
        Ok(())
    } else {
        Err(dim_err!("cannot broadcast {:?} onto {:?}", b, a))
    }
}

fn apply_binary<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn apply_activation<T: Scalar>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Activation::LeakyRelu => {
            if v > T::zero() {
                v
            } else {
                v * T::lit(LEAKY_SLOPE)
            }
        }
    }
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    want: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let same = |data: Vec<T>, like: &Tensor<T>| Tensor::new(like.shape().to_vec(), data);
    let grads = match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d(geom) => {
            let (di, dk, db) = kernels::conv2d_backward(
                geom,
                ins[0].data(),
                ins[1].data(),
                g.data(),
                [want[0], want[1], want[2]],
            );
            vec![
                di.map(|d| same(d, ins[0])).transpose()?,
                dk.map(|d| same(d, ins[1])).transpose()?,
                db.map(|d| same(d, ins[2])).transpose()?,
            ]
        }
        Op::Binary(kind) => {
            let (a, b) = (ins[0], ins[1]);
            let offs =
                (a.shape() != b.shape()).then(|| kernels::broadcast_offsets(a.shape(), b.shape()));
            let b_at = |i: usize| match &offs {
                Some(o) => b.data()[o[i]],
                None => b.data()[i],
            };
            let ga = want[0].then(|| {
                let d: Vec<T> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.data().to_vec(),
                    BinaryKind::Mul => g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * b_at(i))
                        .collect(),
                    BinaryKind::Div => g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi / b_at(i))
                        .collect(),
                };
                same(d, a)
            });
            let gb = want[1].then(|| {
                let full: Vec<T> = match kind {
                    BinaryKind::Add => g.data().to_vec(),
                    BinaryKind::Sub => g.data().iter().map(|&gi| -gi).collect(),
                    BinaryKind::Mul => g
                        .data()
                        .iter()
                        .zip(a.data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect(),
                    BinaryKind::Div => g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let bi = b_at(i);
                            -gi * a.data()[i] / (bi * bi)
                        })
                        .collect(),
                };
                let d = match &offs {
                    Some(o) => kernels::reduce_to(&full, o, b.numel()),
                    None => full,
                };
                same(d, b)
            });
            vec![ga.transpose()?, gb.transpose()?]
        }
        Op::Act(kind) => {
            let x = ins[0];
            let d: Vec<T> = match kind {
                Activation::Relu => x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect(),
                Activation::LeakyRelu => x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| {
                        if v > T::zero() {
                            gi
                        } else {
                            gi * T::lit(LEAKY_SLOPE)
                        }
                    })
                    .collect(),
                Activation::Sigmoid => out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gi)| gi * s * (T::one() - s))
                    .collect(),
            };
            vec![Some(same(d, x)?)]
        }
        Op::GlobalAvgPool => {
            let x = ins[0];
            let (_, _, h, w) = x.dims4()?;
            let inv = T::one() / T::lit((h * w) as f64);
            let d = g
                .data()
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi * inv, h * w))
                .collect();
            vec![Some(same(d, x)?)]
        }
        Op::Dense => {
            let (x, w) = (ins[0], ins[1]);
            let (n, c) = dims2(x)?;
            let k = w.shape()[0];
            let dx = want[0].then(|| {
                let mut d = vec![T::zero(); n * c];
                T::gemm(n, c, k, g.data(), false, w.data(), false, &mut d, T::zero());
                same(d, x)
            });
            let dw = want[1].then(|| {
                let mut d = vec![T::zero(); k * c];
                T::gemm(k, c, n, g.data(), true, x.data(), false, &mut d, T::zero());
                same(d, w)
            });
            let db = want[2].then(|| {
                let mut d = vec![T::zero(); k];
                for row in g.data().chunks(k) {
                    for (acc, &v) in d.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                same(d, ins[2])
            });
            vec![dx.transpose()?, dw.transpose()?, db.transpose()?]
        }
        Op::ConcatChannels => {
            let (n, total_c, h, w) = g.dims4()?;
            let hw = h * w;
            let mut offset = 0;
            let mut out_grads = Vec::with_capacity(ins.len());
            for (p, part) in ins.iter().enumerate() {
                let c = part.shape()[1];
                if want[p] {
                    let mut d = Vec::with_capacity(part.numel());
                    for b in 0..n {
                        let base = (b * total_c + offset) * hw;
                        d.extend_from_slice(&g.data()[base..base + c * hw]);
                    }
                    out_grads.push(Some(same(d, part)?));
                } else {
                    out_grads.push(None);
                }
                offset += c;
            }
            out_grads
        }
        Op::SliceChannels { start } => {
            let x = ins[0];
            let (n, c, h, w) = x.dims4()?;
            let len = g.shape()[1];
            let hw = h * w;
            let mut d = vec![T::zero(); x.numel()];
            for b in 0..n {
                let dst = (b * c + start) * hw;
                let src = b * len * hw;
                d[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
            }
            vec![Some(same(d, x)?)]
        }
        Op::StackBatch => {
            let mut offset = 0;
            let mut out_grads = Vec::with_capacity(ins.len());
            for (p, part) in ins.iter().enumerate() {
                let len = part.numel();
                out_grads.push(if want[p] {
                    Some(same(g.data()[offset..offset + len].to_vec(), part)?)
                } else {
                    None
                });
                offset += len;
            }
            out_grads
        }
        Op::SelectBatch { index } => {
            let x = ins[0];
            let stride = g.numel();
            let mut d = vec![T::zero(); x.numel()];
            d[index * stride..(index + 1) * stride].copy_from_slice(g.data());
            vec![Some(same(d, x)?)]
        }
        Op::Reshape => vec![Some(same(g.data().to_vec(), ins[0])?)],
        Op::Sum => {
            let gi = g.data()[0];
            vec![Some(Tensor::full(ins[0].shape().to_vec(), gi))]
        }
        Op::Mean => {
            let gi = g.data()[0] / T::lit(ins[0].numel() as f64);
            vec![Some(Tensor::full(ins[0].shape().to_vec(), gi))]
        }
        Op::Abs => {
            let x = ins[0];
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gi)| {
                    if v > T::zero() {
                        gi
                    } else if v < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(same(d, x)?)]
        }
        Op::Affine { scale } => vec![Some(g.map(|v| v * *scale))],
        Op::Gather { map } => {
            let x = ins[0];
            let (_, _, h, w) = x.dims4()?;
            let mut d = vec![T::zero(); x.numel()];
            for (dst, src) in d.chunks_mut(h * w).zip(g.data().chunks(map.len())) {
                for (&i, &v) in map.iter().zip(src) {
                    dst[i] = dst[i] + v;
                }
            }
            vec![Some(same(d, x)?)]
        }
        Op::CellMean(cells) => {
            let x = ins[0];
            let hw = cells.cell_of.len();
            let mut d = vec![T::zero(); x.numel()];
            let mut cell_sums = vec![T::zero(); cells.members.len()];
            for (dst, src) in d.chunks_mut(hw).zip(g.data().chunks(hw)) {
                cell_sums.iter_mut().for_each(|s| *s = T::zero());
                for (&c, &v) in cells.cell_of.iter().zip(src) {
                    cell_sums[c] = cell_sums[c] + v;
                }
                for (members, &s) in cells.members.iter().zip(&cell_sums) {
                    let share = s / T::lit(members.len() as f64);
                    for &i in members {
                        dst[i] = dst[i] + share;
                    }
                }
            }
            vec![Some(same(d, x)?)]
        }
    };
    Ok(grads)
}
