use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Elu(usize),
    LeakyRelu(usize, f64),
    Softmax { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ScaleRows { x: usize, s: usize },
    SegmentMean { x: usize, seg: Vec<usize>, counts: Vec<usize> },
    SegmentSoftmax { x: usize, seg: Vec<usize> },
    Sum(usize),
    MeanRows(usize),
    Max { x: usize, argmax: usize },
    L2Norm(usize),
    SoftmaxXent { x: usize, target: usize, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::SegmentMean { .. } => "segment_mean",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::Max { .. } => "max",
            Op::L2Norm(_) => "l2_norm",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Computation record for one forward pass.
///
/// Not `Sync`: a tape belongs to the thread that builds it. Parallel work
/// uses one tape per sample.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Broadcast kind for a binary elementwise op.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.is_scalar() {
        Ok(Bcast::RhsScalar)
    } else if a.is_scalar() {
        Ok(Bcast::LhsScalar)
    } else {
        Err(shape_err(op, a, b))
    }
}

fn binary(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match mode {
        Bcast::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        }
        Bcast::RhsScalar => {
            let s = b.item();
            a.map(|x| f(x, s))
        }
        Bcast::LhsScalar => {
            let s = a.item();
            b.map(|y| f(s, y))
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Places a parameter on the tape. Repeated calls for the same id return
    /// the same node, so gradients from every use accumulate. Frozen
    /// parameters are recorded as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let op = if store.is_frozen(id) {
            Op::Leaf
        } else {
            Op::Param(id)
        };
        let value = store.get_arc(id);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value, op });
            Var {
                tape: self,
                id: nodes.len() - 1,
            }
        };
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Names of the recorded primitives in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// A tape can be differentiated once; a second call is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract("loss was recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if !root.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(contract("backward already ran on this tape"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));
        let mut out = Gradients::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut acc = |i: usize, t: Tensor| match &mut grads[i] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => out.insert(*pid, g),
                Op::MatMul(a, b) => {
                    acc(*a, matmul_nt(&g, val(*b)));
                    acc(*b, matmul_tn(val(*a), &g));
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (av, bv) = (val(*a), val(*b));
                    let mode = bcast("add", av, bv).expect("checked at forward");
                    let ga = if mode == Bcast::LhsScalar {
                        Tensor::full(av.shape(), g.sum())
                    } else {
                        g.clone()
                    };
                    let gb = if mode == Bcast::RhsScalar {
                        Tensor::full(bv.shape(), sign * g.sum())
                    } else {
                        g.map(|x| sign * x)
                    };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mode = bcast("mul", av, bv).expect("checked at forward");
                    match mode {
                        Bcast::Same => {
                            acc(*a, binary(&g, bv, Bcast::Same, |x, y| x * y));
                            acc(*b, binary(&g, av, Bcast::Same, |x, y| x * y));
                        }
                        Bcast::RhsScalar => {
                            let s = bv.item();
                            let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                            acc(*a, g.map(|x| x * s));
                            acc(*b, Tensor::full(bv.shape(), dot));
                        }
                        Bcast::LhsScalar => {
                            let s = av.item();
                            let dot: f64 = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                            acc(*a, Tensor::full(av.shape(), dot));
                            acc(*b, g.map(|x| x * s));
                        }
                    }
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Sigmoid(a) => acc(*a, binary(&g, y, Bcast::Same, |d, s| d * s * (1.0 - s))),
                Op::Tanh(a) => acc(*a, binary(&g, y, Bcast::Same, |d, t| d * (1.0 - t * t))),
                Op::Elu(a) => {
                    let x = val(*a);
                    let gx = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &d)| if xi > 0.0 { d } else { d * (yi + 1.0) })
                        .collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), gx).unwrap());
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a);
                    acc(*a, binary(&g, x, Bcast::Same, |d, xi| if xi > 0.0 { d } else { d * slope }));
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(y.shape(), *axis);
                    let mut gx = vec![0.0; y.numel()];
                    let (yd, gd) = (y.data(), g.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                            }
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = axis_split(y.shape(), *axis);
                    let total = y.shape()[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let plen = pv.shape()[*axis];
                        let mut gp = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + plen * inner]);
                        }
                        offset += plen;
                        acc(p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let (rows, cols, w) = (xv.rows(), xv.cols(), g.cols());
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..rows {
                        gx.data_mut()[r * cols + start..r * cols + start + w]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(*x, gx);
                }
                Op::SliceRows { x, start } => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    gx.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    acc(*x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    for (e, &r) in idx.iter().enumerate() {
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(e)) {
                            *d += s;
                        }
                    }
                    acc(*x, gx);
                }
                Op::ScaleRows { x, s } => {
                    let (xv, sv) = (val(*x), val(*s));
                    let cols = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    let mut gs = vec![0.0; sv.numel()];
                    for e in 0..xv.rows() {
                        let se = sv.data()[e];
                        let grow = g.row_slice(e);
                        let xrow = xv.row_slice(e);
                        gs[e] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[e * cols + c] = grow[c] * se;
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                    acc(*s, Tensor::new(sv.shape().to_vec(), gs).unwrap());
                }
                Op::SegmentMean { x, seg, counts } => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    for (e, &t) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[t] as f64;
                        for (c, gv) in g.row_slice(t).iter().enumerate() {
                            gx[e * cols + c] = gv * inv;
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                Op::SegmentSoftmax { x, seg } => {
                    let groups = group_members(seg);
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![0.0; y.numel()];
                    for members in groups.values() {
                        let dot: f64 = members.iter().map(|&e| gd[e] * yd[e]).sum();
                        for &e in members {
                            gx[e] = yd[e] * (gd[e] - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let n = xv.rows() as f64;
                    let mut gx = Vec::with_capacity(xv.numel());
                    for _ in 0..xv.rows() {
                        gx.extend(g.data().iter().map(|v| v / n));
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                Op::Max { x, argmax } => {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    gx.data_mut()[*argmax] = g.item();
                    acc(*x, gx);
                }
                Op::L2Norm(x) => {
                    let xv = val(*x);
                    let n = y.item();
                    let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                    acc(*x, xv.map(|v| v * scale));
                }
                Op::SoftmaxXent { x, target, probs } => {
                    let xv = val(*x);
                    let s = g.item();
                    let gx = probs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| s * (p - if i == *target { 1.0 } else { 0.0 }))
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
            }
        }
        // Parameters recorded on the tape but off every path to the loss.
        for (&pid, &node) in self.params.borrow().iter() {
            if let Op::Param(_) = nodes[node].op {
                if out.get(pid).is_none() {
                    out.insert(pid, Tensor::zeros(nodes[node].value.shape()));
                }
            }
        }
        Ok(out)
    }
}

fn group_members(seg: &[usize]) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (e, &s) in seg.iter().enumerate() {
        groups.entry(s).or_default().push(e);
    }
    groups
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(contract("operands were recorded on different tapes"))
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() {
            return Err(contract("transpose needs a rank-2 tensor"));
        }
        Ok(self.tape.push(x.transpose(), Op::Transpose(self.id)))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let mode = bcast(name, &a, &b)?;
        let v = binary(&a, &b, mode, f);
        Ok(self.tape.push(v, op))
    }

    /// Sum of equal shapes, or with one single-element operand broadcast.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        let one = self.tape.constant(Tensor::scalar(1.0));
        one.sub(self).expect("scalar broadcast")
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    /// ELU with unit scale.
    pub fn elu(self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.tape.push(v, Op::Elu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.tape.push(v, Op::LeakyRelu(self.id, slope))
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape().len() {
            return Err(contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        if len == 0 {
            return Err(contract("softmax over an empty axis"));
        }
        let mut out = vec![0.0; x.numel()];
        let mut src = vec![0.0; len];
        let mut dst = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..len {
                    src[k] = x.data()[(o * len + k) * inner + i];
                }
                softmax_slice(&src, &mut dst);
                for k in 0..len {
                    out[(o * len + k) * inner + i] = dst[k];
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(v, Op::Softmax { x: self.id, axis }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat needs at least one part"))?;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(contract(format!("concat axis {axis} out of range")));
        }
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &vals[0], v));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(shape, data)?;
        Ok(first.tape.push(
            v,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() || start > end || end > x.cols() {
            return Err(contract(format!(
                "column slice {start}..{end} invalid for shape {:?}",
                x.shape()
            )));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let v = Tensor::matrix(rows, end - start, data)?;
        Ok(self.tape.push(v, Op::SliceCols { x: self.id, start }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() || start > end || end > x.rows() {
            return Err(contract(format!(
                "row slice {start}..{end} invalid for shape {:?}",
                x.shape()
            )));
        }
        let cols = x.cols();
        let v = Tensor::matrix(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        Ok(self.tape.push(v, Op::SliceRows { x: self.id, start }))
    }

    pub fn row(self, r: usize) -> Result<Var<'t>> {
        self.slice_rows(r, r + 1)
    }

    /// Stacks the selected rows (repeats allowed) into a new matrix.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() {
            return Err(contract("gather_rows needs a matrix"));
        }
        let cols = x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= x.rows() {
                return Err(contract(format!("gather row {r} out of {} rows", x.rows())));
            }
            data.extend_from_slice(x.row_slice(r));
        }
        let v = Tensor::matrix(idx.len(), cols, data)?;
        Ok(self.tape.push(
            v,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiplies row `e` of an `m×d` matrix by entry `e` of an `m×1` column.
    pub fn scale_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (x, sv) = (self.value(), s.value());
        if !x.is_matrix() || sv.shape() != [x.rows(), 1] {
            return Err(shape_err("scale_rows", &x, &sv));
        }
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for (e, &se) in sv.data().iter().enumerate() {
            for v in &mut data[e * cols..(e + 1) * cols] {
                *v *= se;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::ScaleRows { x: self.id, s: s.id }))
    }

    /// Averages rows that share a segment id into an `n×d` matrix. Segments
    /// with no members produce zero rows.
    pub fn segment_mean(self, seg: &[usize], n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() || seg.len() != x.rows() {
            return Err(contract(format!(
                "segment_mean: {} segment ids for shape {:?}",
                seg.len(),
                x.shape()
            )));
        }
        let cols = x.cols();
        let mut counts = vec![0usize; n];
        for &s in seg {
            if s >= n {
                return Err(contract(format!("segment id {s} out of {n}")));
            }
            counts[s] += 1;
        }
        let mut data = vec![0.0; n * cols];
        for (e, &s) in seg.iter().enumerate() {
            let inv = 1.0 / counts[s] as f64;
            for (d, v) in data[s * cols..(s + 1) * cols].iter_mut().zip(x.row_slice(e)) {
                *d += v * inv;
            }
        }
        let v = Tensor::matrix(n, cols, data)?;
        Ok(self.tape.push(
            v,
            Op::SegmentMean {
                x: self.id,
                seg: seg.to_vec(),
                counts,
            },
        ))
    }

    /// Softmax over the entries of an `m×1` column that share a segment id.
    pub fn segment_softmax(self, seg: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() != [seg.len(), 1] {
            return Err(contract(format!(
                "segment_softmax: {} segment ids for shape {:?}",
                seg.len(),
                x.shape()
            )));
        }
        let mut out = vec![0.0; seg.len()];
        for members in group_members(seg).values() {
            let src: Vec<f64> = members.iter().map(|&e| x.data()[e]).collect();
            let mut dst = vec![0.0; src.len()];
            softmax_slice(&src, &mut dst);
            for (&e, d) in members.iter().zip(dst) {
                out[e] = d;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            v,
            Op::SegmentSoftmax {
                x: self.id,
                seg: seg.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id))
    }

    /// Column-wise mean over rows, giving `1×d`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_matrix() || x.rows() == 0 {
            return Err(contract(format!("mean_rows on shape {:?}", x.shape())));
        }
        let cols = x.cols();
        let n = x.rows() as f64;
        let mut data = vec![0.0; cols];
        for r in 0..x.rows() {
            for (d, v) in data.iter_mut().zip(x.row_slice(r)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= n;
        }
        Ok(self.tape.push(Tensor::row(&data), Op::MeanRows(self.id)))
    }

    /// Largest entry; the gradient goes to the first maximal position.
    pub fn max(self) -> Result<Var<'t>> {
        let x = self.value();
        let (argmax, best) = x
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((usize::MAX, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        if argmax == usize::MAX {
            return Err(contract("max of an empty tensor"));
        }
        Ok(self.tape.push(Tensor::scalar(best), Op::Max { x: self.id, argmax }))
    }

    pub fn l2_norm(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().norm());
        self.tape.push(v, Op::L2Norm(self.id))
    }

    /// `-log softmax(self)[target]` over all entries of the tensor.
    pub fn softmax_cross_entropy(self, target: usize) -> Result<Var<'t>> {
        let x = self.value();
        if target >= x.numel() {
            return Err(contract(format!(
                "target {target} out of range for {} logits",
                x.numel()
            )));
        }
        let mut probs = vec![0.0; x.numel()];
        softmax_slice(x.data(), &mut probs);
        let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x.data()[target];
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                x: self.id,
                target,
                probs,
            },
        ))
    }
}
