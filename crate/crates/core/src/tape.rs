//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! Every differentiable computation in the crate is built from the sixteen
//! primitives below. A [`Tape`] records one primitive application per node;
//! [`Tape::backward`] replays the records in strict reverse order and
//! returns gradients for every grad-tracked leaf.
//!
//! Design constraints the rest of the crate relies on:
//! - outputs of every primitive are checked finite; non-finite values error
//!   out at the op that produced them,
//! - binary ops require exact shape equality; broadcasting is always the
//!   explicit `Broadcast` primitive,
//! - all reductions run in a fixed sequential order, so results are bitwise
//!   reproducible regardless of outer parallelism.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_2d, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: u32,
}

/// The primitive vocabulary. Shape rules are documented per variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise sum; both inputs share one shape.
    Add,
    /// Elementwise (Hadamard) product; both inputs share one shape.
    Mul,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Rank-2 axis swap.
    Transpose,
    /// Reinterpret the payload under a new shape of equal element count.
    Reshape(Vec<usize>),
    /// Concatenate along `axis`; all other axes must match.
    Concat(usize),
    /// Contiguous window along `axis`.
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// `axis: None` reduces all axes to a scalar; `Some(a)` keeps axis `a`
    /// with length 1.
    Sum(Option<usize>),
    /// Arithmetic mean with the same axis convention as `Sum`.
    Mean(Option<usize>),
    Exp,
    Log,
    Sigmoid,
    /// `x * sigmoid(x)`.
    Silu,
    /// Softmax over the last axis, max-subtracted for stability.
    Softmax,
    /// Elementwise power with a constant exponent.
    Power(f64),
    /// Right-aligned expansion to a target shape: the input shape must match
    /// a suffix of the target up to 1-sized axes.
    Broadcast(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum(_) => "sum",
            Primitive::Mean(_) => "mean",
            Primitive::Exp => "exponential",
            Primitive::Log => "logarithm",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Silu => "silu",
            Primitive::Softmax => "softmax",
            Primitive::Power(_) => "power",
            Primitive::Broadcast(_) => "broadcast",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,

}

struct Record {
    prim: Primitive,
    inputs: Vec<u32>,
    output: u32,
}

/// Gradients keyed by leaf identity, as returned by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    by_index: BTreeMap<u32, Tensor>,
}

impl Gradients {
    /// Gradient for a grad-tracked leaf. `None` for nodes that are not
    /// tracked leaves of the originating tape.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        if node.tape != self.tape {
            return None;
        }
        self.by_index.get(&node.index)
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }
}

/// Recording arena for one forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    records: Vec<Record>,
    tracked_leaves: Vec<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            records: Vec::new(),
            tracked_leaves: Vec::new(),
        }
    }

    /// Number of values on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded primitive applications.
    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Installs a leaf value. Tracked leaves receive gradients from
    /// [`Tape::backward`].
    pub fn leaf(&mut self, mut value: Tensor, track: bool) -> NodeId {
        value.set_grad_tracked(track);
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad: track,

        });
        if track {
            self.tracked_leaves.push(index);
        }
        NodeId {
            tape: self.id,
            index,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        assert_eq!(node.tape, self.id, "node from a different tape");
        &self.nodes[node.index as usize].value
    }

    fn check_node(&self, node: NodeId) -> Result<usize> {
        if node.tape != self.id || node.index as usize >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(node.index as usize)
    }

    /// Applies one primitive. A record is appended only when some input is
    /// grad-tracked; untracked computations leave no backward work behind.
    pub fn apply_primitive(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let mut idxs = Vec::with_capacity(inputs.len());
        for &n in inputs {
            idxs.push(self.check_node(n)? as u32);
        }
        let tensors: Vec<&Tensor> = idxs
            .iter()
            .map(|&i| &self.nodes[i as usize].value)
            .collect();
        let mut out = eval_primitive(&prim, &tensors)?;
        if !out.all_finite() {
            return Err(Error::NonFinite {
                op: prim.name().to_string(),
            });
        }
        let requires = idxs
            .iter()
            .any(|&i| self.nodes[i as usize].requires_grad);
        out.set_grad_tracked(requires);
        let output = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: out,
            requires_grad: requires,

        });
        if requires {
            self.records.push(Record {
                prim,
                inputs: idxs,
                output,
            });
        }
        Ok(NodeId {
            tape: self.id,
            index: output,
        })
    }

    /// String-identified dispatch for the parameterless primitives; `sum`
    /// and `mean` reduce all axes. Names outside the primitive vocabulary
    /// (`argmax`, ...) are rejected, which is how non-differentiable
    /// constructs surface as errors rather than silent wrong gradients.
    pub fn apply_named(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let prim = match name {
            "add" => Primitive::Add,
            "multiply" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "sum" => Primitive::Sum(None),
            "mean" => Primitive::Mean(None),
            "exponential" => Primitive::Exp,
            "logarithm" => Primitive::Log,
            "sigmoid" => Primitive::Sigmoid,
            "silu" => Primitive::Silu,
            "softmax" => Primitive::Softmax,
            "reshape" | "concat" | "slice" | "power" | "broadcast" => {
                return Err(Error::InvalidArgument(format!(
                    "primitive `{name}` takes parameters; use the typed API"
                )))
            }
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        };
        self.apply_primitive(prim, inputs)
    }

    /// Reverse pass from a scalar loss. Returns one gradient per
    /// grad-tracked leaf; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_idx = self.check_node(loss)?;
        let loss_val = &self.nodes[loss_idx].value;
        if !loss_val.is_scalar() {
            return Err(Error::LossNotScalar(loss_val.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(Tensor::scalar(1.0));

        for rec in self.records.iter().rev() {
            // Every node is the output of at most one record, so its grad is
            // complete (and dead) once that record is processed.
            let Some(gout) = grads[rec.output as usize].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = rec
                .inputs
                .iter()
                .map(|&i| &self.nodes[i as usize].value)
                .collect();
            let out_val = &self.nodes[rec.output as usize].value;
            let needs: Vec<bool> = rec
                .inputs
                .iter()
                .map(|&i| self.nodes[i as usize].requires_grad)
                .collect();
            let contribs = backward_rule(&rec.prim, &inputs, out_val, &gout, &needs)?;
            for (slot, contrib) in rec.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    accumulate(&mut grads[*slot as usize], c);
                }
            }
        }

        let mut by_index = BTreeMap::new();
        for &leaf in &self.tracked_leaves {
            let g = grads[leaf as usize]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf as usize].value.shape()));
            by_index.insert(leaf, g);
        }
        Ok(Gradients {
            tape: self.id,
            by_index,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
    }
}

// ---- convenience wrappers -------------------------------------------------

impl Tape {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply_primitive(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply_primitive(Primitive::Concat(axis), inputs)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply_primitive(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Sum(None), &[a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply_primitive(Primitive::Sum(Some(axis)), &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Mean(None), &[a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply_primitive(Primitive::Mean(Some(axis)), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Sigmoid, &[a])
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Silu, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply_primitive(Primitive::Softmax, &[a])
    }

    pub fn power(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        self.apply_primitive(Primitive::Power(exponent), &[a])
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply_primitive(Primitive::Broadcast(shape.to_vec()), &[a])
    }

    /// `x * c` for a constant scalar.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let k = self.constant(Tensor::filled(&shape, c));
        self.mul(x, k)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// `x + c` elementwise for a constant scalar.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let k = self.constant(Tensor::filled(&shape, c));
        self.add(x, k)
    }

    /// Mean squared difference over all coordinates.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// `log(1 + exp(x))` elementwise.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let e = self.exp(x)?;
        let one = self.add_scalar(e, 1.0)?;
        self.log(one)
    }
}

// ---- forward evaluation ----------------------------------------------------

fn eval_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity_err = |want: &str| {
        Error::InvalidArgument(format!(
            "{} expects {want} input(s), got {}",
            prim.name(),
            inputs.len()
        ))
    };
    match prim {
        Primitive::Add | Primitive::Mul => {
            let [a, b] = inputs else { return Err(arity_err("2")) };
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    if matches!(prim, Primitive::Add) { "add" } else { "multiply" },
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            match prim {
                Primitive::Add => a.zip_map(b, |x, y| x + y),
                _ => a.zip_map(b, |x, y| x * y),
            }
        }
        Primitive::MatMul => {
            let [a, b] = inputs else { return Err(arity_err("2")) };
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            matmul_2d(a.data(), b.data(), m, k, n, &mut out);
            Tensor::from_vec(vec![m, n], out)
        }
        Primitive::Transpose => {
            let [a] = inputs else { return Err(arity_err("1")) };
            let s = a.shape();
            if s.len() != 2 {
                return Err(Error::shape("transpose", format!("rank-2 required, got {s:?}")));
            }
            Ok(transpose_2d(a))
        }
        Primitive::Reshape(shape) => {
            let [a] = inputs else { return Err(arity_err("1")) };
            let numel: usize = shape.iter().product();
            if numel != a.numel() || shape.iter().any(|&d| d == 0) {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", a.shape()),
                ));
            }
            Tensor::from_vec(shape.clone(), a.data().to_vec())
        }
        Primitive::Concat(axis) => {
            if inputs.is_empty() {
                return Err(arity_err(">= 1"));
            }
            eval_concat(inputs, *axis)
        }
        Primitive::Slice { axis, start, len } => {
            let [a] = inputs else { return Err(arity_err("1")) };
            eval_slice(a, *axis, *start, *len)
        }
        Primitive::Sum(axis) => {
            let [a] = inputs else { return Err(arity_err("1")) };
            eval_reduce(a, *axis, false)
        }
        Primitive::Mean(axis) => {
            let [a] = inputs else { return Err(arity_err("1")) };
            eval_reduce(a, *axis, true)
        }
        Primitive::Exp => unary(inputs, f64::exp).ok_or_else(|| arity_err("1")),
        Primitive::Log => unary(inputs, f64::ln).ok_or_else(|| arity_err("1")),
        Primitive::Sigmoid => unary(inputs, sigmoid).ok_or_else(|| arity_err("1")),
        Primitive::Silu => unary(inputs, |x| x * sigmoid(x)).ok_or_else(|| arity_err("1")),
        Primitive::Softmax => {
            let [a] = inputs else { return Err(arity_err("1")) };
            eval_softmax(a)
        }
        Primitive::Power(p) => {
            let p = *p;
            unary(inputs, move |x| x.powf(p)).ok_or_else(|| arity_err("1"))
        }
        Primitive::Broadcast(target) => {
            let [a] = inputs else { return Err(arity_err("1")) };
            eval_broadcast(a, target)
        }
    }
}

fn unary(inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Option<Tensor> {
    match inputs {
        [a] => Some(a.map(f)),
        _ => None,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn transpose_2d(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out).expect("transpose shape")
}

fn eval_concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let rank = inputs[0].shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of rank {rank}")));
    }
    let mut out_shape = inputs[0].shape().to_vec();
    let mut total_axis = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != rank {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for (d, (&a, &b)) in s.iter().zip(inputs[0].shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(
                    "concat",
                    format!("axis {d} differs: {a} vs {b}"),
                ));
            }
        }
        total_axis += s[axis];
    }
    out_shape[axis] = total_axis;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * total_axis * inner];
    for o in 0..outer {
        let mut at = 0;
        for t in inputs {
            let extent = t.shape()[axis];
            let chunk = extent * inner;
            let src = &t.data()[o * chunk..(o + 1) * chunk];
            let dst_base = (o * total_axis + at) * inner;
            out[dst_base..dst_base + chunk].copy_from_slice(src);
            at += extent;
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn eval_slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let s = a.shape();
    if axis >= s.len() || len == 0 || start + len > s[axis] {
        return Err(Error::shape(
            "slice",
            format!("axis {axis} window [{start}, {start}+{len}) of {s:?}"),
        ));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src_base = (o * s[axis] + start) * inner;
        let dst_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&a.data()[src_base..src_base + len * inner]);
    }
    Tensor::from_vec(out_shape, out)
}

fn eval_reduce(a: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let mut acc = 0.0;
            for &v in a.data() {
                acc += v;
            }
            if mean {
                acc /= a.numel() as f64;
            }
            Ok(Tensor::scalar(acc))
        }
        Some(axis) => {
            let s = a.shape();
            if axis >= s.len() {
                return Err(Error::shape(
                    "sum",
                    format!("axis {axis} out of rank {}", s.len()),
                ));
            }
            let outer: usize = s[..axis].iter().product();
            let extent = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let mut out_shape = s.to_vec();
            out_shape[axis] = 1;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[base + i];
                    }
                }
            }
            if mean {
                let inv = 1.0 / extent as f64;
                for v in &mut out {
                    *v *= inv;
                }
            }
            Tensor::from_vec(out_shape, out)
        }
    }
}

fn eval_softmax(a: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.is_empty() {
        return Err(Error::shape("softmax", "rank >= 1 required".to_string()));
    }
    let last = s[s.len() - 1];
    let rows = a.numel() / last;
    let mut out = vec![0.0; a.numel()];
    for r in 0..rows {
        let row = &a.data()[r * last..(r + 1) * last];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * last..(r + 1) * last];
        let mut denom = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            denom += *d;
        }
        for d in dst.iter_mut() {
            *d /= denom;
        }
    }
    Tensor::from_vec(s.to_vec(), out)
}

/// Right-aligned broadcast plan: for each target axis, the input stride to
/// advance by (0 on expanded axes).
fn broadcast_plan(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(Error::shape(
            "broadcast",
            format!("{src:?} has higher rank than target {target:?}"),
        ));
    }
    let offset = target.len() - src.len();
    // Row-major strides of the source.
    let mut strides = vec![0usize; src.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i] = acc;
        acc *= src[i];
    }
    let mut plan = vec![0usize; target.len()];
    for (i, &t) in target.iter().enumerate() {
        if i < offset {
            plan[i] = 0;
        } else {
            let sd = src[i - offset];
            if sd == t {
                plan[i] = strides[i - offset];
            } else if sd == 1 {
                plan[i] = 0;
            } else {
                return Err(Error::shape(
                    "broadcast",
                    format!("{src:?} does not broadcast to {target:?}"),
                ));
            }
        }
    }
    Ok(plan)
}

fn eval_broadcast(a: &Tensor, target: &[usize]) -> Result<Tensor> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::shape("broadcast", format!("bad target {target:?}")));
    }
    let plan = broadcast_plan(a.shape(), target)?;
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    let src = a.data();
    let mut idx = vec![0usize; target.len()];
    for slot in out.iter_mut() {
        let mut src_flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            src_flat += i * plan[d];
        }
        *slot = src[src_flat];
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(target.to_vec(), out)
}

/// Sums `grad` (shaped like the broadcast target) back down to `src_shape`.
fn reduce_broadcast_grad(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    let target = grad.shape();
    let plan = broadcast_plan(src_shape, target).expect("valid broadcast recorded");
    let src_numel: usize = src_shape.iter().product();
    let mut out = vec![0.0; src_numel];
    let mut idx = vec![0usize; target.len()];
    for &g in grad.data() {
        let mut src_flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            src_flat += i * plan[d];
        }
        out[src_flat] += g;
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(src_shape.to_vec(), out).expect("reduce shape")
}

// ---- backward rules ---------------------------------------------------------

fn backward_rule(
    prim: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match prim {
        Primitive::Add => {
            for (slot, &need) in out.iter_mut().zip(needs) {
                if need {
                    *slot = Some(gout.clone());
                }
            }
        }
        Primitive::Mul => {
            if needs[0] {
                out[0] = Some(gout.zip_map(inputs[1], |g, b| g * b)?);
            }
            if needs[1] {
                out[1] = Some(gout.zip_map(inputs[0], |g, a| g * a)?);
            }
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                // dA = g @ B^T
                let bt = transpose_2d(b);
                let mut da = vec![0.0; m * k];
                matmul_2d(gout.data(), bt.data(), m, n, k, &mut da);
                out[0] = Some(Tensor::from_vec(vec![m, k], da)?);
            }
            if needs[1] {
                // dB = A^T @ g
                let at = transpose_2d(a);
                let mut db = vec![0.0; k * n];
                matmul_2d(at.data(), gout.data(), k, m, n, &mut db);
                out[1] = Some(Tensor::from_vec(vec![k, n], db)?);
            }
        }
        Primitive::Transpose => {
            if needs[0] {
                out[0] = Some(transpose_2d(gout));
            }
        }
        Primitive::Reshape(_) => {
            if needs[0] {
                out[0] = Some(Tensor::from_vec(
                    inputs[0].shape().to_vec(),
                    gout.data().to_vec(),
                )?);
            }
        }
        Primitive::Concat(axis) => {
            let axis = *axis;
            let mut at = 0;
            for (i, t) in inputs.iter().enumerate() {
                let extent = t.shape()[axis];
                if needs[i] {
                    out[i] = Some(eval_slice(gout, axis, at, extent)?);
                }
                at += extent;
            }
        }
        Primitive::Slice { axis, start, len } => {
            if needs[0] {
                let s = inputs[0].shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let mut g = vec![0.0; inputs[0].numel()];
                for o in 0..outer {
                    let dst_base = (o * s[*axis] + start) * inner;
                    let src_base = o * len * inner;
                    g[dst_base..dst_base + len * inner]
                        .copy_from_slice(&gout.data()[src_base..src_base + len * inner]);
                }
                out[0] = Some(Tensor::from_vec(s.to_vec(), g)?);
            }
        }
        Primitive::Sum(axis) | Primitive::Mean(axis) => {
            if needs[0] {
                let s = inputs[0].shape();
                let scale = if matches!(prim, Primitive::Mean(_)) {
                    match axis {
                        None => 1.0 / inputs[0].numel() as f64,
                        Some(a) => 1.0 / s[*a] as f64,
                    }
                } else {
                    1.0
                };
                let g = match axis {
                    None => Tensor::filled(s, gout.scalar_value() * scale),
                    Some(_) => {
                        let scaled = gout.map(|v| v * scale);
                        eval_broadcast(&scaled, s)?
                    }
                };
                out[0] = Some(g);
            }
        }
        Primitive::Exp => {
            if needs[0] {
                out[0] = Some(gout.zip_map(output, |g, y| g * y)?);
            }
        }
        Primitive::Log => {
            if needs[0] {
                out[0] = Some(gout.zip_map(inputs[0], |g, x| g / x)?);
            }
        }
        Primitive::Sigmoid => {
            if needs[0] {
                out[0] = Some(gout.zip_map(output, |g, y| g * y * (1.0 - y))?);
            }
        }
        Primitive::Silu => {
            if needs[0] {
                out[0] = Some(gout.zip_map(inputs[0], |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })?);
            }
        }
        Primitive::Softmax => {
            if needs[0] {
                let s = output.shape();
                let last = s[s.len() - 1];
                let rows = output.numel() / last;
                let mut g = vec![0.0; output.numel()];
                for r in 0..rows {
                    let y = &output.data()[r * last..(r + 1) * last];
                    let go = &gout.data()[r * last..(r + 1) * last];
                    let mut dot = 0.0;
                    for (yv, gv) in y.iter().zip(go) {
                        dot += yv * gv;
                    }
                    for i in 0..last {
                        g[r * last + i] = y[i] * (go[i] - dot);
                    }
                }
                out[0] = Some(Tensor::from_vec(s.to_vec(), g)?);
            }
        }
        Primitive::Power(p) => {
            if needs[0] {
                let p = *p;
                out[0] = Some(gout.zip_map(inputs[0], |g, x| g * p * x.powf(p - 1.0))?);
            }
        }
        Primitive::Broadcast(_) => {
            if needs[0] {
                out[0] = Some(reduce_broadcast_grad(gout, inputs[0].shape()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn add_zeros_is_bitwise_identity() {
        let mut tape = Tape::new();
        let vals = [1.5, 0.0, 3.25e-7, -42.0];
        let x = tape.constant(t(&[4], &vals));
        let z = tape.constant(Tensor::zeros(&[4]));
        let y = tape.add(x, z).unwrap();
        assert!(tape.value(y).bitwise_eq(&t(&[4], &vals)));
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        tape.add(a, b).unwrap();
        assert_eq!(tape.record_count(), 0);

        let c = tape.leaf(t(&[2], &[1.0, 1.0]), true);
        tape.mul(a, c).unwrap();
        assert_eq!(tape.record_count(), 1);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x ⊙ x), x = [3] -> gradient [6]
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_of_linear_map_rows() {
        // loss = sum(A @ x): dA rows equal x^T.
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]), true);
        let x = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = tape.matmul(a, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let logits_data = [1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 3], &logits_data), true);
        let probs = tape.softmax(logits).unwrap();
        let onehot = tape.constant(t(&[1, 3], &[0.0, 0.0, 1.0]));
        let picked = tape.mul(probs, onehot).unwrap();
        let p = tape.sum_all(picked).unwrap();
        let logp = tape.log(p).unwrap();
        let loss = tape.neg(logp).unwrap();
        let grads = tape.backward(loss).unwrap();

        let z: f64 = logits_data.iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = logits_data
            .iter()
            .enumerate()
            .map(|(i, v)| v.exp() / z - if i == 2 { 1.0 } else { 0.0 })
            .collect();
        let g = grads.get(logits).unwrap();
        for (got, want) in g.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn unreached_tracked_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[0.5; 3]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::LossNotScalar(_))));
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(t(&[1], &[1.0]), true);
        let b = t2.leaf(t(&[1], &[1.0]), true);
        assert!(matches!(t2.add(a, b), Err(Error::ForeignNode)));
        assert!(matches!(t1.backward(b), Err(Error::ForeignNode)));
    }

    #[test]
    fn unknown_primitive_name_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 5.0, 2.0]));
        match tape.apply_named("argmax", &[x]) {
            Err(Error::UnknownPrimitive(name)) => assert_eq!(name, "argmax"),
            other => panic!("expected UnknownPrimitive, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
        let big = tape.constant(t(&[1], &[800.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        let m = tape.constant(t(&[2, 2], &[1.0; 4]));
        let n = tape.constant(t(&[3, 2], &[1.0; 6]));
        assert!(matches!(tape.matmul(m, n), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let mut tape = Tape::new();
        // [2,1] -> [2,3]: trailing-axis expansion.
        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.broadcast_to(col, &[2, 3]).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        // [3] -> [2,3]: new leading axis.
        let row = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b2 = tape.broadcast_to(row, &[2, 3]).unwrap();
        assert_eq!(tape.value(b2).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_expansion() {
        let mut tape = Tape::new();
        let col = tape.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let b = tape.broadcast_to(col, &[2, 3]).unwrap();
        let loss = tape.sum_all(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(col).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[1, 2], &[3.0, 4.0]), true);
        let c = tape.concat(&[a, b], 0).unwrap();
        let picked = tape.slice(c, 0, 1, 1).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_linearity_of_sum_of_losses() {
        // gradient of (L1 + L2) equals gradient of L1 plus gradient of L2,
        // exactly within 1e-12.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[4, 4], 1.0, &mut rng);

        let run = |which: u8| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum_all(sq).unwrap();
            let sig = tape.sigmoid(x).unwrap();
            let l2 = tape.mean_all(sig).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().clone()
        };
        let g1 = run(0);
        let g2 = run(1);
        let gsum = run(2);
        for ((a, b), s) in g1.data().iter().zip(g2.data()).zip(gsum.data()) {
            assert!((a + b - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn replayed_forward_is_bitwise_identical() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a0 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b0 = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant(a0.clone());
            let b = tape.constant(b0.clone());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.silu(c).unwrap();
            let sm = tape.softmax(s).unwrap();
            tape.value(sm).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }
}
