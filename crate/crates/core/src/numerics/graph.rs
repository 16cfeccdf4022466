//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the inputs needed by
//! its local gradient rule. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Upper bound applied to `exp` inputs so results stay finite.
pub const EXP_INPUT_MAX: f64 = 700.0;
/// Lower clamp applied to `log` inputs.
pub const LOG_INPUT_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing matrix: output row `r` is `sum_k weight[k] * input[src[k]]`
/// over `k in offsets[r]..offsets[r + 1]`. Rows with no taps are zero.
///
/// Backs every gather in the pipeline: im2col for convolutions, patch
/// partitioning, bilinear lookups and view averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_in: usize,
    offsets: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseRows {
    pub fn builder(n_in: usize) -> SparseRowsBuilder {
        SparseRowsBuilder { rows: SparseRows { n_in, offsets: vec![0], src: vec![], weight: vec![] } }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn taps(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[row]..self.offsets[row + 1];
        self.src[range.clone()].iter().zip(&self.weight[range]).map(|(&s, &w)| (s as usize, w))
    }
}

pub struct SparseRowsBuilder {
    rows: SparseRows,
}

impl SparseRowsBuilder {
    pub fn tap(&mut self, src: usize, weight: f64) -> &mut Self {
        debug_assert!(src < self.rows.n_in);
        self.rows.src.push(src as u32);
        self.rows.weight.push(weight);
        self
    }

    pub fn end_row(&mut self) -> &mut Self {
        self.rows.offsets.push(self.rows.src.len());
        self
    }

    /// Single-tap row with unit weight.
    pub fn copy_row(&mut self, src: usize) -> &mut Self {
        self.tap(src, 1.0).end_row()
    }

    pub fn empty_row(&mut self) -> &mut Self {
        self.end_row()
    }

    pub fn build(self) -> SparseRows {
        self.rows
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Exp(Var),
    Log(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Softmax(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    GatherRows { x: Var, map: Arc<SparseRows> },
    CumsumExclusive(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation. Build one per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len(), "{op:?}");
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_parts(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    /// Registers a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, Op::Leaf, false)
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; numel(&out_shape)];
        if sa == sb {
            for ((o, x), y) in out.iter_mut().zip(da).zip(db) {
                *o = f(*x, *y);
            }
        } else if sa == out_shape && !db.is_empty() && sa.ends_with(&sb) {
            for (oc, xc) in out.chunks_exact_mut(db.len()).zip(da.chunks_exact(db.len())) {
                for ((o, x), y) in oc.iter_mut().zip(xc).zip(db) {
                    *o = f(*x, *y);
                }
            }
        } else {
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        Ok((out_shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Mul(a, b), rg))
    }

    /// Elementwise division; the caller keeps denominators away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, d, Op::Div(a, b), rg))
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = &self.nodes[x.0];
        let data: Vec<f64> = n.data.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, data, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `exp(min(x, EXP_INPUT_MAX))`.
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.min(EXP_INPUT_MAX).exp())
    }

    /// `ln(max(x, LOG_INPUT_MIN))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_INPUT_MIN).ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- linear algebra ----

    /// `a @ b` (or `a @ b^T` with `trans_b`). Rank 2 inputs, or rank 3 inputs
    /// sharing the leading batch extent.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?} (trans_b={trans_b})"));
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != kb {
                    return Err(err());
                }
                (1, sa[0], sa[1], n)
            }
            (3, 3) => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != kb {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], n)
            }
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.nodes[a.0].data[bi * m * k..],
                (k as isize, 1),
                &self.nodes[b.0].data[bi * k * n..],
                (rsb, csb),
                &mut out[bi * m * n..],
                (n as isize, 1),
                false,
            );
        }
        let shape = if batch == 1 && sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `x @ w + bias` with `x: [n, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    // ---- reductions and normalization ----

    /// Softmax over the last axis. With a mask, entries marked `false` get
    /// probability zero; a row with no allowed entry is all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("softmax: scalar input".into()));
        }
        if let Some(m) = &mask {
            if m.len() != numel(&shape) {
                return Err(Error::Shape(format!(
                    "softmax: mask of length {} for shape {shape:?}",
                    m.len()
                )));
            }
        }
        let cols = *shape.last().unwrap();
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; src.len()];
        if cols > 0 {
            for (r, (row, orow)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[r * cols + j]);
                let mut max = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if allowed(j) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                    if allowed(j) {
                        *o = (v - max).exp();
                        sum += *o;
                    }
                }
                orow.iter_mut().for_each(|o| *o /= sum);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    /// Mean over one axis whose result does not depend on the order of the
    /// entries along that axis: terms are summed in ascending value order.
    pub fn mean_axis_symmetric(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean_axis_symmetric: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        let mut terms = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                terms.clear();
                terms.extend((0..len).map(|l| src[(o * len + l) * inner + i]));
                terms.sort_by(f64::total_cmp);
                out[o * inner + i] = terms.iter().sum();
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        let s = self.push(out_shape, out, Op::SumAxis { x, axis }, rg);
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    /// Exclusive prefix sum along the last axis: `y[i] = sum_{j<i} x[j]`.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("cumsum: scalar input".into()))?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; src.len()];
        if cols > 0 {
            for (row, orow) in src.chunks(cols).zip(out.chunks_mut(cols)) {
                let mut acc = 0.0;
                for (v, o) in row.iter().zip(orow.iter_mut()) {
                    *o = acc;
                    acc += v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::CumsumExclusive(x), rg))
    }

    // ---- layout ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.data.len() {
            return Err(Error::Shape(format!("reshape: {:?} into {shape:?}", n.shape)));
        }
        let data = n.data.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: {first:?} and {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].data[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Row mixing along the leading axis of `x` (trailing axes are carried).
    pub fn gather_rows(&mut self, x: Var, map: Arc<SparseRows>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != map.n_in() {
            return Err(Error::Shape(format!(
                "gather_rows: map expects {} input rows, got shape {shape:?}",
                map.n_in()
            )));
        }
        let cols: usize = shape[1..].iter().product();
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; map.n_out() * cols];
        for (r, orow) in out.chunks_mut(cols.max(1)).enumerate().take(map.n_out()) {
            for (s, w) in map.taps(r) {
                let srow = &src[s * cols..(s + 1) * cols];
                for (o, v) in orow.iter_mut().zip(srow) {
                    *o += w * v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[0] = map.n_out();
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::GatherRows { x, map }, rg))
    }

    // ---- reverse sweep ----

    /// Populates gradients of `loss` with respect to every node that
    /// requires them. Any previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter used in this graph into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, &node.shape, grads, g, 1.0);
                self.accum_broadcast(*b, &node.shape, grads, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, &node.shape, grads, g, 1.0);
                self.accum_broadcast(*b, &node.shape, grads, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if self.rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| ga[ia] += g[o] * db[ib]);
                    add_into(grads, a.0, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| gb[ib] += g[o] * da[ia]);
                    add_into(grads, b.0, gb);
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if self.rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| ga[ia] += g[o] / db[ib]);
                    add_into(grads, a.0, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for_each_broadcast(&node.shape, sa, sb, |o, ia, ib| {
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])
                    });
                    add_into(grads, b.0, gb);
                }
            }
            Op::Scale(x, c) => self.unary_grad(*x, grads, g.iter().map(|v| v * c)),
            Op::AddScalar(x) | Op::Reshape(x) => self.unary_grad(*x, grads, g.iter().copied()),
            Op::Exp(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(
                    *x,
                    grads,
                    g.iter().zip(out).zip(xs).map(|((g, y), x)| if *x < EXP_INPUT_MAX { g * y } else { 0.0 }),
                )
            }
            Op::Log(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(
                    *x,
                    grads,
                    g.iter().zip(xs).map(|(g, x)| if *x >= LOG_INPUT_MIN { g / x } else { 0.0 }),
                )
            }
            Op::Relu(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(*x, grads, g.iter().zip(xs).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }))
            }
            Op::Elu(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(
                    *x,
                    grads,
                    g.iter().zip(out).zip(xs).map(|((g, y), x)| if *x > 0.0 { *g } else { g * (y + 1.0) }),
                )
            }
            Op::Sigmoid(x) => self.unary_grad(*x, grads, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y))),
            Op::Softplus(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(*x, grads, g.iter().zip(xs).map(|(g, x)| g * sigmoid(*x)))
            }
            Op::Abs(x) => {
                let xs = &self.nodes[x.0].data;
                self.unary_grad(*x, grads, g.iter().zip(xs).map(|(g, x)| g * sign(*x)))
            }
            Op::MatMul { a, b, trans_b } => self.matmul_grad(*a, *b, *trans_b, &node.shape, g, grads),
            Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let mut gx = vec![0.0; out.len()];
                if cols > 0 {
                    for ((grow, yrow), gxrow) in g.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), y) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *o = y * (gv - dot);
                        }
                    }
                }
                add_into(grads, x.0, gx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].data.len();
                add_into(grads, x.0, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_into(grads, x.0, gx);
            }
            Op::CumsumExclusive(x) => {
                let cols = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                if cols > 0 {
                    for (grow, gxrow) in g.chunks(cols).zip(gx.chunks_mut(cols)) {
                        let mut acc = 0.0;
                        for j in (0..cols).rev() {
                            gxrow[j] = acc;
                            acc += grow[j];
                        }
                    }
                }
                add_into(grads, x.0, gx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].shape[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(grads, v.0, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(grads, x.0, gx);
            }
            Op::GatherRows { x, map } => {
                let xs = &self.nodes[x.0];
                let cols: usize = xs.shape[1..].iter().product();
                let mut gx = vec![0.0; xs.data.len()];
                for r in 0..map.n_out() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for (s, w) in map.taps(r) {
                        for (o, v) in gx[s * cols..(s + 1) * cols].iter_mut().zip(grow) {
                            *o += w * v;
                        }
                    }
                }
                add_into(grads, x.0, gx);
            }
        }
    }

    fn unary_grad(&self, x: Var, grads: &mut [Option<Vec<f64>>], gx: impl Iterator<Item = f64>) {
        if self.rg(x) {
            match &mut grads[x.0] {
                Some(acc) => acc.iter_mut().zip(gx).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gx.collect()),
            }
        }
    }

    fn accum_broadcast(
        &self,
        v: Var,
        out_shape: &[usize],
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        sign: f64,
    ) {
        if !self.rg(v) {
            return;
        }
        let sv = &self.nodes[v.0].shape;
        let n = self.nodes[v.0].data.len();
        if sv.as_slice() == out_shape {
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += sign * b),
                slot @ None => *slot = Some(g.iter().map(|b| sign * b).collect()),
            }
            return;
        }
        let mut gv = vec![0.0; n];
        if n > 0 && out_shape.ends_with(sv) {
            // trailing broadcast, e.g. a bias row added to every row
            for chunk in g.chunks_exact(n) {
                gv.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            if sign != 1.0 {
                gv.iter_mut().for_each(|a| *a *= sign);
            }
        } else {
            for_each_broadcast(out_shape, sv, sv, |o, iv, _| gv[iv] += sign * g[o]);
        }
        add_into(grads, v.0, gv);
    }

    fn matmul_grad(&self, a: Var, b: Var, trans_b: bool, out_shape: &[usize], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = &self.nodes[a.0].shape;
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = out_shape[out_shape.len() - 1];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        // B viewed as [k, n]: element (kk, nn) at kk*rsb + nn*csb.
        let (rsb, csb) = if trans_b { (1isize, k as isize) } else { (n as isize, 1isize) };
        if self.rg(a) {
            let acc = grads[a.0].is_some();
            let ga = grads[a.0].get_or_insert_with(|| vec![0.0; da.len()]);
            for bi in 0..batch {
                // dA[m,k] = G[m,n] @ B^T[n,k]
                gemm(m, n, k, &g[bi * m * n..], (n as isize, 1), &db[bi * k * n..], (csb, rsb), &mut ga[bi * m * k..], (k as isize, 1), acc);
            }
        }
        if self.rg(b) {
            let acc = grads[b.0].is_some();
            let gb = grads[b.0].get_or_insert_with(|| vec![0.0; db.len()]);
            for bi in 0..batch {
                // dB[k,n] = A^T[k,m] @ G[m,n], written through B's layout.
                gemm(k, m, n, &da[bi * m * k..], (1, k as isize), &g[bi * m * n..], (n as isize, 1), &mut gb[bi * k * n..], (rsb, csb), acc);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], idx: usize, delta: Vec<f64>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

/// `c = a @ b` (or `c += a @ b` with `accumulate`) over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    let extent = |r: isize, cs: isize, rows: usize, cols: usize| {
        ((rows as isize - 1) * r + (cols as isize - 1) * cs) as usize + 1
    };
    assert!(a.len() >= extent(rsa, csa, m, k));
    assert!(b.len() >= extent(rsb, csb, k, n));
    assert!(c.len() >= extent(rsc, csc, m, n));
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Right-aligned numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        let slot = rank - shape.len() + i;
        strides[slot] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out_shape`.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let stra = broadcast_strides(sa, rank);
    let strb = broadcast_strides(sb, rank);
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (stra[rank - 1], strb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut xa, mut xb) = (ia, ib);
        for _ in 0..inner {
            f(o, xa, xb);
            o += 1;
            xa += ia_step;
            xb += ib_step;
        }
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            ia += stra[ax];
            ib += strb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= stra[ax] * idx[ax];
            ib -= strb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
