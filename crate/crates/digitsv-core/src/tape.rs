//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append nodes and return [`TensorId`] handles; [`Tape::backward`] walks the
//! nodes in reverse creation order and accumulates gradients into every
//! reachable node that requires them. The tape is built per training step and
//! discarded afterwards; it is confined to a single thread (parallelism, where
//! used, runs across independent tapes).
//!
//! Every operation validates operand shapes and checks its output for NaN or
//! infinity, returning an error instead of letting poison propagate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Affine { a: TensorId, mul: f64 },
    Relu { a: TensorId },
    Tanh { a: TensorId },
    Exp { a: TensorId },
    Log { a: TensorId },
    Sqrt { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId, axis: usize },
    SumAll { a: TensorId },
    SumAxis { a: TensorId, axis: usize },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { a: TensorId, axis: usize, start: usize, len: usize },
    Reshape { a: TensorId },
    Conv1d { x: TensorId, w: TensorId, dilation: usize, padding: usize },
    GatherRows { m: TensorId, indices: Vec<usize> },
    PickPerRow { m: TensorId, indices: Vec<usize> },
    CtcLoss { logp: TensorId, target: Vec<usize>, blank: usize },
}

#[derive(Debug)]
struct Node {
    t: Tensor,
    op: Op,
    rg: bool,
}

/// Define-by-run gradient tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].t
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].t.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].t.shape()
    }

    /// Gradient of the last `backward` call with respect to node `id`, if any
    /// reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    /// Places a tensor on the tape as a leaf. Its `requires_grad` flag decides
    /// whether gradients will be tracked through it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf with gradient tracking disabled regardless of the tensor's flag.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, t: Tensor, op: Op, rg: bool) -> TensorId {
        self.nodes.push(Node { t, op, rg });
        TensorId(self.nodes.len() - 1)
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool, name: &'static str) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = rg;
        Ok(self.push(t, op, rg))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].rg
    }

    // ---- shape-preserving elementwise ----

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Relu { a }, rg, "relu")
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| math::tanh(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Tanh { a }, rg, "tanh")
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| math::exp(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Exp { a }, rg, "exp")
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| math::ln(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Log { a }, rg, "log")
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| math::sqrt(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Sqrt { a }, rg, "sqrt")
    }

    /// Elementwise `a * mul + add`.
    pub fn affine(&mut self, a: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(a).iter().map(|&v| v * mul + add).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, out, Op::Affine { a, mul }, rg, "affine")
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        self.affine(a, -1.0, 0.0)
    }

    // ---- broadcasting binary ops ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Add { a, b }, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Sub { a, b }, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Mul { a, b }, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, Op::Div { a, b }, "div", |x, y| x / y)
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let (ad, bd) = (self.data(a), self.data(b));
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(ash, bsh)?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if ash == bsh {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else if bd.len() == 1 {
            let y = bd[0];
            for (o, &x) in out.iter_mut().zip(ad) {
                *o = f(x, y);
            }
        } else if ad.len() == 1 {
            let x = ad[0];
            for (o, &y) in out.iter_mut().zip(bd) {
                *o = f(x, y);
            }
        } else {
            let mut walk = BroadcastWalk::new(&out_shape, ash, bsh);
            for o in out.iter_mut() {
                let (ia, ib) = walk.offsets();
                *o = f(ad[ia], bd[ib]);
                walk.step();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.emit(out_shape, out, op, rg, name)
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_2d(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.emit(vec![m, n], out, Op::Matmul { a, b }, rg, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.value(a).dims2()?;
        let ad = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.emit(vec![c, r], out, Op::Transpose { a }, rg, "transpose")
    }

    // ---- softmax family ----

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let ad = self.data(a);
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(ad[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = math::exp(ad[base + j * inner] - mx);
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.rg(a);
        self.emit(shape, out, Op::Softmax { a, axis }, rg, "softmax")
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let ad = self.data(a);
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(ad[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    sum += math::exp(ad[base + j * inner] - mx);
                }
                let lse = mx + math::ln(sum);
                for j in 0..len {
                    out[base + j * inner] = ad[base + j * inner] - lse;
                }
            }
        }
        let rg = self.rg(a);
        self.emit(shape, out, Op::LogSoftmax { a, axis }, rg, "log_softmax")
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.emit(vec![1], vec![s], Op::SumAll { a }, rg, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::contract("mean_all of empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let ad = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = (o * len + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += ad[src + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        self.emit(out_shape, out, Op::SumAxis { a, axis }, rg, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean_axis: axis {axis} out of range")))?;
        if len == 0 {
            return Err(Error::contract("mean_axis over empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.affine(s, 1.0 / len as f64, 0.0)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        self.emit(shape, data, Op::Reshape { a }, rg, "reshape")
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0usize;
        for &id in inputs {
            let sh = self.shape(id);
            if sh.len() != first.len() {
                return Err(Error::dim("concat: rank mismatch"));
            }
            for (ax, (&a, &b)) in sh.iter().zip(&first).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat: shape {sh:?} differs from {first:?} off axis {axis}"
                    )));
                }
            }
            total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0usize;
        for &id in inputs {
            let len = self.shape(id)[axis];
            let ad = self.data(id);
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + off) * inner;
                out[dst..dst + len * inner].copy_from_slice(&ad[src..src + len * inner]);
            }
            off += len;
        }
        let rg = inputs.iter().any(|&id| self.rg(id));
        self.emit(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg, "concat")
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis)?;
        if start + len > full {
            return Err(Error::dim(format!(
                "slice: [{start}, {}) exceeds axis {axis} of size {full}",
                start + len
            )));
        }
        if len == 0 {
            return Err(Error::contract("slice of zero length"));
        }
        let ad = self.data(a);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&ad[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.emit(out_shape, out, Op::Slice { a, axis, start, len }, rg, "slice")
    }

    /// Stacks same-length vectors into a `[n, len]` matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero vectors"));
        }
        let len = self.value(rows[0]).numel();
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            reshaped.push(self.reshape(r, vec![1, len])?);
        }
        self.concat(&reshaped, 0)
    }

    // ---- convolution ----

    /// 1-D cross-correlation over the time axis.
    ///
    /// `x` is `[C_in, T]`, `w` is `[C_out, C_in, K]`; output is
    /// `[C_out, T + 2*padding - dilation*(K-1)]` with zero padding.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, dilation: usize, padding: usize) -> Result<TensorId> {
        if dilation == 0 {
            return Err(Error::contract("conv1d: dilation must be >= 1"));
        }
        let xsh = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xsh.len() != 2 || wsh.len() != 3 {
            return Err(Error::dim(format!("conv1d: x {xsh:?}, w {wsh:?}")));
        }
        let (c_in, t) = (xsh[0], xsh[1]);
        let (c_out, wc_in, k) = (wsh[0], wsh[1], wsh[2]);
        if wc_in != c_in {
            return Err(Error::dim(format!("conv1d: x has {c_in} channels, w expects {wc_in}")));
        }
        let span = dilation * (k - 1);
        let t_out_signed = t as isize + 2 * padding as isize - span as isize;
        if t_out_signed < 1 {
            return Err(Error::dim(format!(
                "conv1d: T={t} too short for K={k} dilation={dilation} padding={padding}"
            )));
        }
        let t_out = t_out_signed as usize;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; c_out * t_out];
        for co in 0..c_out {
            let orow = &mut out[co * t_out..(co + 1) * t_out];
            for ci in 0..c_in {
                let xrow = &xd[ci * t..(ci + 1) * t];
                let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    // out[t'] += w * x[t' - padding + kk*dilation]
                    let shift = kk as isize * dilation as isize - padding as isize;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((t as isize - shift).min(t_out as isize)).max(0) as usize;
                    if t0 >= t1 {
                        continue;
                    }
                    let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                    for (o, &xv) in orow[t0..t1].iter_mut().zip(src) {
                        *o += wv * xv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.emit(vec![c_out, t_out], out, Op::Conv1d { x, w, dilation, padding }, rg, "conv1d")
    }

    // ---- gathers ----

    /// Selects rows of a `[R, F]` matrix: output `[indices.len(), F]`.
    pub fn gather_rows(&mut self, m: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (r, f) = self.value(m).dims2()?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let md = self.data(m);
        let mut out = vec![0.0; indices.len() * f];
        for (dst, &i) in indices.iter().enumerate() {
            out[dst * f..(dst + 1) * f].copy_from_slice(&md[i * f..(i + 1) * f]);
        }
        let rg = self.rg(m);
        self.emit(
            vec![indices.len(), f],
            out,
            Op::GatherRows { m, indices: indices.to_vec() },
            rg,
            "gather_rows",
        )
    }

    /// Picks one element per row of a `[B, K]` matrix: output `[B]`.
    pub fn pick_per_row(&mut self, m: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (b, k) = self.value(m).dims2()?;
        if indices.len() != b {
            return Err(Error::dim(format!("pick_per_row: {} indices for {b} rows", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::dim(format!("pick_per_row: column {bad} out of {k}")));
        }
        let md = self.data(m);
        let out: Vec<f64> = indices.iter().enumerate().map(|(row, &col)| md[row * k + col]).collect();
        let rg = self.rg(m);
        self.emit(vec![b], out, Op::PickPerRow { m, indices: indices.to_vec() }, rg, "pick_per_row")
    }

    // ---- CTC ----

    /// CTC negative log-likelihood of `target` under per-frame log-probability
    /// rows `logp` of shape `[T, V]`.
    ///
    /// The forward pass runs the standard blank-interleaved alpha recursion in
    /// log space. An empty target is legal (the all-blank path); an
    /// alignment-infeasible pair (too few frames for the target with its
    /// mandatory blanks) is an error, not an infinite loss.
    pub fn ctc_loss(&mut self, logp: TensorId, target: &[usize], blank: usize) -> Result<TensorId> {
        let (t_len, v) = self.value(logp).dims2()?;
        if blank >= v {
            return Err(Error::vocab(format!("ctc_loss: blank {blank} outside vocab {v}")));
        }
        if let Some(&bad) = target.iter().find(|&&l| l >= v || l == blank) {
            return Err(Error::vocab(format!(
                "ctc_loss: target symbol {bad} invalid for vocab {v} with blank {blank}"
            )));
        }
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        let required = target.len() + repeats;
        if t_len < required {
            return Err(Error::infeasible(format!(
                "ctc_loss: {t_len} frames cannot align target of length {} requiring {required}",
                target.len()
            )));
        }
        let ext = extend_with_blanks(target, blank);
        let alphas = ctc_alphas(self.data(logp), t_len, v, &ext);
        let s = ext.len();
        let log_p = if s >= 2 {
            math::log_add_exp(alphas[(t_len - 1) * s + (s - 1)], alphas[(t_len - 1) * s + (s - 2)])
        } else {
            alphas[(t_len - 1) * s]
        };
        let loss = -log_p;
        let rg = self.rg(logp);
        self.emit(
            vec![1],
            vec![loss],
            Op::CtcLoss { logp, target: target.to_vec(), blank },
            rg,
            "ctc_loss",
        )
    }

    // ---- backward ----

    /// Accumulates gradients of scalar node `loss` into every node that
    /// requires them. Calling it a second time without [`Tape::clear_grads`]
    /// is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without clear_grads"));
        }
        let node = &self.nodes[loss.0];
        if node.t.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                node.t.shape()
            )));
        }
        if !node.rg {
            return Err(Error::contract("backward: loss does not depend on any trainable leaf"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            {
                let nodes = &self.nodes;
                propagate(&nodes[i], &g, nodes, &mut grads)?;
            }
            self.nodes[i].t.grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    /// Clears all gradients and re-arms `backward`.
    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.t.grad = None;
        }
        self.backward_done = false;
    }
}

/// Adds a gradient contribution into slot `j`, allocating on first touch.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], j: usize, numel: usize) -> &'a mut [f64] {
    grads[j].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice()
}

fn propagate(out: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let yd = out.t.data();
    match &out.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].t.dim(0), nodes[a.0].t.dim(1));
            let n = nodes[b.0].t.dim(1);
            if nodes[a.0].rg {
                // dA = g . B^T
                let bd = nodes[b.0].t.data();
                let da = slot(grads, a.0, m * k);
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow_t = j; // column j of B
                        for kk in 0..k {
                            da[i * k + kk] += gv * bd[kk * n + brow_t];
                        }
                    }
                }
            }
            if nodes[b.0].rg {
                // dB = A^T . g
                let ad = nodes[a.0].t.data();
                let db = slot(grads, b.0, k * n);
                for i in 0..m {
                    for kk in 0..k {
                        let av = ad[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose { a } => {
            if nodes[a.0].rg {
                let (r, c) = (nodes[a.0].t.dim(0), nodes[a.0].t.dim(1));
                let da = slot(grads, a.0, r * c);
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            binary_grad(nodes, grads, *a, *b, g, |_, _, gv| (gv, gv));
        }
        Op::Sub { a, b } => {
            binary_grad(nodes, grads, *a, *b, g, |_, _, gv| (gv, -gv));
        }
        Op::Mul { a, b } => {
            binary_grad(nodes, grads, *a, *b, g, |x, y, gv| (gv * y, gv * x));
        }
        Op::Div { a, b } => {
            binary_grad(nodes, grads, *a, *b, g, |x, y, gv| (gv / y, -gv * x / (y * y)));
        }
        Op::Affine { a, mul } => {
            if nodes[a.0].rg {
                let da = slot(grads, a.0, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * mul;
                }
            }
        }
        Op::Relu { a } => {
            if nodes[a.0].rg {
                let ad = nodes[a.0].t.data();
                let da = slot(grads, a.0, g.len());
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(ad) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Tanh { a } => {
            if nodes[a.0].rg {
                // d tanh = 1 - y^2, using the stored output
                let da = slot(grads, a.0, g.len());
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(yd) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Op::Exp { a } => {
            if nodes[a.0].rg {
                let da = slot(grads, a.0, g.len());
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(yd) {
                    *d += gv * y;
                }
            }
        }
        Op::Log { a } => {
            if nodes[a.0].rg {
                let ad = nodes[a.0].t.data();
                let da = slot(grads, a.0, g.len());
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(ad) {
                    *d += gv / x;
                }
            }
        }
        Op::Sqrt { a } => {
            if nodes[a.0].rg {
                let da = slot(grads, a.0, g.len());
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(yd) {
                    *d += gv / (2.0 * y);
                }
            }
        }
        Op::Softmax { a, axis } => {
            if nodes[a.0].rg {
                let shape = nodes[a.0].t.shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let da = slot(grads, a.0, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * yd[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            da[idx] += yd[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { a, axis } => {
            if nodes[a.0].rg {
                let shape = nodes[a.0].t.shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let da = slot(grads, a.0, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut gsum = 0.0;
                        for j in 0..len {
                            gsum += g[base + j * inner];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            da[idx] += g[idx] - math::exp(yd[idx]) * gsum;
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if nodes[a.0].rg {
                let numel = nodes[a.0].t.numel();
                let da = slot(grads, a.0, numel);
                let gv = g[0];
                for d in da.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::SumAxis { a, axis } => {
            if nodes[a.0].rg {
                let shape = nodes[a.0].t.shape();
                let (outer, len, inner) = axis_split(shape, *axis)?;
                let da = slot(grads, a.0, nodes[a.0].t.numel());
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * len + j) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            da[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let first = nodes[inputs[0].0].t.shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|&id| nodes[id.0].t.dim(*axis)).sum();
            let mut off = 0usize;
            for &id in inputs {
                let len = nodes[id.0].t.dim(*axis);
                if nodes[id.0].rg {
                    let da = slot(grads, id.0, nodes[id.0].t.numel());
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            da[dst + i] += g[src + i];
                        }
                    }
                }
                off += len;
            }
        }
        Op::Slice { a, axis, start, len } => {
            if nodes[a.0].rg {
                let shape = nodes[a.0].t.shape();
                let (outer, full, inner) = axis_split(shape, *axis)?;
                let da = slot(grads, a.0, nodes[a.0].t.numel());
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        da[dst + i] += g[src + i];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if nodes[a.0].rg {
                let da = slot(grads, a.0, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Conv1d { x, w, dilation, padding } => {
            let (c_in, t) = (nodes[x.0].t.dim(0), nodes[x.0].t.dim(1));
            let (c_out, k) = (nodes[w.0].t.dim(0), nodes[w.0].t.dim(2));
            let span = dilation * (k - 1);
            let t_out = t + 2 * padding - span;
            if nodes[x.0].rg {
                let wd = nodes[w.0].t.data();
                let dx = slot(grads, x.0, c_in * t);
                for co in 0..c_out {
                    let grow = &g[co * t_out..(co + 1) * t_out];
                    for ci in 0..c_in {
                        let dxrow = &mut dx[ci * t..(ci + 1) * t];
                        let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let shift = kk as isize * *dilation as isize - *padding as isize;
                            let t0 = (-shift).max(0) as usize;
                            let t1 = ((t as isize - shift).min(t_out as isize)).max(0) as usize;
                            if t0 >= t1 {
                                continue;
                            }
                            let dst = &mut dxrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            for (d, &gv) in dst.iter_mut().zip(&grow[t0..t1]) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
            if nodes[w.0].rg {
                let xd = nodes[x.0].t.data();
                let dw = slot(grads, w.0, c_out * c_in * k);
                for co in 0..c_out {
                    let grow = &g[co * t_out..(co + 1) * t_out];
                    for ci in 0..c_in {
                        let xrow = &xd[ci * t..(ci + 1) * t];
                        for kk in 0..k {
                            let shift = kk as isize * *dilation as isize - *padding as isize;
                            let t0 = (-shift).max(0) as usize;
                            let t1 = ((t as isize - shift).min(t_out as isize)).max(0) as usize;
                            if t0 >= t1 {
                                continue;
                            }
                            let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            let mut acc = 0.0;
                            for (&gv, &xv) in grow[t0..t1].iter().zip(src) {
                                acc += gv * xv;
                            }
                            dw[(co * c_in + ci) * k + kk] += acc;
                        }
                    }
                }
            }
        }
        Op::GatherRows { m, indices } => {
            if nodes[m.0].rg {
                let f = nodes[m.0].t.dim(1);
                let dm = slot(grads, m.0, nodes[m.0].t.numel());
                for (row, &i) in indices.iter().enumerate() {
                    let src = &g[row * f..(row + 1) * f];
                    let dst = &mut dm[i * f..(i + 1) * f];
                    for (d, &gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            }
        }
        Op::PickPerRow { m, indices } => {
            if nodes[m.0].rg {
                let k = nodes[m.0].t.dim(1);
                let dm = slot(grads, m.0, nodes[m.0].t.numel());
                for (row, &col) in indices.iter().enumerate() {
                    dm[row * k + col] += g[row];
                }
            }
        }
        Op::CtcLoss { logp, target, blank } => {
            if nodes[logp.0].rg {
                let (t_len, v) = (nodes[logp.0].t.dim(0), nodes[logp.0].t.dim(1));
                let lp = nodes[logp.0].t.data();
                let ext = extend_with_blanks(target, *blank);
                let s = ext.len();
                let alphas = ctc_alphas(lp, t_len, v, &ext);
                let betas = ctc_betas(lp, t_len, v, &ext);
                let log_p = if s >= 2 {
                    math::log_add_exp(alphas[(t_len - 1) * s + s - 1], alphas[(t_len - 1) * s + s - 2])
                } else {
                    alphas[(t_len - 1) * s]
                };
                let dlp = slot(grads, logp.0, t_len * v);
                let gv = g[0];
                for t in 0..t_len {
                    // gather posterior mass per vocab symbol at frame t
                    let mut acc = vec![f64::NEG_INFINITY; v];
                    for (si, &sym) in ext.iter().enumerate() {
                        let post = alphas[t * s + si] + betas[t * s + si] - lp[t * v + sym];
                        acc[sym] = math::log_add_exp(acc[sym], post);
                    }
                    for (kk, &a) in acc.iter().enumerate() {
                        if a != f64::NEG_INFINITY {
                            dlp[t * v + kk] += -gv * math::exp(a - log_p);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn binary_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: TensorId,
    b: TensorId,
    g: &[f64],
    f: impl Fn(f64, f64, f64) -> (f64, f64),
) {
    let ash = nodes[a.0].t.shape().to_vec();
    let bsh = nodes[b.0].t.shape().to_vec();
    let out_shape = broadcast_shapes(&ash, &bsh).expect("checked in forward");
    let (need_a, need_b) = (nodes[a.0].rg, nodes[b.0].rg);
    let an = nodes[a.0].t.numel();
    let bn = nodes[b.0].t.numel();
    let same = ash == bsh;
    // Accumulate locally first: a and b may be the same node (x * x), in
    // which case both contributions must land in one slot.
    let mut da_buf = if need_a { Some(vec![0.0; an]) } else { None };
    let mut db_buf = if need_b { Some(vec![0.0; bn]) } else { None };
    {
        let ad = nodes[a.0].t.data();
        let bd = nodes[b.0].t.data();
        if same {
            for (i, &gv) in g.iter().enumerate() {
                let (ga, gb) = f(ad[i], bd[i], gv);
                if let Some(da) = da_buf.as_mut() {
                    da[i] += ga;
                }
                if let Some(db) = db_buf.as_mut() {
                    db[i] += gb;
                }
            }
        } else {
            let mut walk = BroadcastWalk::new(&out_shape, &ash, &bsh);
            for &gv in g.iter() {
                let (ia, ib) = walk.offsets();
                let (ga, gb) = f(ad[ia], bd[ib], gv);
                if let Some(da) = da_buf.as_mut() {
                    da[ia] += ga;
                }
                if let Some(db) = db_buf.as_mut() {
                    db[ib] += gb;
                }
                walk.step();
            }
        }
    }
    if let Some(da) = da_buf {
        let dst = slot(grads, a.0, an);
        for (d, v) in dst.iter_mut().zip(da) {
            *d += v;
        }
    }
    if let Some(db) = db_buf {
        let dst = slot(grads, b.0, bn);
        for (d, v) in dst.iter_mut().zip(db) {
            *d += v;
        }
    }
}

// ---- shape helpers ----

/// NumPy-style trailing-axis broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let av = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bv = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if av == bv {
            av
        } else if av == 1 {
            bv
        } else if bv == 1 {
            av
        } else {
            return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Odometer over an output shape yielding flat offsets into two (possibly
/// broadcast) operands.
struct BroadcastWalk {
    coords: Vec<usize>,
    shape: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    off_a: usize,
    off_b: usize,
}

impl BroadcastWalk {
    fn new(out_shape: &[usize], a: &[usize], b: &[usize]) -> Self {
        let rank = out_shape.len();
        let pad = |sh: &[usize]| {
            let mut v = vec![1usize; rank];
            v[rank - sh.len()..].copy_from_slice(sh);
            v
        };
        let strides = |sh: &[usize]| {
            let mut s = vec![0usize; rank];
            let mut acc = 1usize;
            for i in (0..rank).rev() {
                s[i] = if sh[i] == 1 { 0 } else { acc };
                acc *= sh[i];
            }
            s
        };
        let ap = pad(a);
        let bp = pad(b);
        BroadcastWalk {
            coords: vec![0; rank],
            shape: out_shape.to_vec(),
            stride_a: strides(&ap),
            stride_b: strides(&bp),
            off_a: 0,
            off_b: 0,
        }
    }

    fn offsets(&self) -> (usize, usize) {
        (self.off_a, self.off_b)
    }

    fn step(&mut self) {
        for i in (0..self.shape.len()).rev() {
            self.coords[i] += 1;
            self.off_a += self.stride_a[i];
            self.off_b += self.stride_b[i];
            if self.coords[i] < self.shape[i] {
                return;
            }
            self.off_a -= self.stride_a[i] * self.shape[i];
            self.off_b -= self.stride_b[i] * self.shape[i];
            self.coords[i] = 0;
        }
    }
}

/// Row-major `[m,k] x [k,n]` product.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---- CTC recursions ----

fn extend_with_blanks(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn ctc_alphas(lp: &[f64], t_len: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut alphas = vec![f64::NEG_INFINITY; t_len * s];
    alphas[0] = lp[ext[0]];
    if s > 1 {
        alphas[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alphas.split_at_mut(t * s);
        let prev = &prev[(t - 1) * s..];
        let cur = &mut cur[..s];
        for si in 0..s {
            let mut acc = prev[si];
            if si >= 1 {
                acc = math::log_add_exp(acc, prev[si - 1]);
            }
            if si >= 2 && ext[si] != ext[si - 2] {
                // the skip transition is only legal between distinct symbols;
                // ext[si] != blank is implied because ext alternates blanks
                acc = math::log_add_exp(acc, prev[si - 2]);
            }
            cur[si] = if acc == f64::NEG_INFINITY { acc } else { acc + lp[t * v + ext[si]] };
        }
    }
    alphas
}

fn ctc_betas(lp: &[f64], t_len: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut betas = vec![f64::NEG_INFINITY; t_len * s];
    betas[(t_len - 1) * s + s - 1] = lp[(t_len - 1) * v + ext[s - 1]];
    if s > 1 {
        betas[(t_len - 1) * s + s - 2] = lp[(t_len - 1) * v + ext[s - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for si in 0..s {
            let mut acc = betas[(t + 1) * s + si];
            if si + 1 < s {
                acc = math::log_add_exp(acc, betas[(t + 1) * s + si + 1]);
            }
            if si + 2 < s && ext[si] != ext[si + 2] {
                acc = math::log_add_exp(acc, betas[(t + 1) * s + si + 2]);
            }
            betas[t * s + si] = if acc == f64::NEG_INFINITY { acc } else { acc + lp[t * v + ext[si]] };
        }
    }
    betas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut tape, vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(a).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_uniform_is_uniform() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 4], vec![0.7; 4]);
        let y = tape.softmax(a, 1).unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_stable() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 3], vec![1000.0, 1001.0, 1002.0]);
        let y = tape.softmax(a, 1).unwrap();
        let s: f64 = tape.data(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_backward_is_two_x() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.clear_grads();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.relu(a).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_surfaced() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1], vec![-1.0]);
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
        let b = leaf(&mut tape, vec![1], vec![1.0]);
        let z = tape.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(matches!(tape.div(b, z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv1d_hand_case() {
        // x = [1,2,3,4], w = [1,0,-1], padding 1: out[t] = x[t-1] - x[t+1]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = leaf(&mut tape, vec![1, 1, 3], vec![1.0, 0.0, -1.0]);
        let y = tape.conv1d(x, w, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4]);
        assert_eq!(tape.data(y), &[-2.0, -2.0, -2.0, 3.0]);
    }

    #[test]
    fn conv1d_length_formula_over_sweep() {
        for t in 1..=32usize {
            for k in 1..=5usize {
                for d in 1..=3usize {
                    for p in 0..=3usize {
                        let mut tape = Tape::new();
                        let x = leaf(&mut tape, vec![1, t], vec![0.5; t]);
                        let w = leaf(&mut tape, vec![1, 1, k], vec![1.0; k]);
                        let expect = t as isize + 2 * p as isize - (d * (k - 1)) as isize;
                        match tape.conv1d(x, w, d, p) {
                            Ok(y) => {
                                assert!(expect >= 1);
                                assert_eq!(tape.shape(y)[1] as isize, expect);
                            }
                            Err(Error::Dim(_)) => assert!(expect < 1),
                            Err(e) => panic!("unexpected error: {e}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        let back = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = leaf(&mut tape, vec![3], vec![10.0, 20.0, 30.0]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.data(y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_column_vector() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![10.0, 100.0]);
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.data(y), &[10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn gather_and_pick() {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather_rows(m, &[2, 0]).unwrap();
        assert_eq!(tape.data(g), &[5.0, 6.0, 1.0, 2.0]);
        let p = tape.pick_per_row(g, &[1, 0]).unwrap();
        assert_eq!(tape.data(p), &[6.0, 1.0]);
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.data(tt), tape.data(a));
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // y = x*x + x => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![3.0, -1.0]);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn ctc_infeasible_target_is_error() {
        let mut tape = Tape::new();
        // 2 frames cannot carry target [a, a] (needs a blank between repeats)
        let l = leaf(&mut tape, vec![2, 3], vec![0.1; 6]);
        let lp = tape.log_softmax(l, 1).unwrap();
        assert!(matches!(tape.ctc_loss(lp, &[0, 0], 2), Err(Error::Infeasible(_))));
    }

    #[test]
    fn ctc_rejects_blank_in_target() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![4, 3], vec![0.1; 12]);
        let lp = tape.log_softmax(l, 1).unwrap();
        assert!(matches!(tape.ctc_loss(lp, &[2], 2), Err(Error::Vocab(_))));
    }

    #[test]
    fn ctc_single_frame_single_symbol() {
        // T=1, target [0]: P = p(0) exactly
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1, 3], vec![0.2, 1.3, -0.4]);
        let lp = tape.log_softmax(l, 1).unwrap();
        let loss = tape.ctc_loss(lp, &[0], 2).unwrap();
        let expect = -tape.data(lp)[0];
        assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, -1.2, 0.8, 0.05]).unwrap().with_grad());
            let b = tape.leaf(Tensor::new(vec![2, 2], vec![1.1, 0.2, -0.7, 0.9]).unwrap().with_grad());
            let c = tape.matmul(a, b).unwrap();
            let t = tape.tanh(c).unwrap();
            let s = tape.mean_all(t).unwrap();
            tape.backward(s).unwrap();
            (tape.data(s).to_vec(), tape.grad(a).unwrap().to_vec())
        };
        let (s1, g1) = build();
        let (s2, g2) = build();
        assert_eq!(s1, s2);
        assert_eq!(g1, g2);
    }
}
