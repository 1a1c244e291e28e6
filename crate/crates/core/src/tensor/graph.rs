use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn_acc};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
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
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose {
        x: Var,
        dim0: usize,
        dim1: usize,
    },
    Reshape {
        x: Var,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        total_weight: T,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Borrows a stored parameter as a trainable leaf. Repeated calls with the
    /// same id return the same node, so tied uses accumulate into one gradient.
    pub fn param(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_node(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Trainable leaf that is not part of any store (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(value), Op::Leaf, false)
    }

    fn push_node(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Cow::Owned(value), op, requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// `a[.., m, k] · b[k, n]` (shared right operand) or batched
    /// `a[B.., m, k] · b[B.., k, n]` with identical batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`matmul`](Self::matmul) with the last two axes of `b` swapped, i.e. `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, format!("operands must be at least 2-D: {sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let shared_b = sb.len() == 2;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let (batch, rows) = if shared_b {
            (1, numel(&sa) / k)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(op, format!("batch dimensions differ: {sa:?} x {sb:?}")));
            }
            (numel(&sa[..sa.len() - 2]), m)
        };
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for bi in 0..batch {
            let a_blk = &ad[bi * rows * k..(bi + 1) * rows * k];
            let b_blk = &bd[bi * k * n..(bi + 1) * k * n];
            let o_blk = &mut out[bi * rows * n..(bi + 1) * rows * n];
            if trans_b {
                gemm_nt(a_blk, b_blk, o_blk, rows, k, n);
            } else {
                gemm_nn(a_blk, b_blk, o_blk, rows, k, n);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m: rows,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// Element-wise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Element-wise product with right-aligned broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ia = Broadcast::new(&out_shape, sa);
        let ib = Broadcast::new(&out_shape, sb);
        let (ad, bd) = (self.data(a), self.data(b));
        let out = (0..numel(&out_shape))
            .map(|i| f(ad[ia.offset(i)], bd[ib.offset(i)]))
            .collect();
        Tensor::new(out_shape, out)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| e * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_dims("softmax", &shape, axis)?;
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| out[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (out[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_dims("log_softmax", &shape, axis)?;
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let lse = log_sum_exp((0..len).map(|i| out[idx(i)]));
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] - lse;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let n = T::from_usize(d).expect("dim fits");
        let xd = self.data(x);
        let rows = xd.len() / d;
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, rstd }, &[x]))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&e| half * e * (T::one() + (e * inv_sqrt2).erf()))
            .collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| sigmoid(e)).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Gathers rows of a `[V, E]` table. The result has shape `lead ++ [E]`
    /// where `product(lead) == ids.len()`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table must be 2-D, got {ts:?}")));
        }
        if numel(lead) != ids.len() {
            return Err(Error::shape(
                "embedding_lookup",
                format!("lead shape {lead:?} does not hold {} ids", ids.len()),
            ));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} out of range for table {ts:?}"),
            ));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let mut shape = lead.to_vec();
        shape.push(e);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, dim0: usize, dim1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim0 >= shape.len() || dim1 >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({dim0}, {dim1}) out of range for {shape:?}"),
            ));
        }
        let (out_shape, out) = swap_axes(self.data(x), &shape, dim0, dim1);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Transpose { x, dim0, dim1 }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if numel(shape) != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", v.shape()),
            ));
        }
        let value = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_dims("slice", &shape, axis)?;
        if start >= end || end > len {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of {shape:?}"),
            ));
        }
        let xd = self.data(x);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xd[base..base + w * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        axis_dims("concat", &base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Sum over one axis (removed from the shape) or over everything (`None`, scalar result).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let value = self.reduce("reduce_sum", x, axis)?;
        Ok(self.push(value, Op::Sum { x, axis }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let mut value = self.reduce("reduce_mean", x, axis)?;
        let count = T::from_usize(self.value(x).numel() / value.numel()).expect("count");
        value.data_mut().iter_mut().for_each(|e| *e /= count);
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    fn reduce(&self, op: &'static str, x: Var, axis: Option<usize>) -> Result<Tensor<T>> {
        let xd = self.data(x);
        match axis {
            None => Ok(Tensor::scalar(xd.iter().copied().sum())),
            Some(axis) => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = axis_dims(op, &shape, axis)?;
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..len {
                        let src = &xd[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let mut out_shape = shape;
                out_shape.remove(axis);
                Tensor::new(out_shape, out)
            }
        }
    }

    /// Mean softmax cross-entropy of `logits[N, K]` over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let k = shape[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no target positions"));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &ld[r * k..(r + 1) * k];
            let lse = log_sum_exp(row.iter().copied());
            for (p, &z) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            if let Some(t) = *target {
                total += lse - row[t];
            }
        }
        let n = T::from_usize(count).expect("count");
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Weighted mean of element-wise sigmoid binary cross-entropy,
    /// `Σ wᵢ·ℓ(xᵢ, yᵢ) / Σ wᵢ`. Zero weights drop a position entirely.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "binary_cross_entropy_with_logits",
                format!(
                    "{n} logits vs {} targets / {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(Error::shape(
                "binary_cross_entropy_with_logits",
                "total weight is zero",
            ));
        }
        let ld = self.data(logits);
        let mut total = T::zero();
        for i in 0..n {
            if weights[i] != T::zero() {
                let x = ld[i];
                let loss = x.max(T::zero()) - x * targets[i] + (-x.abs()).exp().ln_1p();
                total += weights[i] * loss;
            }
        }
        let value = Tensor::scalar(total / total_weight);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    for bi in 0..batch {
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &bd[bi * k * n..(bi + 1) * k * n];
                        let da_blk = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(g_blk, b_blk, da_blk, m, n, k);
                        } else {
                            gemm_nt(g_blk, b_blk, da_blk, m, n, k);
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    for bi in 0..batch {
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_blk = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        if trans_b {
                            gemm_tn_acc(g_blk, a_blk, db_blk, m, n, k);
                        } else {
                            gemm_tn_acc(a_blk, g_blk, db_blk, m, k, n);
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                let out_shape = node.value.shape();
                for v in [a, b] {
                    if self.wants(v) {
                        let contrib = reduce_broadcast(g, out_shape, self.shape(v));
                        self.accumulate(grads, v, contrib);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let out_shape = node.value.shape();
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(v) {
                        let ob = Broadcast::new(out_shape, self.shape(other));
                        let od = self.data(other);
                        let prod: Vec<T> =
                            g.iter().enumerate().map(|(i, &gi)| gi * od[ob.offset(i)]).collect();
                        let contrib = reduce_broadcast(&prod, out_shape, self.shape(v));
                        self.accumulate(grads, v, contrib);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.iter().map(|&gi| gi * factor).collect());
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) =
                    axis_dims("softmax", node.value.shape(), axis).expect("checked in forward");
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: T = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) =
                    axis_dims("log_softmax", node.value.shape(), axis).expect("checked in forward");
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let gsum: T = (0..len).map(|i| g[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = g[idx(i)] - out[idx(i)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm { x, rstd } => {
                let d = *node.value.shape().last().expect("non-scalar");
                let n = T::from_usize(d).expect("dim");
                let mut dx = vec![T::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &out[r * d..(r + 1) * d];
                    let g_mean = gr.iter().copied().sum::<T>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for i in 0..d {
                        dx[r * d + i] = rs * (gr[i] - g_mean - yr[i] * gy_mean);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Gelu { x } => {
                let half = T::lit(0.5);
                let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
                let dx = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                        gi * (cdf + v * pdf)
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Sigmoid { x } => {
                let dx = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, &s) in dt[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                            *d += s;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            &Op::Transpose { x, dim0, dim1 } => {
                let (_, dx) = swap_axes(g, node.value.shape(), dim0, dim1);
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, g.to_vec());
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = self.shape(x);
                let (outer, len, inner) = axis_dims("slice", in_shape, axis).expect("checked");
                let w = node.value.shape()[axis];
                let mut dx = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    dx[base..base + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += len;
                }
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let in_shape = self.shape(x);
                let scale = match node.op {
                    Op::Mean { .. } => T::one() / T::from_usize(numel(in_shape) / g.len()).expect("count"),
                    _ => T::one(),
                };
                let dx = match axis {
                    None => vec![g[0] * scale; numel(in_shape)],
                    Some(axis) => {
                        let (outer, len, inner) = axis_dims("reduce", in_shape, axis).expect("checked");
                        let mut dx = Vec::with_capacity(numel(in_shape));
                        for o in 0..outer {
                            for _ in 0..len {
                                dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                            }
                        }
                        dx
                    }
                };
                self.accumulate(grads, x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(*count).expect("count");
                let mut dx = vec![T::zero(); probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for c in 0..k {
                            dx[r * k + c] = probs[r * k + c] * scale;
                        }
                        dx[r * k + t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                total_weight,
            } => {
                let scale = g[0] / *total_weight;
                let dx = self
                    .data(*logits)
                    .iter()
                    .zip(targets.iter().zip(weights))
                    .map(|(&x, (&y, &w))| w * (sigmoid(x) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every node the loss reached.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Moves parameter gradients out, indexed for a store of `num_params` entries.
    pub fn into_param_grads(mut self, num_params: usize) -> ParamGrads<T> {
        let mut out = vec![None; num_params];
        for (id, v) in &self.params {
            if id.0 < num_params {
                out[id.0] = self.grads[v.0].take();
            }
        }
        ParamGrads { grads: out }
    }
}

// ------------------------------------------------------------- helpers

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}

fn axis_dims(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output indices to flat input indices under broadcasting.
enum Broadcast {
    Same,
    Suffix(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let trimmed: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead..]
        };
        if in_shape == out_shape {
            return Broadcast::Same;
        }
        if out_shape.ends_with(trimmed) {
            return Broadcast::Suffix(numel(trimmed));
        }
        let rank = out_shape.len();
        let pad = rank - in_shape.len();
        let mut strides = vec![0; rank];
        let mut s = 1;
        for i in (0..in_shape.len()).rev() {
            strides[pad + i] = if in_shape[i] == 1 { 0 } else { s };
            s *= in_shape[i];
        }
        let total = numel(out_shape);
        let mut offsets = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            offsets.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Broadcast::General(offsets)
    }

    #[inline]
    fn offset(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(o) => o[i],
        }
    }
}

fn reduce_broadcast<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    match Broadcast::new(out_shape, in_shape) {
        Broadcast::Same => g.to_vec(),
        Broadcast::Suffix(n) => {
            let mut r = vec![T::zero(); n];
            for chunk in g.chunks(n) {
                for (d, &s) in r.iter_mut().zip(chunk) {
                    *d += s;
                }
            }
            r
        }
        Broadcast::General(offsets) => {
            let mut r = vec![T::zero(); numel(in_shape)];
            for (i, &o) in offsets.iter().enumerate() {
                r[o] += g[i];
            }
            r
        }
    }
}

fn swap_axes<T: Scalar>(data: &[T], shape: &[usize], dim0: usize, dim1: usize) -> (Vec<usize>, Vec<T>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(dim0, dim1);
    if dim0 == dim1 {
        return (out_shape, data.to_vec());
    }
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(dim0, dim1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let k = 64_000;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, k]));
        let loss = g.cross_entropy(x, &[Some(17)]).unwrap();
        let v = g.value(loss).item();
        assert!((v - (k as f64).ln()).abs() < 1e-9);
        assert!((v - 11.0666).abs() < 1e-4);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let loss = g.sum(p, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, -2.0]));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s, None).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[8.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 1], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 14.0, 15.0, 16.0, 24.0, 25.0, 26.0]
        );
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn bce_of_zero_logits_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![5]));
        let loss = g
            .bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0, 0.0], &[1.0; 5])
            .unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);
    }
}
