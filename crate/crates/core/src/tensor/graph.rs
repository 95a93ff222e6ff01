//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the record in reverse once
//! and returns gradients for the requested nodes. Each graph supports a single
//! backward pass, after which it is marked consumed.
//!
//! Broadcasting is limited to leading-batch expansion: the right operand of
//! [`Graph::add`] may have a shape equal to a suffix of the left operand's
//! shape, and [`Graph::expand_leading`] prepends a batch axis. Every other
//! shape disagreement is an error.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm, Layout};
use super::value::{axis_split, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    ExpandLeading(Var),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Tensor },
    SoftmaxXent { logits: Var, targets: Tensor, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by node.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    macs: u64,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            macs: 0,
            consumed: false,
        }
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
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
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.index]
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("param")?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("constant")?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Value of `v`, failing if it contains NaN or infinity.
    pub fn checked_value(&self, v: Var, op: &'static str) -> Result<&Tensor> {
        let t = self.value(v);
        t.check_finite(op)?;
        Ok(t)
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let w = tb.len();
        let data = ta
            .data()
            .chunks(w.max(1))
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x + y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise `a - b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x - y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.broadcast_zip(a, b, |x, y| x * y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Elementwise product with a constant tensor of identical shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(a), c.shape()));
        }
        c.check_finite("mul_const")?;
        let ta = self.value(a);
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// `a[..., k] · w[k, n] -> [..., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", &sa, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        self.macs += (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.grad_of(&[a, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, w), rg))
    }

    /// Batched product over matching leading axes: `a[..., m, k] · b[..., k, n]`,
    /// or `a · bᵀ` with `b[..., n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2 && sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let bl = if trans_b {
                Layout::Transposed
            } else {
                Layout::Normal
            };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    Layout::Normal,
                    &db[i * k * n..(i + 1) * k * n],
                    bl,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", tx.rank()),
            ));
        }
        let out = softmax_values(tx, axis);
        out.check_finite("softmax")?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = tx.len() / d;
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(sx, out);
        out.check_finite("layer_norm")?;
        let rg = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.grad_of(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start > end || end > sx[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {sx:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let tx = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&tx[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = sx;
        shape[axis] = end - start;
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(Error::invalid("stack", format!("axis {axis} out of range")));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let tx = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &tx[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sx;
        shape.remove(axis);
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::MeanAxis { x, axis },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", sx.len()),
            ));
        }
        let out = permute_values(self.value(x), perm);
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Repeat `x` along a new leading axis of extent `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let mut data = Vec::with_capacity(n * tx.len());
        for _ in 0..n {
            data.extend_from_slice(tx.data());
        }
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ExpandLeading(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_loss", self.shape(logits), targets.shape()));
        }
        if targets.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::invalid("bce_loss", "targets must lie in [0, 1]"));
        }
        let tx = self.value(logits);
        let n = tx.len().max(1) as f64;
        let loss = tx
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            rg,
        ))
    }

    /// Mean over rows of `-Σ_c y_c log softmax(x)_c`, with the class axis last.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() || targets.rank() == 0 {
            return Err(Error::shape("ce_loss", self.shape(logits), targets.shape()));
        }
        if targets.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::invalid("ce_loss", "soft targets must lie in [0, 1]"));
        }
        let tx = self.value(logits);
        let c = *tx.shape().last().unwrap();
        let rows = tx.len() / c;
        let mut probs = vec![0.0; tx.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                loss -= targets.data()[r * c + j] * logp;
            }
        }
        loss /= rows as f64;
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Nodes that do not influence the loss receive zero gradients. The graph
    /// is consumed: a second call fails.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::Consumed);
        }
        for &v in std::iter::once(&loss).chain(wrt) {
            if v.graph != self.id || v.index >= self.nodes.len() {
                return Err(Error::UnknownNode(v.index));
            }
        }
        if !self.value(loss).shape().iter().all(|&e| e == 1) {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.checked_value(loss, "backward")?;
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(self.shape(loss)));
        let wanted: std::collections::HashSet<usize> = wrt.iter().map(|v| v.index).collect();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if wanted.contains(&i) {
                grads[i] = Some(g);
            }
        }

        let mut out = GradientMap::default();
        for &v in wrt {
            let g = grads
                .get(v.index)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            g.check_finite("backward")?;
            out.grads.insert(v, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.index].requires_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.index].requires_grad {
                    let sb = self.shape(*b).to_vec();
                    let w = sb.iter().product::<usize>().max(1);
                    let mut gb = vec![0.0; w];
                    for chunk in g.data().chunks(w) {
                        for (d, s) in gb.iter_mut().zip(chunk) {
                            *d += sign * s;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(sb, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, tb, |x, y| x * y);
                let gb = zip_map(g, ta, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::MulConst(a, c) => self.accumulate(grads, *a, zip_map(g, c, |x, y| x * y)),
            Op::MatMul(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = ta.len() / k.max(1);
                if self.nodes[a.index].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::Normal, tw.data(), Layout::Transposed, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.nodes[w.index].requires_grad {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.rank();
                let (m, k) = (ta.shape()[r - 2], ta.shape()[r - 1]);
                let n = g.shape()[r - 1];
                let batch = ta.len() / (m * k).max(1);
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                if self.nodes[a.index].requires_grad {
                    let mut ga = vec![0.0; ta.len()];
                    let bl = if *trans_b { Layout::Normal } else { Layout::Transposed };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &dg[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &db[i * k * n..(i + 1) * k * n],
                            bl,
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.nodes[b.index].requires_grad {
                    let mut gb = vec![0.0; tb.len()];
                    for i in 0..batch {
                        let (ga_, gg, out) = (
                            &da[i * m * k..(i + 1) * m * k],
                            &dg[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                        if *trans_b {
                            gemm(n, m, k, gg, Layout::Transposed, ga_, Layout::Normal, 0.0, out);
                        } else {
                            gemm(k, m, n, ga_, Layout::Transposed, gg, Layout::Normal, 0.0, out);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + j;
                        let dot: f64 = (0..n).map(|t| g.data()[idx(t)] * y.data()[idx(t)]).sum();
                        for t in 0..n {
                            gx[idx(t)] = y.data()[idx(t)] * (g.data()[idx(t)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let tg = self.value(*gamma).data();
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = vec![0.0; xhat.len()];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * tg[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![d], ggamma));
                self.accumulate(grads, *beta, Tensor::from_parts(vec![d], gbeta));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, zip_map(g, tx, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v).to_vec();
                    let n = s[*axis];
                    if self.nodes[v.index].requires_grad {
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(s, part));
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&sx, *axis);
                let w = g.shape()[*axis];
                let mut gx = vec![0.0; sx.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(sx, gx));
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&sx, *axis);
                let inv = 1.0 / n as f64;
                let mut gx = vec![0.0; sx.iter().product()];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            gx[(o * n + i) * inner + j] = g.data()[o * inner + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(sx, gx));
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_values(g, &inv));
            }
            Op::ExpandLeading(x) => {
                let sx = self.shape(*x).to_vec();
                let w = sx.iter().product::<usize>().max(1);
                let mut gx = vec![0.0; w];
                for chunk in g.data().chunks(w) {
                    for (d, s) in gx.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(sx, gx));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), s));
            }
            Op::BceWithLogits { logits, targets } => {
                let s = g.item() / targets.len().max(1) as f64;
                let gx = zip_map(self.value(*logits), targets, |x, y| s * (sigmoid(x) - y));
                self.accumulate(grads, *logits, gx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let c = *targets.shape().last().unwrap();
                let rows = targets.len() / c;
                let s = g.item() / rows as f64;
                let mut gx = vec![0.0; probs.len()];
                for r in 0..rows {
                    let ysum: f64 = targets.data()[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        gx[r * c + j] = s * (probs[r * c + j] * ysum - targets.data()[r * c + j]);
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(targets.shape().to_vec(), gx));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn softmax_values(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + j;
            let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

pub(crate) fn permute_values(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    if t.is_empty() {
        return Tensor::from_parts(out_shape, out);
    }
    // Innermost output axis is copied with a strided loop.
    let last = rank.saturating_sub(1);
    let (n_last, s_last) = if rank == 0 { (1, 0) } else { (out_shape[last], strides[last]) };
    loop {
        let base: usize = (0..last).map(|a| idx[a] * strides[a]).sum();
        for i in 0..n_last {
            out.push(src[base + i * s_last]);
        }
        // advance the outer multi-index
        let mut a = last;
        loop {
            if a == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
