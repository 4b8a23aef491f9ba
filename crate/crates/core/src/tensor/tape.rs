use std::cell::{Cell, Ref, RefCell};

use super::kernels::{self, around, inverse_axes};
use super::{cast, numel, Element, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, T),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Mean {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(ParamId, usize)>>,
    macs: Cell<u64>,
    bytes: Cell<usize>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node(var.id)
    }

    /// Gradient of `var`, or zeros if nothing reached it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub(crate) fn by_node(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            macs: Cell::new(0),
            bytes: Cell::new(0),
            consumed: Cell::new(false),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let saved = match &op {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        };
        self.bytes
            .set(self.bytes.get() + (value.numel() + saved) * std::mem::size_of::<T>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradient (inputs under test, probes).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter as a leaf of this tape.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.bindings.borrow_mut().push((id, v.id));
        v
    }

    pub(crate) fn bindings(&self) -> Vec<(ParamId, usize)> {
        self.bindings.borrow().clone()
    }

    /// Multiply-accumulates executed by forward matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    /// Bytes held by recorded values and saved backward state.
    pub fn bytes(&self) -> usize {
        self.bytes.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&base, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively into every input of every op. Saved
    /// backward state is released afterwards; values stay readable but the
    /// tape cannot be differentiated again.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = loss.shape();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            n.op = Op::Leaf;
        }
        self.consumed.set(true);
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<T: Element>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}

fn backprop<T: Element>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |s| add_into(s, g));
            acc(grads, nodes, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |s| add_into(s, g));
            acc(grads, nodes, *b, |s| {
                for (x, &y) in s.iter_mut().zip(g) {
                    *x = *x - y;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            acc(grads, nodes, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddBias { x, bias } => {
            acc(grads, nodes, *x, |s| add_into(s, g));
            acc(grads, nodes, *bias, |s| {
                let c = s.len();
                for row in g.chunks(c) {
                    add_into(s, row);
                }
            });
        }
        Op::Scale(x, f) => {
            acc(grads, nodes, *x, |s| {
                for (x, &y) in s.iter_mut().zip(g) {
                    *x += y * *f;
                }
            });
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_shared,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            // dA = dC · Bᵀ
            acc(grads, nodes, *a, |s| {
                kernels::gemm(g, bv, s, batch, m, n, k, *b_shared, false, true, true);
            });
            // dB = Aᵀ · dC, summed over the batch when B is shared.
            acc(grads, nodes, *b, |s| {
                if *b_shared {
                    kernels::gemm(av, g, s, 1, k, batch * m, n, true, true, false, true);
                } else {
                    kernels::gemm(av, g, s, batch, k, m, n, false, true, false, true);
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = around(node.value.shape(), *axis);
            acc(grads, nodes, *x, |s| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            s[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = nodes[*gamma].value.data();
            let c = gv.len();
            acc(grads, nodes, *gamma, |s| {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            });
            acc(grads, nodes, *beta, |s| {
                for grow in g.chunks(c) {
                    add_into(s, grow);
                }
            });
            acc(grads, nodes, *x, |s| {
                let cf: T = cast(c as f64);
                for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hrow[j];
                    }
                    mean_d = mean_d / cf;
                    mean_dh = mean_dh / cf;
                    let out = &mut s[r * c..(r + 1) * c];
                    for j in 0..c {
                        let d = grow[j] * gv[j];
                        out[j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            let half: T = cast(0.5);
            let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi: T = cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            acc(grads, nodes, *x, |s| {
                for i in 0..s.len() {
                    let v = xv[i];
                    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                    s[i] += g[i] * (cdf + v * pdf);
                }
            });
        }
        Op::Mean { x, axis } => {
            let shape = nodes[*x].value.shape();
            let (outer, len, inner) = around(shape, *axis);
            let scale: T = cast(1.0 / len as f64);
            acc(grads, nodes, *x, |s| {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            s[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Sum(x) => {
            acc(grads, nodes, *x, |s| s.iter_mut().for_each(|v| *v += g[0]));
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = around(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                acc(grads, nodes, p, |s| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = around(nodes[*x].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            acc(grads, nodes, *x, |s| {
                for o in 0..outer {
                    let dst = &mut s[(o * full + start) * inner..(o * full + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Reshape(x) => acc(grads, nodes, *x, |s| add_into(s, g)),
        Op::Permute { x, axes } => {
            let back = kernels::permute(g, node.value.shape(), &inverse_axes(axes));
            acc(grads, nodes, *x, |s| add_into(s, &back));
        }
        Op::GatherRows { x, index } => {
            let xs = nodes[*x].value.shape();
            let (l, c) = (xs[1], xs[2]);
            let lo = node.value.shape()[1];
            acc(grads, nodes, *x, |s| {
                for (r, &src) in index.iter().enumerate() {
                    let b = r / lo;
                    let dst = &mut s[(b * l + src) * c..(b * l + src + 1) * c];
                    add_into(dst, &g[r * c..(r + 1) * c]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[*logits].value.shape()[1];
            let scale = g[0] / cast(labels.len() as f64);
            acc(grads, nodes, *logits, |s| {
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        s[b * k + j] += (probs[b * k + j] - onehot) * scale;
                    }
                }
            });
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn rg2(&self, other: &Self) -> bool {
        self.requires_grad() || other.requires_grad()
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, &a, &b));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let a = self.value();
        let b = other.value();
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("same shape")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let v = self.zip_with(other, |a, b| a + b);
        Ok(self.tape.push(v, Op::Add(self.id, other.id), self.rg2(other)))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let v = self.zip_with(other, |a, b| a - b);
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), self.rg2(other)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let v = self.zip_with(other, |a, b| a * b);
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), self.rg2(other)))
    }

    /// Add a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let (xs, bs) = (self.shape(), bias.shape());
        if bs.len() != 1 || xs.last() != bs.first() {
            return Err(shape_err("add_bias", &xs, &bs));
        }
        let v = {
            let x = self.value();
            let b = bias.value();
            let c = bs[0];
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                add_into(row, b.data());
            }
            Tensor::new(&xs, out)?
        };
        Ok(self.tape.push(
            v,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            self.rg2(bias),
        ))
    }

    pub fn scale(&self, factor: f64) -> Self {
        let f: T = cast(factor);
        let v = self.value().map(|x| x * f);
        self.tape.push(v, Op::Scale(self.id, f), self.requires_grad())
    }

    /// `[..., m, k] × [..., k, n]`. The right operand may be a plain `[k, n]`
    /// matrix shared across the left operand's batch extents.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty();
        if k != k2 || (!b_shared && batch_a != batch_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch = numel(batch_a);
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let a = self.value();
            let b = other.value();
            if b_shared {
                kernels::gemm(a.data(), b.data(), &mut out, 1, batch * m, k, n, true, false, false, false);
            } else {
                kernels::gemm(a.data(), b.data(), &mut out, batch, m, k, n, false, false, false, false);
            }
        }
        self.tape
            .macs
            .set(self.tape.macs.get() + (batch * m * k * n) as u64);
        Ok(self.tape.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            self.rg2(other),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let out = kernels::softmax(self.value().data(), &shape, axis);
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::Softmax { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let shape = self.shape();
        let c = *shape.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err("layer_norm", &shape, &gamma.shape()));
        }
        let rows = numel(&shape) / c.max(1);
        let eps: T = cast(eps);
        let cf: T = cast(c as f64);
        let mut xhat = Vec::with_capacity(rows * c);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        {
            let x = self.value();
            let gv = gamma.value();
            let bv = beta.value();
            for row in x.data().chunks(c) {
                let mean = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for j in 0..c {
                    let h = (row[j] - mean) * r;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Self {
        let half: T = cast(0.5);
        let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
        let v = self
            .value()
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.tape.push(v, Op::Gelu(self.id), self.requires_grad())
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = around(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.value();
            let d = x.data();
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + j) * inner + i];
                    }
                }
            }
        }
        let lf: T = cast(len as f64);
        out.iter_mut().for_each(|v| *v = *v / lf);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape.push(
            Tensor::new(&out_shape, out)?,
            Op::Mean { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Self {
        let s = self.value().sum_all();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::IndexOutOfBounds {
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, full, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.value();
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(&out_shape, out)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("axes {axes:?} invalid for shape {shape:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = kernels::permute(self.value().data(), &shape, axes);
        Ok(self.tape.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::InvalidAxis { axis: a.max(b), rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Row gather on a `[B, L, C]` tensor: `out[b, j, :] = x[b, index[b][j], :]`.
    /// `index` is row-major `[B, L']`.
    pub fn gather_rows(&self, index: &[usize], rows_out: usize) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 3 || index.len() != shape[0] * rows_out {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("index of length {} for input {:?}", index.len(), shape),
            });
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        if let Some(&bad) = index.iter().find(|&&i| i >= l) {
            return Err(Error::IndexOutOfBounds { index: bad, len: l });
        }
        let mut out = Vec::with_capacity(b * rows_out * c);
        {
            let x = self.value();
            for (r, &src) in index.iter().enumerate() {
                let bi = r / rows_out;
                out.extend_from_slice(&x.data()[(bi * l + src) * c..(bi * l + src + 1) * c]);
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[b, rows_out, c], out)?,
            Op::GatherRows {
                x: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!("logits {:?} with {} labels", shape, labels.len()),
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::IndexOutOfBounds { index: bad, len: k });
        }
        let probs = kernels::softmax(self.value().data(), &shape, 1);
        let mut loss = T::zero();
        {
            let x = self.value();
            for (b, &y) in labels.iter().enumerate() {
                let row = &x.data()[b * k..(b + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                loss += lse - row[y];
            }
        }
        loss = loss / cast(labels.len() as f64);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            self.requires_grad(),
        ))
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(&m).unwrap().to_tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(&b).unwrap().to_tensor().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_of_matmul_grad_is_b_transposed_broadcast() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]));
        let b = tape.constant(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let loss = a.matmul(&b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        // d/dA_ij sum(AB) = sum_k B_jk
        assert_eq!(g.wrt(a).data(), &[0.30000000000000004, 0.7, 1.1, 0.30000000000000004, 0.7, 1.1]);
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        for v in x.softmax(0).unwrap().to_tensor().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.softmax(0).unwrap().to_tensor();
        for (v, want) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((v - want).abs() < 1e-4);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = x.softmax(0).unwrap().to_tensor();
        assert_eq!(y.data(), &[1.0, 0.0]);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 5.0));
        assert_eq!(x.layer_norm(&g, &b, 1e-5).unwrap().to_tensor().data(), &[0.0; 4]);
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        assert_eq!(x.layer_norm(&g, &b, 0.0).unwrap().to_tensor().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gather_rows_permutes_and_checks_bounds() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 3, 2], &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5]));
        let y = x.gather_rows(&[2, 0, 1], 3).unwrap();
        assert_eq!(y.to_tensor().data(), &[2.0, 2.5, 0.0, 0.5, 1.0, 1.5]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(
            x.gather_rows(&[0, 3, 1], 3),
            Err(Error::IndexOutOfBounds { index: 3, len: 3 })
        ));
    }

    #[test]
    fn misc_ops() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(z.gelu().to_tensor().data(), &[0.0]);
        let m = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(m.mean(1).unwrap().to_tensor().data(), &[2.0, 6.0]);
        let h = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let c = tape.concat(&[h, h], 2).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 8]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[3], &[1.0, -2.0, 4.0]));
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0; 3]);

        let tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[3], &[1.0, -2.0, 4.0]));
        let loss = p.mul(&p).unwrap().sum().scale(0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
        let s = p.sum();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn detached_values_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]));
        let d = p.detach();
        let loss = p.mul(&d).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(d).is_none());
        assert_eq!(g.wrt(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = p.add(&p).unwrap().add(&p).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = l.cross_entropy(&[0, 3]).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
    }
}
