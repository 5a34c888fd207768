use std::collections::HashMap;
use std::sync::Arc;

use super::{contract, split_axis, Contraction, ParamId, ParamStore, Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Contract(Box<Contraction>, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    MaskedFill(Var, Arc<Vec<bool>>),
    MaxAxis(Var, usize, Vec<u32>),
    MaxPool(Vec<Var>, Vec<u32>),
    Gather(Var, Vec<usize>),
    MulConst(Var, Vec<T>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat(Vec<Var>, usize),
    Stack(Vec<Var>, usize),
    SelectRows { mask: Arc<Vec<bool>>, on: Var, off: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Vec<T>),
    LstmStep(Box<LstmStep<T>>),
}

/// Saved inputs and activations of one fused LSTM step.
#[derive(Debug)]
struct LstmStep<T> {
    xw: Var,
    t: usize,
    prev: Option<Var>,
    w_hh: Var,
    mask: Option<Arc<Vec<bool>>>,
    /// Gate activations `[B, 4H]` in order input, forget, candidate, output.
    acts: Vec<T>,
    /// `tanh(c)` per row, `[B, H]`.
    tanh_c: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape recording one differentiable computation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`Graph::backward`] visits each node once, in
/// reverse. Parameters enter the tape through [`Graph::param`]; each
/// parameter maps to a single leaf no matter how often it is requested.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] call w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Arc::clone(&store.get(id).value),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// Einstein-summation contraction of two operands, e.g. `"bnmd,cmd->bcnm"`.
    pub fn contract(&mut self, spec: &str, a: Var, b: Var) -> Result<Var> {
        let spec = Contraction::parse(spec)?;
        let value = contract(&spec, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Contract(Box::new(spec), a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds `bias` along the trailing axis; `bias` has as many elements as
    /// the last extent of `x`, or exactly one.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap();
        let nb = self.value(bias).numel();
        if nb != last && nb != 1 {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[if nb == 1 { 0 } else { i % last }])
            .collect();
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax along `axis`, with max subtraction. `-inf` entries are
    /// allowed (they receive zero mass); NaN and all-`-inf` slices are rejected.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} for shape {:?}", vx.shape())));
        }
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                if max == T::neg_infinity() {
                    return Err(Error::invalid("softmax over a fully masked slice"));
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>, fill: T) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(Error::shape("masked_fill", vx.shape(), &[mask.len()]));
        }
        let data = vx
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaskedFill(x, mask), rg))
    }

    /// Maximum along `axis` (axis removed). Gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || vx.rank() < 2 {
            return Err(Error::invalid(format!("max axis {axis} for shape {:?}", vx.shape())));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let src = vx.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0usize;
                for k in 1..len {
                    if src[base + k * inner] > src[base + best * inner] {
                        best = k;
                    }
                }
                out.push(src[base + best * inner]);
                arg.push(best as u32);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::MaxAxis(x, axis, arg), rg))
    }

    /// Elementwise maximum over same-shaped tensors. Ties go to the lowest list index.
    pub fn maxpool(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Empty("maxpool over no tensors".into()))?;
        for &x in &xs[1..] {
            self.same_shape("maxpool", first, x)?;
        }
        let n = self.value(first).numel();
        let mut out = self.value(first).data().to_vec();
        let mut arg = vec![0u32; n];
        for (j, &x) in xs.iter().enumerate().skip(1) {
            for (i, &v) in self.value(x).data().iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    arg[i] = j as u32;
                }
            }
        }
        let shape = self.shape(first).to_vec();
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape, data: out }, Op::MaxPool(xs.to_vec(), arg), rg))
    }

    /// Row lookup: `table[V×e]`, `ids` → `[len(ids)×e]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::invalid(format!("gather table must be 2-D, got {:?}", vt.shape())));
        }
        let (rows, width) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Empty("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!("row {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(&vt.data()[id * width..(id + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), width],
                data,
            },
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, mask), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(Error::invalid(format!(
                "narrow axis {axis} [{start}, {}) of shape {:?}",
                start + len,
                vx.shape()
            )));
        }
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        let src = vx.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Narrow { x, axis, start }, rg))
    }

    /// Concatenation along an existing axis.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Empty("concat of no tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let lens: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Stacks same-shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Empty("stack of no tensors".into()))?;
        for &x in &xs[1..] {
            self.same_shape("stack", first, x)?;
        }
        let base = self.shape(first).to_vec();
        if axis > base.len() {
            return Err(Error::invalid(format!("stack axis {axis} for shape {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &x in xs {
                data.extend_from_slice(&self.value(x).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, xs.len());
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape, data }, Op::Stack(xs.to_vec(), axis), rg))
    }

    /// Row-wise select on 2-D tensors: row `r` comes from `on` where
    /// `mask[r]`, else from `off`.
    pub fn select_rows(&mut self, mask: Arc<Vec<bool>>, on: Var, off: Var) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let shape = self.shape(on).to_vec();
        if shape.len() != 2 || shape[0] != mask.len() {
            return Err(Error::shape("select_rows", &shape, &[mask.len()]));
        }
        let w = shape[1];
        let (a, b) = (self.value(on).data(), self.value(off).data());
        let mut data = Vec::with_capacity(a.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let rg = self.rg(on) || self.rg(off);
        Ok(self.push(Tensor { shape, data }, Op::SelectRows { mask, on, off }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[x.0].value).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// One fused LSTM step.
    ///
    /// `xw: [B, N, 4H]` holds the projected inputs of every position and
    /// step `t` is consumed here; `prev: [B, 2H]` is the previous state
    /// `[h | c]` (zero when `None`) and `w_hh: [H, 4H]` the recurrent
    /// weights, gate blocks ordered input, forget, candidate, output.
    /// Returns the new state `[B, 2H]`. Rows whose `mask` entry is false
    /// carry `prev` through unchanged.
    pub fn lstm_step(&mut self, xw: Var, t: usize, prev: Option<Var>, w_hh: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let sx = self.shape(xw).to_vec();
        if sx.len() != 3 || sx[2] % 4 != 0 || t >= sx[1] {
            return Err(Error::invalid(format!("lstm_step: inputs {sx:?} at step {t}")));
        }
        let (b, n, h4) = (sx[0], sx[1], sx[2]);
        let h = h4 / 4;
        if self.shape(w_hh) != [h, h4] {
            return Err(Error::shape("lstm_step", self.shape(w_hh), &[h, h4]));
        }
        if let Some(p) = prev {
            if self.shape(p) != [b, 2 * h] {
                return Err(Error::shape("lstm_step", self.shape(p), &[b, 2 * h]));
            }
        }
        if mask.as_ref().is_some_and(|m| m.len() != b) {
            return Err(Error::invalid(format!("lstm_step: mask length differs from batch {b}")));
        }
        let mut acts = vec![T::zero(); b * h4];
        let xv = self.value(xw).data();
        for r in 0..b {
            let at = (r * n + t) * h4;
            acts[r * h4..(r + 1) * h4].copy_from_slice(&xv[at..at + h4]);
        }
        let pv = prev.map(|p| Arc::clone(&self.nodes[p.0].value));
        if let Some(pv) = &pv {
            T::gemm(b, h, h4, pv.data(), (2 * h, 1), self.value(w_hh).data(), (h4, 1), T::one(), &mut acts);
        }
        let mut out = vec![T::zero(); b * 2 * h];
        let mut tanh_c = vec![T::zero(); b * h];
        for r in 0..b {
            let state = &mut out[r * 2 * h..(r + 1) * 2 * h];
            if mask.as_ref().is_some_and(|m| !m[r]) {
                if let Some(pv) = &pv {
                    state.copy_from_slice(&pv.data()[r * 2 * h..(r + 1) * 2 * h]);
                }
                continue;
            }
            let a = &mut acts[r * h4..(r + 1) * h4];
            for j in 0..h {
                let i = sigmoid(a[j]);
                let f = sigmoid(a[h + j]);
                let g = a[2 * h + j].tanh();
                let o = sigmoid(a[3 * h + j]);
                (a[j], a[h + j], a[2 * h + j], a[3 * h + j]) = (i, f, g, o);
                let c_prev = pv.as_ref().map_or(T::zero(), |p| p.data()[r * 2 * h + h + j]);
                let c = f * c_prev + i * g;
                let tc = c.tanh();
                tanh_c[r * h + j] = tc;
                state[j] = o * tc;
                state[h + j] = c;
            }
        }
        let rg = self.rg(xw) || self.rg(w_hh) || prev.is_some_and(|p| self.rg(p));
        let op = Op::LstmStep(Box::new(LstmStep {
            xw,
            t,
            prev,
            w_hh,
            mask,
            acts,
            tanh_c,
        }));
        Ok(self.push(Tensor { shape: vec![b, 2 * h], data: out }, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over all elements of the numerically stable binary cross-entropy
    /// between `sigmoid(logits)` and `targets ∈ {0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.numel() != targets.len() {
            return Err(Error::shape("bce_with_logits", vl.shape(), &[targets.len()]));
        }
        if vl.data().iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let loss = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.to_vec()), rg))
    }

    /// Reverse sweep from the scalar `loss`. Node gradients from any earlier
    /// sweep are discarded; parameter gradients are added onto `store`, so
    /// repeated calls without [`ParamStore::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                for (acc, &d) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
        Ok(())
    }

    /// Adds `f`'s contribution into the gradient buffer of `target`.
    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut [T], &Tensor<T>)) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let buf = self.grads[target.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf, &self.nodes[target.0].value);
    }

    fn backprop_lstm(&mut self, step: &LstmStep<T>, g: &[T]) {
        let (xw, t, w_hh) = (step.xw, step.t, step.w_hh);
        let (b, n, h4) = {
            let s = self.shape(xw);
            (s[0], s[1], s[2])
        };
        let h = h4 / 4;
        let pv = step.prev.map(|p| Arc::clone(&self.nodes[p.0].value));
        let one = T::one();
        let mut dpre = vec![T::zero(); b * h4];
        let mut dprev = vec![T::zero(); b * 2 * h];
        for r in 0..b {
            let go = &g[r * 2 * h..(r + 1) * 2 * h];
            if step.mask.as_ref().is_some_and(|m| !m[r]) {
                dprev[r * 2 * h..(r + 1) * 2 * h].copy_from_slice(go);
                continue;
            }
            let a = &step.acts[r * h4..(r + 1) * h4];
            let d = &mut dpre[r * h4..(r + 1) * h4];
            for j in 0..h {
                let (i, f, gc, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                let tc = step.tanh_c[r * h + j];
                let dh = go[j];
                let dc = go[h + j] + dh * o * (one - tc * tc);
                let c_prev = pv.as_ref().map_or(T::zero(), |p| p.data()[r * 2 * h + h + j]);
                d[j] = dc * gc * i * (one - i);
                d[h + j] = dc * c_prev * f * (one - f);
                d[2 * h + j] = dc * i * (one - gc * gc);
                d[3 * h + j] = dh * tc * o * (one - o);
                dprev[r * 2 * h + h + j] = dc * f;
            }
        }
        self.accumulate(xw, |buf, _| {
            for r in 0..b {
                let at = (r * n + t) * h4;
                add_into(&mut buf[at..at + h4], &dpre[r * h4..(r + 1) * h4]);
            }
        });
        let (Some(prev), Some(pv)) = (step.prev, pv) else { return };
        // dW_hh = h_prevᵀ · dpre, with h_prev the first half of each state row
        self.accumulate(w_hh, |buf, _| T::gemm(h, b, h4, pv.data(), (1, 2 * h), &dpre, (h4, 1), one, buf));
        if self.rg(prev) {
            let wv = Arc::clone(&self.nodes[w_hh.0].value);
            let mut dh_prev = vec![T::zero(); b * h];
            T::gemm(b, h4, h, &dpre, (h4, 1), wv.data(), (1, h4), T::zero(), &mut dh_prev);
            for r in 0..b {
                if step.mask.as_ref().is_some_and(|m| !m[r]) {
                    continue;
                }
                add_into(&mut dprev[r * 2 * h..r * 2 * h + h], &dh_prev[r * h..(r + 1) * h]);
            }
            self.accumulate(prev, |buf, _| add_into(buf, &dprev));
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let out = Arc::clone(&self.nodes[i].value);
        // Ops hold only indices and small metadata; take them out so that
        // gradient buffers can be borrowed mutably while reading the op.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let bv = Arc::clone(&self.nodes[b.0].value);
                let av = Arc::clone(&self.nodes[a.0].value);
                // dA = dC · Bᵀ
                self.accumulate(a, |buf, _| {
                    T::gemm(m, n, k, g, (n, 1), bv.data(), (1, n), T::one(), buf)
                });
                // dB = Aᵀ · dC
                self.accumulate(b, |buf, _| {
                    T::gemm(k, m, n, av.data(), (1, k), g, (n, 1), T::one(), buf)
                });
            }
            Op::Contract(spec, a, b) => {
                let (a, b) = (*a, *b);
                let gt = Tensor {
                    shape: out.shape().to_vec(),
                    data: g.to_vec(),
                };
                if self.rg(a) {
                    let ga = contract(&spec.lhs_grad(), &gt, self.value(b)).expect("valid by construction");
                    self.accumulate(a, |buf, _| add_into(buf, ga.data()));
                }
                if self.rg(b) {
                    let gb = contract(&spec.rhs_grad(), self.value(a), &gt).expect("valid by construction");
                    self.accumulate(b, |buf, _| add_into(buf, gb.data()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |buf, _| add_into(buf, g));
                self.accumulate(*b, |buf, _| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |buf, _| add_into(buf, g));
                self.accumulate(*b, |buf, _| buf.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                self.accumulate(a, |buf, _| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(bv.data()) {
                        *x += d * y;
                    }
                });
                self.accumulate(b, |buf, _| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(av.data()) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, |buf, _| buf.iter_mut().zip(g).for_each(|(x, &d)| *x += d * s));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, |buf, _| add_into(buf, g));
                self.accumulate(*bias, |buf, _| {
                    let nb = buf.len();
                    for (i, &d) in g.iter().enumerate() {
                        buf[i % nb] += d;
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(*a, |buf, _| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *x += d * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(*a, |buf, _| {
                    for ((x, &d), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                        *x += d * y * (T::one() - y);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                self.accumulate(*a, |buf, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                buf[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => {
                self.accumulate(*a, |buf, _| {
                    for ((x, &d), &m) in buf.iter_mut().zip(g).zip(mask.iter()) {
                        if !m {
                            *x += d;
                        }
                    }
                });
            }
            Op::MaxAxis(a, axis, arg) => {
                let axis = *axis;
                self.accumulate(*a, |buf, input| {
                    let (_, len, inner) = split_axis(input.shape(), axis);
                    for (j, (&d, &k)) in g.iter().zip(arg).enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        buf[o * len * inner + k as usize * inner + i] += d;
                    }
                });
            }
            Op::MaxPool(xs, arg) => {
                for (j, &x) in xs.iter().enumerate() {
                    self.accumulate(x, |buf, _| {
                        for ((b, &d), &w) in buf.iter_mut().zip(g).zip(arg) {
                            if w as usize == j {
                                *b += d;
                            }
                        }
                    });
                }
            }
            Op::Gather(table, ids) => {
                self.accumulate(*table, |buf, t| {
                    let w = t.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::MulConst(a, mask) => {
                self.accumulate(*a, |buf, _| {
                    for ((x, &d), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *x += d * m;
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (axis, start) = (*axis, *start);
                let len = out.shape()[axis];
                self.accumulate(*x, |buf, input| {
                    let (outer, full, inner) = split_axis(input.shape(), axis);
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        let from = o * len * inner;
                        add_into(&mut buf[to..to + len * inner], &g[from..from + len * inner]);
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                let (outer, total, inner) = split_axis(out.shape(), axis);
                let mut offset = 0;
                for &x in xs {
                    let l = self.shape(x)[axis];
                    self.accumulate(x, |buf, _| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(&mut buf[o * l * inner..(o + 1) * l * inner], &g[from..from + l * inner]);
                        }
                    });
                    offset += l;
                }
            }
            Op::Stack(xs, axis) => {
                let (outer, count, inner) = split_axis(out.shape(), *axis);
                for (j, &x) in xs.iter().enumerate() {
                    self.accumulate(x, |buf, _| {
                        for o in 0..outer {
                            let from = (o * count + j) * inner;
                            add_into(&mut buf[o * inner..(o + 1) * inner], &g[from..from + inner]);
                        }
                    });
                }
            }
            Op::LstmStep(step) => self.backprop_lstm(step, g),
            Op::SelectRows { mask, on, off } => {
                let w = out.shape()[1];
                for (target, want) in [(*on, true), (*off, false)] {
                    self.accumulate(target, |buf, _| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(&mut buf[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => self.accumulate(*x, |buf, _| add_into(buf, g)),
            Op::Sum(x) => {
                let d = g[0];
                self.accumulate(*x, |buf, _| buf.iter_mut().for_each(|b| *b += d));
            }
            Op::Mean(x) => {
                self.accumulate(*x, |buf, _| {
                    let d = g[0] / T::of(buf.len() as f64);
                    buf.iter_mut().for_each(|b| *b += d);
                });
            }
            Op::BceWithLogits(logits, targets) => {
                let d = g[0];
                self.accumulate(*logits, |buf, input| {
                    for ((b, &x), &y) in buf.iter_mut().zip(input.data()).zip(targets) {
                        *b += d * (sigmoid(x) - y);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn elementwise_shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.maxpool(&[a, b]).is_err());
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let s = g.sum(wv);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(w), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let s = g.sum(wv);
        g.backward(s, &mut store).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(w), &[2.0, 2.0]);
        assert_eq!(g.grad(wv).unwrap(), &[1.0, 1.0]);
        store.zero_grad();
        assert_eq!(store.grad(w), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::<f64>::zeros(&[2]));
        let mut g = Graph::new();
        assert_eq!(g.param(&store, w), g.param(&store, w));
    }

    #[test]
    fn softmax_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let nan = g.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(g.softmax(nan, 0).is_err());
        let masked = g.constant(t(&[3], &[1.0, f64::NEG_INFINITY, 1.0]));
        let y = g.softmax(masked, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 0.5]);
        let dead = g.constant(t(&[2], &[f64::NEG_INFINITY; 2]));
        assert!(g.softmax(dead, 0).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let v = g.constant(t(&[2], &[4.0, -1.0]));
        let m = g.maxpool(&[v]).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, -1.0]);
        let a = g.constant(t(&[2], &[1.0, 5.0]));
        let b = g.constant(t(&[2], &[3.0, 2.0]));
        let m = g.maxpool(&[a, b]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        assert!(g.maxpool(&[]).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[1.0, 2.0]));
        let m = g.maxpool(&[a, b]).unwrap();
        let s = g.sum(m);
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let x = g.constant(Tensor::<f64>::full(&[10], 2.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn narrow_concat_stack_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_fn(&[2, 6], |i| i as f64));
        let parts: Vec<Var> = (0..3).map(|j| g.narrow(x, 1, 2 * j, 2).unwrap()).collect();
        let back = g.concat(&parts, 1).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let rows: Vec<Var> = (0..2).map(|r| g.narrow(x, 0, r, 1).unwrap()).collect();
        let rows: Vec<Var> = rows.into_iter().map(|r| g.reshape(r, &[6]).unwrap()).collect();
        let st = g.stack(&rows, 0).unwrap();
        assert_eq!(g.value(st), g.value(x));
        let st1 = g.stack(&rows, 1).unwrap();
        assert_eq!(g.shape(st1), &[6, 2]);
        assert_eq!(g.value(st1).at(&[4, 1]), 10.0);
    }

    #[test]
    fn bce_with_logits_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let l = g.bce_with_logits(x, &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let big = g.constant(t(&[2], &[800.0, -800.0]));
        let l = g.bce_with_logits(big, &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
