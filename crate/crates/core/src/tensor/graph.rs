use super::param::{ParamId, ParamStore};
use super::{gemm, split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Clamp(Var, f64, f64),
    NormalizeLast(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")))
    }
}

/// For each output position of `permute(shape, axes)`, the flat index of the
/// input element it reads.
fn permute_source_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is recorded on the graph (see [`Graph::grad`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a trainable parameter; `backward` accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same size");
        self.push_op(value, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x + bias`, with `bias` broadcast over the leading dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (rx, rb) = (tx.rank(), tb.rank());
        if rb > rx || tx.shape()[rx - rb..] != *tb.shape() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let nb = tb.len().max(1);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % nb])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&a| a <= 0.0) {
            return Err(Error::domain("log", "non-positive argument"));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp range [{lo}, {hi}]")));
        }
        Ok(self.unary(x, Op::Clamp(x, lo, hi), |a| a.clamp(lo, hi)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push_op(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Maximum over all elements; the gradient goes to the first maximiser.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (idx, &m) = t
            .data()
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &f64)>, (i, v)| match best {
                Some((_, b)) if *b >= *v => best,
                _ => Some((i, v)),
            })
            .ok_or_else(|| Error::shape("max", "empty tensor"))?;
        Ok(self.push_op(Tensor::scalar(m), Op::Max(x, idx), &[x]))
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        check_axis("sum_axis", t.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::SumAxis(x, axis), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    /// Reorder axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank()
            || axes
                .iter()
                .any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for {:?}", t.shape()),
            ));
        }
        let map = permute_source_index(t.shape(), axes);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let shape = axes.iter().map(|&a| t.shape()[a]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(value, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected 2-D, got {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..][..block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        check_axis("slice", t.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of axis {axis} in {:?}", start + len, t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Scale each vector along the last axis to unit L2 norm. Vectors with
    /// norm below `eps` are divided by `eps` instead.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("normalize_last", "scalar input"))?;
        let mut out = t.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::NormalizeLast(x, eps), &[x]))
    }

    /// Reverse pass from the scalar `root`.
    ///
    /// Gradients for every node are kept on the graph (overwriting any
    /// previous pass); gradients reaching parameter leaves are added to the
    /// store, so repeated calls accumulate there.
    pub fn backward(&mut self, root: Var, params: &mut ParamStore) -> Result<()> {
        let rt = &self.nodes[root.0].value;
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lower, params);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamStore,
    ) {
        let n = g.len();
        // Elementwise accumulate `f(i)` into the gradient of `v`.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if self.needs(v) {
                let len = self.nodes[v.0].value.len();
                let slot = grad_slot(grads, v, len);
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += f(i);
                }
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::Add(a, b) => {
                acc(grads, *a, &|i| g[i]);
                acc(grads, *b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|i| g[i]);
                acc(grads, *b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(grads, *a, &|i| g[i] * vb[i]);
                acc(grads, *b, &|i| g[i] * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(grads, *a, &|i| g[i] / vb[i]);
                acc(grads, *b, &|i| -g[i] * va[i] / (vb[i] * vb[i]));
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, &|i| g[i]);
                if self.needs(*b) {
                    let nb = self.nodes[b.0].value.len();
                    let slot = grad_slot(grads, *b, nb);
                    for (i, gi) in g.iter().enumerate() {
                        slot[i % nb] += gi;
                    }
                }
            }
            Op::Scale(x, c) => acc(grads, *x, &|i| g[i] * c),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let slot = grad_slot(grads, *a, m * k);
                    gemm(m, nn, k, g, false, self.val(*b), true, 1.0, slot);
                }
                if self.needs(*b) {
                    let slot = grad_slot(grads, *b, k * nn);
                    gemm(k, m, nn, self.val(*a), true, g, false, 1.0, slot);
                }
            }
            Op::Sigmoid(x) => acc(grads, *x, &|i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(x) => acc(grads, *x, &|i| g[i] * (1.0 - y[i] * y[i])),
            Op::Relu(x) => {
                let vx = self.val(*x);
                acc(grads, *x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Exp(x) => acc(grads, *x, &|i| g[i] * y[i]),
            Op::Log(x) => {
                let vx = self.val(*x);
                acc(grads, *x, &|i| g[i] / vx[i])
            }
            Op::Abs(x) => {
                let vx = self.val(*x);
                acc(grads, *x, &|i| {
                    if vx[i] > 0.0 {
                        g[i]
                    } else if vx[i] < 0.0 {
                        -g[i]
                    } else {
                        0.0
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.val(*x);
                acc(grads, *x, &|i| {
                    if vx[i] > *lo && vx[i] < *hi {
                        g[i]
                    } else {
                        0.0
                    }
                })
            }
            Op::Sum(x) => acc(grads, *x, &|_| g[0]),
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len() as f64;
                acc(grads, *x, &|_| g[0] / len)
            }
            Op::Max(x, idx) => acc(grads, *x, &|i| if i == *idx { g[0] } else { 0.0 }),
            Op::SumAxis(x, axis) => {
                let (_, len, inner) = split_at_axis(self.nodes[x.0].value.shape(), *axis);
                acc(grads, *x, &|i| {
                    let o = i / (len * inner);
                    g[o * inner + i % inner]
                })
            }
            Op::Reshape(x) => acc(grads, *x, &|i| g[i]),
            Op::Permute(x, axes) => {
                if self.needs(*x) {
                    let map = permute_source_index(self.nodes[x.0].value.shape(), axes);
                    let slot = grad_slot(grads, *x, n);
                    for (o, &src) in map.iter().enumerate() {
                        slot[src] += g[o];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if self.needs(*v) {
                        let slot = grad_slot(grads, *v, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            for (d, s) in slot[o * len * inner..][..len * inner].iter_mut().zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (outer, full, inner) = split_at_axis(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let slot = grad_slot(grads, *x, outer * full * inner);
                    for o in 0..outer {
                        let dst = &mut slot[(o * full + start) * inner..][..len * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::NormalizeLast(x, eps) => {
                if self.needs(*x) {
                    let vx = self.val(*x);
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let slot = grad_slot(grads, *x, n);
                    if d > 0 {
                        for r in 0..n / d {
                            let row = r * d..(r + 1) * d;
                            let xr = &vx[row.clone()];
                            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let gr = &g[row.clone()];
                            let yr = &y[row.clone()];
                            if norm > *eps {
                                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for j in 0..d {
                                    slot[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                                }
                            } else {
                                for j in 0..d {
                                    slot[r * d + j] += gr[j] / eps;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
