//! Wengert-style tape. Every op appends a node holding its forward value and
//! enough context to replay the chain rule in reverse.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::broadcast::{broadcast_index, broadcast_shape};
use super::kernels::{self, axis_split, Padding};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::spectral::fft;

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sigmoid(usize),
    Softplus(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    SwapLast2(usize),
    Matmul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        padding: Padding,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rfft(usize),
    Irfft(usize),
    LogSoftmax(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-use: build it, run forward, call [`Tape::backward`], drop it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every parameter it reached.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Pull a parameter's current value onto the tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let acc = |target: usize, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.by_param.get_mut(pid) {
                        Some(existing) => existing
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(e, d)| *e += d),
                        None => {
                            out.by_param.insert(*pid, t);
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let shape = node.value.shape();
                    let ga = reduce_to(&g, shape, val(*a).shape());
                    let mut gb = reduce_to(&g, shape, val(*b).shape());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let shape = node.value.shape();
                    let ia = broadcast_index(va.shape(), shape);
                    let ib = broadcast_index(vb.shape(), shape);
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for (i, gi) in g.iter().enumerate() {
                        ga[ia[i]] += gi * vb.data()[ib[i]];
                        gb[ib[i]] += gi * va.data()[ia[i]];
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect(), &mut grads),
                Op::Offset(x) | Op::Reshape(x) => acc(*x, g, &mut grads),
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(*x, zip_map(&g, y, |g, y| g * y), &mut grads)
                }
                Op::Log(x) => acc(*x, zip_map(&g, val(*x).data(), |g, x| g / x), &mut grads),
                Op::Square(x) => {
                    acc(*x, zip_map(&g, val(*x).data(), |g, x| 2.0 * g * x), &mut grads)
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, zip_map(&g, y, |g, y| g * y * (1.0 - y)), &mut grads)
                }
                Op::Softplus(x) => acc(
                    *x,
                    zip_map(&g, val(*x).data(), |g, x| g * kernels::sigmoid_scalar(x)),
                    &mut grads,
                ),
                Op::Gelu(x) => acc(
                    *x,
                    zip_map(&g, val(*x).data(), |g, x| g * kernels::gelu_derivative(x)),
                    &mut grads,
                ),
                Op::Clamp(x, lo, hi) => acc(
                    *x,
                    zip_map(&g, val(*x).data(), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
                    &mut grads,
                ),
                Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()], &mut grads),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    acc(*x, vec![g[0] / n as f64; n], &mut grads)
                }
                Op::SumAxis(x, axis) => {
                    let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..][..inner];
                            dst.copy_from_slice(&g[o * inner..][..inner]);
                        }
                    }
                    acc(*x, gx, &mut grads)
                }
                Op::Slice { x, axis, start } => {
                    let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                    let m = node.value.shape()[*axis];
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let src = &g[o * m * inner..][..m * inner];
                        gx[(o * n + start) * inner..][..m * inner].copy_from_slice(src);
                    }
                    acc(*x, gx, &mut grads)
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &xi in xs {
                        let n = val(xi).shape()[*axis];
                        let mut gx = vec![0.0; outer * n * inner];
                        for o in 0..outer {
                            gx[o * n * inner..][..n * inner]
                                .copy_from_slice(&g[(o * total + offset) * inner..][..n * inner]);
                        }
                        offset += n;
                        acc(xi, gx, &mut grads);
                    }
                }
                Op::SwapLast2(x) => {
                    let s = val(*x).shape();
                    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                    acc(*x, swap_last2(&g, m, n, true), &mut grads)
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (batch, m, k, n) = kernels::matmul_dims(va.shape(), vb.shape())?;
                    let (ad, bd) = (va.data(), vb.data());
                    let mut ga = vec![0.0; ad.len()];
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..batch {
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..][..n];
                            let arow = &ad[(bi * m + i) * k..][..k];
                            let garow = &mut ga[(bi * m + i) * k..][..k];
                            for p in 0..k {
                                let brow = &bd[p * n..][..n];
                                garow[p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                let av = arow[p];
                                gb[p * n..][..n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, gv)| *d += av * gv);
                            }
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Conv1d { x, w, b, padding } => {
                    let (gx, gw, gb) = kernels::conv1d_backward(val(*x), val(*w), &g, *padding);
                    acc(*x, gx, &mut grads);
                    acc(*w, gw, &mut grads);
                    if let Some(b) = b {
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    axis,
                    xhat,
                    inv_std,
                } => {
                    let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                    let gam = val(*gamma).data();
                    let mut gx = vec![0.0; outer * n * inner];
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + i;
                            let mut mean_gh = 0.0;
                            let mut mean_ghx = 0.0;
                            for a in 0..n {
                                let gh = g[at(a)] * gam[a];
                                mean_gh += gh;
                                mean_ghx += gh * xhat[at(a)];
                                gg[a] += g[at(a)] * xhat[at(a)];
                                gbeta[a] += g[at(a)];
                            }
                            mean_gh /= n as f64;
                            mean_ghx /= n as f64;
                            let inv = inv_std[o * inner + i];
                            for a in 0..n {
                                let gh = g[at(a)] * gam[a];
                                gx[at(a)] = inv * (gh - mean_gh - xhat[at(a)] * mean_ghx);
                            }
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gamma, gg, &mut grads);
                    acc(*beta, gbeta, &mut grads);
                }
                Op::Rfft(x) => {
                    let h = *val(*x).shape().last().unwrap();
                    acc(*x, fft::rfft_adjoint_rows(&g, h), &mut grads)
                }
                Op::Irfft(x) => {
                    let h = *node.value.shape().last().unwrap();
                    acc(*x, fft::irfft_adjoint_rows(&g, h), &mut grads)
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            out[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(*x, gx, &mut grads)
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

/// Sum a gradient laid out over `out` back onto a broadcast operand of `shape`.
fn reduce_to(g: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return g.to_vec();
    }
    let idx = broadcast_index(shape, out);
    let mut r = vec![0.0; shape.iter().product()];
    for (gi, &i) in g.iter().zip(&idx) {
        r[i] += gi;
    }
    r
}

/// Swap the last two axes of a row-major buffer viewed as `[.., m, n]`.
/// With `inverse`, the buffer is `[.., n, m]` and is mapped back to `[.., m, n]`.
fn swap_last2(data: &[f64], m: usize, n: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                if inverse {
                    dst[i * n + j] = src[j * m + i];
                } else {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
    }
    out
}

// arithmetic is fallible under broadcasting, so it cannot use the std::ops traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.tape.needs(self.id))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let ia = broadcast_index(a.shape(), &shape);
        let ib = broadcast_index(b.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect();
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, op(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(kernels::sigmoid_scalar);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(kernels::softplus_scalar);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = kernels::gelu(&self.value());
        self.unary(v, Op::Gelu(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &x.data()[(o * n + a) * inner..][..inner];
                out[o * inner..][..inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary(Tensor::new(shape, out)?, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} on axis {axis} invalid for {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..][..m * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        Ok(self.unary(
            Tensor::new(shape, out)?,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|p| tape.needs(p.id));
        Ok(tape.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            needs,
        ))
    }

    /// `[.., m, n] -> [.., n, m]`.
    pub fn swap_last2(self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(Error::shape("swap_last2 needs rank >= 2"));
        }
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let data = swap_last2(x.data(), m, n, false);
        Ok(self.unary(Tensor::new(shape, data)?, Op::SwapLast2(self.id)))
    }

    /// `self[.., m, k] @ rhs[k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = kernels::matmul(&self.value(), &rhs.value())?;
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(v, Op::Matmul(self.id, rhs.id), needs))
    }

    pub fn conv1d(self, kernel: Var<'t>, bias: Option<Var<'t>>, padding: Padding) -> Result<Var<'t>> {
        let bv = bias.map(|b| b.value());
        let v = kernels::conv1d(&self.value(), &kernel.value(), bv.as_deref(), padding)?;
        let needs = self.tape.needs(self.id)
            || self.tape.needs(kernel.id)
            || bias.is_some_and(|b| self.tape.needs(b.id));
        Ok(self.tape.push(
            v,
            Op::Conv1d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                padding,
            },
            needs,
        ))
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let out = kernels::layer_norm_full(&self.value(), &gamma.value(), &beta.value(), axis)?;
        let needs = [self.id, gamma.id, beta.id].iter().any(|&i| self.tape.needs(i));
        Ok(self.tape.push(
            out.y,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                axis,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            needs,
        ))
    }

    /// Real FFT over the last axis: `[.., H] -> [.., H/2 + 1, 2]` (re, im pairs).
    pub fn rfft(self) -> Result<Var<'t>> {
        let x = self.value();
        let h = *x.shape().last().unwrap();
        let k = h / 2 + 1;
        let data = fft::rfft_rows(x.data(), h);
        let mut shape = x.shape()[..x.rank() - 1].to_vec();
        shape.extend([k, 2]);
        Ok(self.unary(Tensor::new(shape, data)?, Op::Rfft(self.id)))
    }

    /// Inverse of [`Var::rfft`] for real signals of length `h`.
    pub fn irfft(self, h: usize) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 || x.shape()[r - 1] != 2 || x.shape()[r - 2] != h / 2 + 1 {
            return Err(Error::shape(format!(
                "irfft to length {h} expects [.., {}, 2], got {:?}",
                h / 2 + 1,
                x.shape()
            )));
        }
        let data = fft::irfft_rows(x.data(), h);
        let mut shape = x.shape()[..r - 2].to_vec();
        shape.push(h);
        Ok(self.unary(Tensor::new(shape, data)?, Op::Irfft(self.id)))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let v = kernels::log_softmax(&self.value());
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
