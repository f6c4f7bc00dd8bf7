use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::kernels::{self as k, Axis, LayerNormCache, Padding, Unary};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One positive cell of an IoU loss term: flat `(b, row, col)` location and
/// the ground-truth box it regresses to.
#[derive(Clone, Debug)]
pub struct IouTarget<T> {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
    pub target: [T; 4],
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        padding: Padding,
    },
    Shift {
        x: Var,
        axis: Axis,
        s: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        cache: LayerNormCache<T>,
        beta: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Upsample2x {
        x: Var,
    },
    Canvas {
        x: Var,
    },
    WindowPartition {
        x: Var,
        ws: usize,
    },
    WindowMerge {
        x: Var,
        ws: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        w: Tensor<T>,
    },
    Bce {
        x: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
    },
    Iou {
        raw: Var,
        stride: T,
        cells: Vec<IouTarget<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Deliberate kernel corruption, used to show the gradient checker catches
/// a broken backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scales the convolution weight gradient by 1.5.
    ConvBackward,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// is already topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
    fault: Fault,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || b.iter().product::<usize>() == 1 || a.iter().product::<usize>() == 1
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: Fault::None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "input", true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "constant", false)
    }

    /// Records every parameter of `store` as a differentiable leaf; later
    /// looked up with [`Graph::param`].
    pub fn bind(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.params.clear();
        for p in store.iter() {
            let v = self.push(p.value.clone(), Op::Leaf, &p.name, true)?;
            self.params.push(v);
        }
        Ok(())
    }

    /// Uses caller-provided leaves as the parameter bindings, in store
    /// order (e.g. perturbed copies inside a gradient check).
    pub fn bind_vars(&mut self, vars: &[Var]) {
        self.params = vars.to_vec();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, Padding::Zero)
    }

    pub fn conv2d_padded(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, padding: Padding) -> Result<Var> {
        let y = k::conv2d_padded(self.value(x), self.value(w), self.value(b), stride, pad, padding)?;
        let rg = self.rg(&[x, w, b]);
        self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
            },
            "conv2d",
            rg,
        )
    }

    pub fn circular_shift(&mut self, x: Var, axis: Axis, s: usize) -> Result<Var> {
        let len = k::axis_len(self.shape(x), axis);
        if len == 0 {
            return Err(Error::invalid("circular_shift", "empty axis"));
        }
        let s = s % len;
        let y = k::circular_shift(self.value(x), axis, s)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Shift { x, axis, s }, "circular_shift", rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = k::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::MatMul { a, b }, "matmul", rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = k::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        self.push(y, Op::Linear { x, w, b }, "linear", rg)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = k::softmax_lastdim(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Softmax { x }, "softmax", rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) = k::layer_norm(self.value(x), self.value(gamma), self.value(beta), T::from_f64c(eps))?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(y, Op::LayerNorm { x, gamma, cache, beta }, "layer_norm", rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        Ok(if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.len() == 1 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add { a, b }, "add", rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub { a, b }, "sub", rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul { a, b }, "mul", rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64c(c);
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, c }, "scale", rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let y = self.value(x).map(|v| f.apply(v));
        let rg = self.rg(&[x]);
        self.push(y, Op::Unary { x, f }, f.name(), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = k::concat_lastdim(&vals)?;
        let rg = self.rg(xs);
        self.push(y, Op::Concat { xs: xs.to_vec() }, "concat", rg)
    }

    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = k::slice_lastdim(self.value(x), start, len)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Slice { x, start }, "slice", rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let y = k::upsample_nearest2x(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Upsample2x { x }, "upsample", rg)
    }

    /// Zero-pads (bottom/right) or crops (top-left kept) to `h × w`.
    pub fn resize_canvas(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = k::resize_canvas(self.value(x), h, w)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Canvas { x }, "resize_canvas", rg)
    }

    pub fn window_partition(&mut self, x: Var, ws: usize) -> Result<Var> {
        let y = k::window_partition(self.value(x), ws)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::WindowPartition { x, ws }, "window_partition", rg)
    }

    pub fn window_merge(&mut self, x: Var, ws: usize, b: usize, h: usize, w: usize) -> Result<Var> {
        let y = k::window_merge(self.value(x), ws, b, h, w)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::WindowMerge { x, ws }, "window_merge", rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = k::permute(self.value(x), perm)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Permute { x, perm: perm.to_vec() }, "permute", rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Reshape { x }, "reshape", rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum { x }, "sum", rg)
    }

    /// `Σ x·w` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        if w.shape() != self.shape(x) {
            return Err(Error::shape("dot_const", self.shape(x), w.shape()));
        }
        let s = self.value(x).data().iter().zip(w.data()).fold(T::zero(), |a, (&p, &q)| a + p * q);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Dot { x, w }, "dot_const", rg)
    }

    /// `Σ weight · BCE-with-logits(x, target)`, a scalar.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>, weight: Tensor<T>) -> Result<Var> {
        let shape = self.shape(x);
        if target.shape() != shape || weight.shape() != shape {
            return Err(Error::shape("bce_with_logits", shape, target.shape()));
        }
        let s = k::bce_with_logits_sum(self.value(x), &target, &weight);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Bce { x, target, weight }, "bce_with_logits", rg)
    }

    /// `Σ (1 − IoU(decode(raw[cell]), target))` over the listed cells of a
    /// `[B,h,w,4]` regression map.
    pub fn iou_loss(&mut self, raw: Var, stride: f64, cells: Vec<IouTarget<T>>) -> Result<Var> {
        let (b, h, w, c) = self.value(raw).nhwc()?;
        if c != 4 {
            return Err(Error::invalid("iou_loss", format!("expected 4 channels, got {c}")));
        }
        let stride = T::from_f64c(stride);
        let data = self.value(raw).data();
        let mut s = T::zero();
        for cell in &cells {
            if cell.batch >= b || cell.row >= h || cell.col >= w {
                return Err(Error::invalid("iou_loss", "cell outside the map"));
            }
            let o = ((cell.batch * h + cell.row) * w + cell.col) * 4;
            let r = [data[o], data[o + 1], data[o + 2], data[o + 3]];
            let (iou, _) = k::iou_and_grad(r, cell.row, cell.col, stride, cell.target);
            s += T::one() - iou;
        }
        let rg = self.rg(&[raw]);
        self.push(Tensor::scalar(s), Op::Iou { raw, stride, cells }, "iou_loss", rg)
    }

    /// Reverse pass seeded with `d loss = 1`; `loss` must be a single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Gradient of a broadcast binary operand: reduce to a single value if
    /// the operand was a scalar.
    fn reduce_to(&self, v: Var, g: Tensor<T>) -> Tensor<T> {
        let shape = self.shape(v);
        if shape == g.shape() {
            g
        } else {
            Tensor::full(shape, g.sum())
        }
    }

    fn expand(&self, g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
        if g.shape() == like.shape() {
            g.clone()
        } else {
            Tensor::full(like.shape(), g.data()[0])
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                padding,
            } => {
                let (dx, mut dw, db) = k::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, *padding)?;
                if self.fault == Fault::ConvBackward {
                    let c = T::from_f64c(1.5);
                    dw.data_mut().iter_mut().for_each(|v| *v *= c);
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Shift { x, axis, s } => {
                let len = k::axis_len(g.shape(), *axis);
                let back = k::circular_shift(g, *axis, (len - s % len) % len)?;
                self.accumulate(grads, *x, back);
            }
            Op::MatMul { a, b } => {
                let (da, db) = k::matmul_backward(self.value(*a), self.value(*b), g)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = k::linear_backward(self.value(*x), self.value(*w), g)?;
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Softmax { x } => {
                self.accumulate(grads, *x, k::softmax_backward(out, g));
            }
            Op::LayerNorm { x, gamma, cache, beta } => {
                let (dx, dg, db) = k::layer_norm_backward(cache, self.value(*gamma), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Add { a, b } => {
                let ga = self.expand(g, out);
                self.accumulate(grads, *a, self.reduce_to(*a, ga.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, ga));
            }
            Op::Sub { a, b } => {
                let ga = self.expand(g, out);
                let gb = ga.map(|v| -v);
                self.accumulate(grads, *a, self.reduce_to(*a, ga));
                self.accumulate(grads, *b, self.reduce_to(*b, gb));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor<T>, j: usize| if t.len() == 1 { t.data()[0] } else { t.data()[j] };
                let n = out.len();
                let ga: Vec<T> = (0..n).map(|j| g.data()[j] * at(tb, j)).collect();
                let gb: Vec<T> = (0..n).map(|j| g.data()[j] * at(ta, j)).collect();
                self.accumulate(grads, *a, self.reduce_to(*a, Tensor::new(out.shape(), ga)?));
                self.accumulate(grads, *b, self.reduce_to(*b, Tensor::new(out.shape(), gb)?));
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Unary { x, f } => {
                let tx = self.value(*x);
                let d: Vec<T> = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).last_dim();
                    self.accumulate(grads, x, k::slice_lastdim(g, start, c)?);
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.last_dim(), g.last_dim());
                let mut d = vec![T::zero(); tx.len()];
                for (dst, src) in d.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Upsample2x { x } => {
                self.accumulate(grads, *x, k::upsample_nearest2x_backward(g)?);
            }
            Op::Canvas { x } => {
                let (_, h, w, _) = self.value(*x).nhwc()?;
                self.accumulate(grads, *x, k::resize_canvas(g, h, w)?);
            }
            Op::WindowPartition { x, ws } => {
                let (b, h, w, _) = self.value(*x).nhwc()?;
                self.accumulate(grads, *x, k::window_merge(g, *ws, b, h, w)?);
            }
            Op::WindowMerge { x, ws } => {
                self.accumulate(grads, *x, k::window_partition(g, *ws)?.reshape(self.shape(*x))?);
            }
            Op::Permute { x, perm } => {
                self.accumulate(grads, *x, k::permute(g, &k::inverse_permutation(perm))?);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::Dot { x, w } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, w.map(|v| v * s));
            }
            Op::Bce { x, target, weight } => {
                let s = g.data()[0];
                let tx = self.value(*x);
                let d: Vec<T> = tx
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&xv, &t), &w)| s * w * (k::sigmoid(xv) - t))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Iou { raw, stride, cells } => {
                let s = g.data()[0];
                let tr = self.value(*raw);
                let (_, h, w, _) = tr.nhwc()?;
                let mut d = vec![T::zero(); tr.len()];
                for cell in cells {
                    let o = ((cell.batch * h + cell.row) * w + cell.col) * 4;
                    let r = [tr.data()[o], tr.data()[o + 1], tr.data()[o + 2], tr.data()[o + 3]];
                    let (_, di) = k::iou_and_grad(r, cell.row, cell.col, *stride, cell.target);
                    for c in 0..4 {
                        d[o + c] -= s * di[c];
                    }
                }
                self.accumulate(grads, *raw, Tensor::new(tr.shape(), d)?);
            }
        }
        Ok(())
    }
}
