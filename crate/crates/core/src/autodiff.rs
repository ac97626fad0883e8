//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its forward value; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every parameter leaf that contributed to the output.
//! Shape mismatches inside graph operations are programming errors and panic.

use std::collections::HashMap;

use crate::scalar::{self, Scalar};
use crate::tensor::{col2im, gemm_into, im2col, nearest_src, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Softplus,
    Elu,
    Relu,
    Square,
    Sqrt,
    Sin,
    Cos,
    /// `ln(1 - e^{-x})` for `x > 0`.
    LogOneMinusExpNeg,
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => scalar::sigmoid(x),
            Unary::LogSigmoid => scalar::log_sigmoid(x),
            Unary::Softplus => scalar::softplus(x),
            Unary::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::LogOneMinusExpNeg => (-(-x).exp_m1()).ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::LogSigmoid => scalar::sigmoid(-x),
            Unary::Softplus => scalar::sigmoid(x),
            Unary::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
            Unary::Sqrt => T::c(0.5) / y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::LogOneMinusExpNeg => T::one() / x.exp_m1(),
        }
    }
}

enum Op<T> {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MulConst(Var, Tensor<T>),
    AddChannel(Var, Var),
    Linear(Var, Var),
    Unary(Var, Unary),
    ClampMin(Var, T),
    SumRows(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Tile(Var),
    Resize(Var),
    Conv2d(Var, Var, ConvGeom),
    LogSumExp(Var),
    LogSoftmax(Var),
    Select(Vec<bool>, Var, Var),
    WeightNorm(Var, Var),
    RepeatBatch(Var, usize),
    Transpose(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

fn transpose2<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(m.data()[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose")
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a graph node, if it influenced the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for parameter `id`, if it influenced the output.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<usize, Tensor<T>> {
        self.params
    }
}

/// Computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn full_like(&mut self, v: Var, value: T) -> Var {
        let t = Tensor::full(self.shape(v), value);
        self.constant(t)
    }

    /// Leaf for parameter `id`. Repeated calls with the same id return the
    /// same node so gradients from every use accumulate.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Leaf that is differentiable but not tied to a parameter store entry.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    /// Elementwise product with a constant tensor (masks, one-hot codes).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        same_shape(self.value(a), &c, "mul_const");
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (c, s) = (xv.channels(), xv.spatial());
        assert_eq!(self.value(b).len(), c, "add_channel: bias length");
        let bv = self.value(b).data();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[(i / s) % c];
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddChannel(x, b), ng)
    }

    /// `x · wᵀ` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 2, "linear: input must be [N, in]");
        assert_eq!(wv.rank(), 2, "linear: weight must be [out, in]");
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let (dout, din2) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(din, din2, "linear: input width {din} vs weight width {din2}");
        let mut out = Tensor::zeros(&[n, dout]);
        gemm_into(xv.data(), n, din, false, wv.data(), dout, din, true, out.data_mut(), false);
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Linear(x, w), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, f), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    /// `max(a, c)` elementwise; gradient flows only where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, c), ng)
    }

    /// Sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(vec![av.rows()], av.row_sums()).expect("row sums");
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Concatenation along axis 1. Every other axis must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        if parts.len() == 1 {
            return parts[0];
        }
        let first = self.value(parts[0]);
        let n = first.rows();
        let s = first.spatial();
        let tail: Vec<usize> = first.shape()[2.min(first.rank())..].to_vec();
        let mut total_c = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat: batch size");
            assert_eq!(&pv.shape()[2.min(pv.rank())..], &tail[..], "concat: trailing axes");
            total_c += pv.channels();
        }
        let mut data = Vec::with_capacity(n * total_c * s);
        for row in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.channels() * s;
                data.extend_from_slice(&pv.data()[row * chunk..(row + 1) * chunk]);
            }
        }
        let mut shape = vec![n, total_c];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(shape, data).expect("concat shape"), Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (n, c, s) = (av.rows(), av.channels(), av.spatial());
        assert!(start + len <= c, "slice: {start}+{len} exceeds {c} channels");
        let mut data = Vec::with_capacity(n * len * s);
        for row in 0..n {
            let base = row * c * s + start * s;
            data.extend_from_slice(&av.data()[base..base + len * s]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] = len;
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data).expect("slice shape"), Op::Slice(a, start), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape element count");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let av = self.value(a);
        if av.rank() == 2 {
            return a;
        }
        let shape = [av.rows(), av.row_len()];
        self.reshape(a, &shape)
    }

    /// Broadcasts `[N, C]` over a spatial grid: `[N, C, h, w]`.
    pub fn tile(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rank(), 2, "tile: expects [N, C]");
        let (n, c) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in av.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, c, h, w], data).expect("tile"), Op::Tile(a), ng)
    }

    /// Nearest-neighbour resize of `[N, C, h, w]` to `[N, C, oh, ow]`.
    pub fn resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rank(), 4, "resize: expects [N, C, H, W]");
        let (n, c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        if (h, w) == (oh, ow) {
            return a;
        }
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in av.data().chunks(h * w) {
            for y in 0..oh {
                let sy = nearest_src(y, oh, h);
                for x in 0..ow {
                    data.push(plane[sy * w + nearest_src(x, ow, w)]);
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, c, oh, ow], data).expect("resize"), Op::Resize(a), ng)
    }

    /// 2D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.rank(), 4, "conv2d: input must be [N, C, H, W]");
        assert_eq!(wv.rank(), 4, "conv2d: weight must be [O, C, k, k]");
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], c, "conv2d: channel mismatch");
        let g = ConvGeom::new(c, h, wd, k, stride, pad);
        let (p, os) = (g.patch_len(), g.out_spatial());
        let mut out = Tensor::zeros(&[n, o, g.out_h, g.out_w]);
        let mut cols = vec![T::zero(); p * os];
        let img_len = c * h * wd;
        for i in 0..n {
            im2col(&xv.data()[i * img_len..(i + 1) * img_len], &g, &mut cols);
            let dst = &mut out.data_mut()[i * o * os..(i + 1) * o * os];
            gemm_into(wv.data(), o, p, false, &cols, p, os, false, dst, false);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Conv2d(x, w, g), ng)
    }

    /// Log-sum-exp over axis 1: `[N, K, ...] -> [N, ...]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, k, s) = (av.rows(), av.channels(), av.spatial());
        let mut out = Vec::with_capacity(n * s);
        for row in 0..n {
            for j in 0..s {
                let mut m = T::neg_infinity();
                for c in 0..k {
                    m = m.max(av.data()[(row * k + c) * s + j]);
                }
                let mut acc = T::zero();
                for c in 0..k {
                    acc += (av.data()[(row * k + c) * s + j] - m).exp();
                }
                out.push(m + acc.ln());
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&av.shape()[2.min(av.rank())..]);
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).expect("lse"), Op::LogSumExp(a), ng)
    }

    /// Log-softmax over axis 1.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, k, s) = (av.rows(), av.channels(), av.spatial());
        let mut out = av.clone();
        for row in 0..n {
            for j in 0..s {
                let idx = |c: usize| (row * k + c) * s + j;
                let mut m = T::neg_infinity();
                for c in 0..k {
                    m = m.max(av.data()[idx(c)]);
                }
                let mut acc = T::zero();
                for c in 0..k {
                    acc += (av.data()[idx(c)] - m).exp();
                }
                let lse = m + acc.ln();
                for c in 0..k {
                    out.data_mut()[idx(c)] = av.data()[idx(c)] - lse;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// `mask ? a : b` elementwise.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "select");
        assert_eq!(mask.len(), self.value(a).len(), "select: mask length");
        let (av, bv) = (self.value(a), self.value(b));
        let data = mask
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("select");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Select(mask, a, b), ng)
    }

    /// Weight normalization: row `o` of the result is `g[o] · v[o] / ‖v[o]‖`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Var {
        let (vv, gv) = (self.value(v), self.value(g));
        let rows = vv.shape()[0];
        let r = vv.row_len();
        assert_eq!(gv.len(), rows, "weight_norm: gain length");
        let mut out = vv.clone();
        for o in 0..rows {
            let row = &vv.data()[o * r..(o + 1) * r];
            let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let f = gv.data()[o] / nrm;
            for (dst, &x) in out.data_mut()[o * r..(o + 1) * r].iter_mut().zip(row) {
                *dst = x * f;
            }
        }
        let ng = self.ng(v) || self.ng(g);
        self.push(out, Op::WeightNorm(v, g), ng)
    }

    /// Stacks `times` copies of the batch (`[N,...] -> [times*N, ...]`).
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Var {
        if times == 1 {
            return a;
        }
        let v = self.value(a).repeat_batch(times);
        let ng = self.ng(a);
        self.push(v, Op::RepeatBatch(a, times), ng)
    }

    /// Transpose of a matrix `[R, C] -> [C, R]`.
    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rank(), 2, "transpose: expects a matrix");
        let v = transpose2(av);
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        let mut params = HashMap::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.insert(id, g.clone());
            }
            grads[i] = Some(g);
        }
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y));
                acc(*b, g.zip_map(av, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, |x, y| x / y));
                let yv = &node.value;
                let gb = g.zip_map(yv, |x, y| x * y).zip_map(bv, |x, y| -x / y);
                acc(*b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::AddChannel(x, b) => {
                acc(*x, g.clone());
                let (c, s) = (g.channels(), g.spatial());
                let mut gb = Tensor::zeros(&[c]);
                for (i, &v) in g.data().iter().enumerate() {
                    gb.data_mut()[(i / s) % c] += v;
                }
                acc(*b, gb);
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.nodes[x.0].needs_grad {
                    let mut gx = Tensor::zeros(&[n, din]);
                    gemm_into(g.data(), n, dout, false, wv.data(), dout, din, false, gx.data_mut(), false);
                    acc(*x, gx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = Tensor::zeros(&[dout, din]);
                    gemm_into(g.data(), n, dout, true, xv.data(), n, din, false, gw.data_mut(), false);
                    acc(*w, gw);
                }
            }
            Op::Unary(a, f) => {
                let (xv, yv) = (self.value(*a), &node.value);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gi, (&x, &y))| gi * f.derivative(x, y))
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), data).expect("unary grad"));
            }
            Op::ClampMin(a, c) => {
                let xv = self.value(*a);
                let c = *c;
                acc(*a, g.zip_map(xv, |gi, x| if x > c { gi } else { T::zero() }));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let r = av.row_len();
                let mut ga = Tensor::zeros(av.shape());
                for (row, &gv) in g.data().iter().enumerate() {
                    ga.data_mut()[row * r..(row + 1) * r].iter_mut().for_each(|v| *v = gv);
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                acc(*a, Tensor::full(self.value(*a).shape(), g.item()));
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let s = g.spatial();
                let total = g.channels() * s;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let chunk = pv.channels() * s;
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(n * chunk);
                        for row in 0..n {
                            let base = row * total + offset;
                            gp.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        acc(p, Tensor::new(pv.shape().to_vec(), gp).expect("concat grad"));
                    }
                    offset += chunk;
                }
            }
            Op::Slice(a, start) => {
                let av = self.value(*a);
                let (n, c, s) = (av.rows(), av.channels(), av.spatial());
                let len = g.channels();
                let mut ga = Tensor::zeros(av.shape());
                for row in 0..n {
                    let base = row * c * s + start * s;
                    ga.data_mut()[base..base + len * s]
                        .copy_from_slice(&g.data()[row * len * s..(row + 1) * len * s]);
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshape(&shape).expect("reshape grad"));
            }
            Op::Tile(a) => {
                let av = self.value(*a);
                let hw = g.spatial();
                let data = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), data).expect("tile grad"));
            }
            Op::Resize(a) => {
                let av = self.value(*a);
                let (h, w) = (av.shape()[2], av.shape()[3]);
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let mut ga = Tensor::zeros(av.shape());
                for (plane_g, plane_a) in g.data().chunks(oh * ow).zip(ga.data_mut().chunks_mut(h * w)) {
                    for y in 0..oh {
                        let sy = nearest_src(y, oh, h);
                        for x in 0..ow {
                            plane_a[sy * w + nearest_src(x, ow, w)] += plane_g[y * ow + x];
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Conv2d(x, w, geom) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.rows();
                let o = wv.shape()[0];
                let (p, os) = (geom.patch_len(), geom.out_spatial());
                let img_len = geom.in_c * geom.in_h * geom.in_w;
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let mut gx = if need_x { Some(Tensor::zeros(xv.shape())) } else { None };
                let mut gw = if need_w { Some(Tensor::zeros(wv.shape())) } else { None };
                let mut cols = vec![T::zero(); p * os];
                let mut gcols = vec![T::zero(); p * os];
                for i in 0..n {
                    let gi = &g.data()[i * o * os..(i + 1) * o * os];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&xv.data()[i * img_len..(i + 1) * img_len], geom, &mut cols);
                        gemm_into(gi, o, os, false, &cols, p, os, true, gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm_into(wv.data(), o, p, true, gi, o, os, false, &mut gcols, false);
                        col2im(&gcols, geom, &mut gx.data_mut()[i * img_len..(i + 1) * img_len]);
                    }
                }
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let (n, k, s) = (av.rows(), av.channels(), av.spatial());
                let y = &node.value;
                let mut ga = Tensor::zeros(av.shape());
                for row in 0..n {
                    for j in 0..s {
                        let gy = g.data()[row * s + j];
                        let yy = y.data()[row * s + j];
                        for c in 0..k {
                            let idx = (row * k + c) * s + j;
                            ga.data_mut()[idx] = gy * (av.data()[idx] - yy).exp();
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let (n, k, s) = (y.rows(), y.channels(), y.spatial());
                let mut ga = Tensor::zeros(y.shape());
                for row in 0..n {
                    for j in 0..s {
                        let idx = |c: usize| (row * k + c) * s + j;
                        let gsum: T = (0..k).map(|c| g.data()[idx(c)]).sum();
                        for c in 0..k {
                            ga.data_mut()[idx(c)] = g.data()[idx(c)] - y.data()[idx(c)].exp() * gsum;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Select(mask, a, b) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&x, &m)| if m { x } else { T::zero() }).collect(),
                )
                .expect("select grad");
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&x, &m)| if m { T::zero() } else { x }).collect(),
                )
                .expect("select grad");
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::WeightNorm(v, gain) => {
                let (vv, gv) = (self.value(*v), self.value(*gain));
                let rows = vv.shape()[0];
                let r = vv.row_len();
                let mut g_v = Tensor::zeros(vv.shape());
                let mut g_g = Tensor::zeros(gv.shape());
                for o in 0..rows {
                    let row = &vv.data()[o * r..(o + 1) * r];
                    let go = &g.data()[o * r..(o + 1) * r];
                    let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                    let dot: T = row.iter().zip(go).map(|(&x, &y)| x * y).sum::<T>() / nrm;
                    g_g.data_mut()[o] = dot;
                    let f = gv.data()[o] / nrm;
                    for ((dst, &x), &gy) in g_v.data_mut()[o * r..(o + 1) * r].iter_mut().zip(row).zip(go) {
                        *dst = f * (gy - x / nrm * dot);
                    }
                }
                acc(*v, g_v);
                acc(*gain, g_g);
            }
            Op::Transpose(a) => acc(*a, transpose2(&g)),
            Op::RepeatBatch(a, times) => {
                let av = self.value(*a);
                let len = av.len();
                let mut ga = Tensor::zeros(av.shape());
                for t in 0..*times {
                    for (dst, &x) in ga.data_mut().iter_mut().zip(&g.data()[t * len..(t + 1) * len]) {
                        *dst += x;
                    }
                }
                acc(*a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Central finite-difference check of `f` with respect to a single leaf.
    fn check(shape: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = t(shape, 3);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(&mut g, x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let ad = grads.wrt(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp);
                let y = f(&mut g, x);
                g.value(y).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = ad.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs ad {a}");
        }
    }

    #[test]
    fn unary_gradients() {
        for f in [
            Unary::Exp,
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::LogSigmoid,
            Unary::Softplus,
            Unary::Elu,
            Unary::Square,
            Unary::Sin,
            Unary::Cos,
        ] {
            check(&[3, 4], |g, x| g.unary(x, f));
        }
        for f in [Unary::Log, Unary::Sqrt, Unary::LogOneMinusExpNeg] {
            check(&[3, 4], |g, x| {
                let e = g.exp(x);
                g.unary(e, f)
            });
        }
        for f in [Unary::Relu] {
            check(&[3, 4], |g, x| g.unary(x, f));
        }
        check(&[2, 3], |g, x| {
            let e = g.exp(x);
            let l = g.log(e);
            let r = g.sqrt(e);
            g.mul(r, l)
        });
    }

    #[test]
    fn structural_gradients() {
        check(&[2, 6], |g, x| {
            let a = g.slice(x, 1, 3);
            let b = g.slice(x, 0, 2);
            let c = g.concat(&[a, b, x]);
            let d = g.log_softmax(c);
            g.square(d)
        });
        check(&[2, 3, 2, 2], |g, x| {
            let l = g.logsumexp(x);
            let r = g.resize(x, 3, 5);
            let s = g.sum_rows(r);
            let l2 = g.sum_rows(l);
            g.mul(s, l2)
        });
        check(&[2, 3], |g, x| {
            let tl = g.tile(x, 2, 3);
            let sq = g.square(tl);
            g.repeat_batch(sq, 3)
        });
        check(&[2, 3], |g, x| {
            let tr = g.transpose(x);
            let w = g.constant(t(&[2, 3], 6));
            let ww = g.transpose(w);
            let m = g.mul(tr, ww);
            g.sin(m)
        });
        check(&[3, 4], |g, x| {
            let w = g.constant(t(&[5, 4], 9));
            let y = g.linear(x, w);
            let b = g.constant(t(&[5], 1));
            let z = g.add_channel(y, b);
            g.tanh(z)
        });
        check(&[3, 4], |g, w| {
            let x = g.constant(t(&[2, 4], 5));
            let y = g.linear(x, w);
            g.sin(y)
        });
    }

    #[test]
    fn conv_and_weight_norm_gradients() {
        check(&[2, 2, 5, 4], |g, x| {
            let w = g.constant(t(&[3, 2, 3, 3], 4));
            let y = g.conv2d(x, w, 2, 1);
            g.tanh(y)
        });
        check(&[3, 2, 3, 3], |g, w| {
            let x = g.constant(t(&[2, 2, 4, 4], 8));
            let y = g.conv2d(x, w, 1, 1);
            g.square(y)
        });
        check(&[4, 3], |g, v| {
            let gain = g.constant(t(&[4], 2));
            let w = g.weight_norm(v, gain);
            g.square(w)
        });
        check(&[4], |g, gain| {
            let v = g.constant(t(&[4, 3], 2));
            let w = g.weight_norm(v, gain);
            g.sin(w)
        });
    }

    #[test]
    fn division_select_and_clamp_gradients() {
        check(&[2, 3], |g, x| {
            let e = g.exp(x);
            let d = g.div(x, e);
            let c = g.clamp_min(d, 0.1);
            let mask = vec![true, false, true, true, false, false];
            let s = g.sin(x);
            g.select(mask, c, s)
        });
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = Tensor::full(&[2], 3.0);
        let a = g.param(0, &w);
        let b = g.param(0, &w);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.param(0).unwrap().data(), &[6.0, 6.0]);
    }
}
