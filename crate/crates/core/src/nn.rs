//! Parameter storage and the layers the hierarchy is assembled from.
//!
//! Layers are plain descriptors holding parameter ids and static shapes; the
//! values live in a [`ParamStore`] so one model description can be evaluated
//! on any graph, and EMA or optimizer state can mirror the store one-to-one.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{Noise, RandomSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Bottom-up inference blocks and bottom-up posterior heads (φ only).
    BottomUp,
    /// Generative top-down blocks, prior heads and the likelihood head (θ),
    /// reused by top-down inference.
    Generative,
    /// Posterior heads of the top-down inference path.
    TopDownHeads,
    /// Semi-supervised classifier.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    values: Vec<Tensor<T>>,
    meta: Vec<ParamMeta>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { values: Vec::new(), meta: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> usize {
        self.meta.push(ParamMeta { name: name.into(), group, shape: value.shape().to_vec() });
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn set(&mut self, id: usize, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id].shape() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.meta[id].name,
                self.values[id].shape(),
                value.shape()
            )));
        }
        self.values[id] = value;
        Ok(())
    }

    pub fn meta(&self, id: usize) -> &ParamMeta {
        &self.meta[id]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].group == group).collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.name == name)
    }

    /// Replaces all values, checking that names and shapes line up.
    pub fn load_values(&mut self, metas: &[ParamMeta], values: Vec<Tensor<T>>) -> Result<()> {
        if metas.len() != self.meta.len() || values.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                metas.len(),
                self.meta.len()
            )));
        }
        for (i, (m, v)) in metas.iter().zip(&values).enumerate() {
            if m.name != self.meta[i].name || v.shape() != self.meta[i].shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} does not match model layout", m.name)));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Per-pass evaluation context: graph, parameters, noise and mode flags.
pub struct Ctx<'a, 'n, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub noise: &'a mut Noise<'n>,
    /// Enables dropout.
    pub train: bool,
    /// When set, weight-normalized layers derive gain and bias from the
    /// statistics of the current batch and record them here.
    pub init: Option<&'a mut HashMap<usize, Tensor<T>>>,
}

impl<'a, 'n, T: Scalar> Ctx<'a, 'n, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>, noise: &'a mut Noise<'n>, train: bool) -> Self {
        Self { g, params, noise, train, init: None }
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.init.as_ref().and_then(|m| m.get(&id)) {
            let v = v.clone();
            return self.g.param(id, &v);
        }
        self.g.param(id, self.params.get(id))
    }

    /// Inverted dropout; identity outside training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let shape = self.g.shape(x).to_vec();
        let u = self.noise.uniform(&shape[1..]);
        let keep = T::c(1.0 / (1.0 - rate));
        let mask = Tensor::new(shape, u.iter().map(|&v| if v >= rate { keep } else { T::zero() }).collect())
            .expect("dropout mask");
        self.g.mul_const(x, mask)
    }
}

/// Static shape of a dense or convolutional affine map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineShape {
    Dense { fan_in: usize, fan_out: usize },
    /// `upsample` resizes the input (nearest) before the convolution.
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, upsample: Option<(usize, usize)> },
}

/// Dense or convolutional affine layer with optional weight normalization.
#[derive(Clone, Debug)]
pub struct Affine {
    pub shape: AffineShape,
    weight: usize,
    gain: Option<usize>,
    bias: usize,
    init_scale: f64,
}

impl Affine {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RandomSource,
        name: &str,
        group: ParamGroup,
        shape: AffineShape,
        weight_norm: bool,
        init_scale: f64,
    ) -> Self {
        let (w_shape, fan_in, fan_out) = match shape {
            AffineShape::Dense { fan_in, fan_out } => (vec![fan_out, fan_in], fan_in, fan_out),
            AffineShape::Conv { c_in, c_out, k, .. } => (vec![c_out, c_in, k, k], c_in * k * k, c_out),
        };
        let std = if weight_norm { 0.05 } else { init_scale / (fan_in as f64).sqrt() };
        let w = rng.normal_tensor::<f64>(&w_shape).map(|v| v * std).cast::<T>();
        let weight = store.add(format!("{name}.weight"), group, w);
        let gain = weight_norm.then(|| store.add(format!("{name}.gain"), group, Tensor::full(&[fan_out], T::one())));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self { shape, weight, gain, bias, init_scale }
    }

    pub fn out_channels(&self) -> usize {
        match self.shape {
            AffineShape::Dense { fan_out, .. } => fan_out,
            AffineShape::Conv { c_out, .. } => c_out,
        }
    }

    fn raw<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var, w: Var) -> Var {
        match self.shape {
            AffineShape::Dense { .. } => ctx.g.linear(x, w),
            AffineShape::Conv { k, stride, upsample, .. } => {
                let x = match upsample {
                    Some((h, wd)) => ctx.g.resize(x, h, wd),
                    None => x,
                };
                ctx.g.conv2d(x, w, stride, k / 2)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Var {
        if let (Some(gain), true) = (self.gain, ctx.init.is_some()) {
            self.data_init(ctx, x, gain);
        }
        let v = ctx.param(self.weight);
        let w = match self.gain {
            Some(gid) => {
                let gvar = ctx.param(gid);
                ctx.g.weight_norm(v, gvar)
            }
            None => v,
        };
        let y = self.raw(ctx, x, w);
        let b = ctx.param(self.bias);
        ctx.g.add_channel(y, b)
    }

    /// Sets gain and bias so this layer's outputs on the current batch have
    /// zero mean and `init_scale` standard deviation per output unit.
    fn data_init<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var, gain: usize) {
        let v = ctx.params.get(self.weight).clone();
        let rows = v.shape()[0];
        let mut tmp = Graph::<T>::new();
        let xv = tmp.constant(ctx.g.value(x).clone());
        let ones = tmp.constant(Tensor::full(&[rows], T::one()));
        let vv = tmp.constant(v);
        let w = tmp.weight_norm(vv, ones);
        let y = match self.shape {
            AffineShape::Dense { .. } => tmp.linear(xv, w),
            AffineShape::Conv { k, stride, upsample, .. } => {
                let xi = match upsample {
                    Some((h, wd)) => tmp.resize(xv, h, wd),
                    None => xv,
                };
                tmp.conv2d(xi, w, stride, k / 2)
            }
        };
        let yv = tmp.value(y);
        let (c, s) = (yv.channels(), yv.spatial());
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &val) in yv.data().iter().enumerate() {
            let ch = (i / s) % c;
            let f = val.f64();
            sum[ch] += f;
            sq[ch] += f * f;
        }
        let count = (yv.len() / c) as f64;
        let mut gains = Vec::with_capacity(c);
        let mut biases = Vec::with_capacity(c);
        for ch in 0..c {
            let mean = sum[ch] / count;
            let var = (sq[ch] / count - mean * mean).max(0.0);
            let gn = self.init_scale / (var + 1e-8).sqrt();
            gains.push(T::c(gn));
            biases.push(T::c(-mean * gn));
        }
        let init = ctx.init.as_mut().expect("init mode");
        init.insert(gain, Tensor::new(vec![c], gains).expect("gain"));
        init.insert(self.bias, Tensor::new(vec![c], biases).expect("bias"));
    }
}

/// One residual layer: `h = A(x)`, `y = h + B(dropout(elu(h)))`.
///
/// `A` maps the input width to the layer width and carries any stride or
/// upsampling; `B` preserves width and resolution.
#[derive(Clone, Debug)]
pub struct ResLayer {
    pub a: Affine,
    pub b: Affine,
    pub dropout: f64,
}

impl ResLayer {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Var {
        let h = self.a.forward(ctx, x);
        let act = ctx.g.elu(h);
        let act = ctx.dropout(act, self.dropout);
        let r = self.b.forward(ctx, act);
        ctx.g.add(h, r)
    }

    pub fn width(&self) -> usize {
        self.a.out_channels()
    }
}
