//! Parameterized building blocks shared by every backbone.
//!
//! Layers follow one calling convention: `forward_train` borrows its input
//! and returns a cache that does not hold that input; `backward` receives the
//! same input slice again together with the cache. Composite layers keep the
//! intermediate tensors their children need.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::kernels::activation::{relu_backward, relu_slice};
use crate::kernels::conv::{conv2d_backward, conv2d_batch, ConvSpec};
use crate::kernels::linear::{linear_backward, linear_batch};
use crate::kernels::norm::{BatchNorm, BnCache};
use crate::param::{join, Module, Param, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor3;

/// How the 3x3 convolutions inside residual blocks are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Standard,
    DepthwiseSeparable,
    Grouped(usize),
}

pub(crate) fn gaussian_init<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::of(normal.sample(rng))).collect()
}

pub(crate) fn uniform_init<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
}

impl<T: Real> Conv<T> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let value = gaussian_init(rng, spec.weight_len(), spec.fan_in());
        Ok(Self { spec, weight: Param::new(ParamKind::Conv, spec.weight_shape(), value) })
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        conv2d_batch(xs, &self.spec, &self.weight.value)
    }

    pub fn backward(
        &mut self,
        xs: &[Tensor3<T>],
        dys: &[Tensor3<T>],
        input_grad: bool,
    ) -> Result<Option<Vec<Tensor3<T>>>> {
        conv2d_backward(xs, &self.spec, &self.weight.value, dys, &mut self.weight.grad, input_grad)
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// A spatial convolution, possibly factored into depthwise + pointwise parts.
#[derive(Debug, Clone)]
pub enum ConvOp<T> {
    Single(Conv<T>),
    Separable { depthwise: Conv<T>, pointwise: Conv<T> },
}

pub struct ConvOpCache<T> {
    mid: Option<Vec<Tensor3<T>>>,
}

impl<T: Real> ConvOp<T> {
    pub fn build(
        kind: ConvKind,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 1 {
            return Ok(ConvOp::Single(Conv::new(ConvSpec::new(1, in_ch, out_ch, stride, dilation, 1)?, rng)?));
        }
        match kind {
            ConvKind::Standard => Ok(ConvOp::Single(Conv::new(
                ConvSpec::new(kernel, in_ch, out_ch, stride, dilation, 1)?,
                rng,
            )?)),
            ConvKind::Grouped(g) => Ok(ConvOp::Single(Conv::new(
                ConvSpec::new(kernel, in_ch, out_ch, stride, dilation, g)?,
                rng,
            )?)),
            ConvKind::DepthwiseSeparable => Ok(ConvOp::Separable {
                depthwise: Conv::new(ConvSpec::new(kernel, in_ch, in_ch, stride, dilation, in_ch)?, rng)?,
                pointwise: Conv::new(ConvSpec::pointwise(in_ch, out_ch)?, rng)?,
            }),
        }
    }

    pub fn in_ch(&self) -> usize {
        match self {
            ConvOp::Single(c) => c.spec.in_ch,
            ConvOp::Separable { depthwise, .. } => depthwise.spec.in_ch,
        }
    }

    pub fn out_ch(&self) -> usize {
        match self {
            ConvOp::Single(c) => c.spec.out_ch,
            ConvOp::Separable { pointwise, .. } => pointwise.spec.out_ch,
        }
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        match self {
            ConvOp::Single(c) => c.forward(xs),
            ConvOp::Separable { depthwise, pointwise } => pointwise.forward(&depthwise.forward(xs)?),
        }
    }

    pub fn forward_train(&self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, ConvOpCache<T>)> {
        match self {
            ConvOp::Single(c) => Ok((c.forward(xs)?, ConvOpCache { mid: None })),
            ConvOp::Separable { depthwise, pointwise } => {
                let mid = depthwise.forward(xs)?;
                let y = pointwise.forward(&mid)?;
                Ok((y, ConvOpCache { mid: Some(mid) }))
            }
        }
    }

    pub fn backward(
        &mut self,
        xs: &[Tensor3<T>],
        cache: ConvOpCache<T>,
        dys: &[Tensor3<T>],
        input_grad: bool,
    ) -> Result<Option<Vec<Tensor3<T>>>> {
        match self {
            ConvOp::Single(c) => c.backward(xs, dys, input_grad),
            ConvOp::Separable { depthwise, pointwise } => {
                let mid = cache.mid.ok_or_else(|| Error::shape("separable conv cache lacks intermediate"))?;
                let dmid = pointwise.backward(&mid, dys, true)?.expect("requested input gradient");
                depthwise.backward(xs, &dmid, input_grad)
            }
        }
    }
}

impl<T: Real> Module<T> for ConvOp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            ConvOp::Single(c) => c.visit(prefix, f),
            ConvOp::Separable { depthwise, pointwise } => {
                depthwise.visit(&join(prefix, "dw"), f);
                pointwise.visit(&join(prefix, "pw"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            ConvOp::Single(c) => c.visit_mut(prefix, f),
            ConvOp::Separable { depthwise, pointwise } => {
                depthwise.visit_mut(&join(prefix, "dw"), f);
                pointwise.visit_mut(&join(prefix, "pw"), f);
            }
        }
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: ConvOp<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
}

pub struct ConvBnCache<T> {
    conv: ConvOpCache<T>,
    bn: BnCache<T>,
    out: Option<Vec<Tensor3<T>>>,
}

impl<T> ConvBnCache<T> {
    /// Post-activation output, available when the unit applies a ReLU.
    pub fn output(&self) -> Option<&[Tensor3<T>]> {
        self.out.as_deref()
    }
}

impl<T: Real> ConvBn<T> {
    pub fn new(conv: ConvOp<T>, relu: bool) -> Self {
        let bn = BatchNorm::new(conv.out_ch());
        Self { conv, bn, relu }
    }

    pub fn forward(&self, xs: &[Tensor3<T>]) -> Result<Vec<Tensor3<T>>> {
        let mut ys = self.bn.infer(&self.conv.forward(xs)?)?;
        if self.relu {
            ys.iter_mut().for_each(|y| relu_slice(y.data_mut()));
        }
        Ok(ys)
    }

    pub fn forward_train(&mut self, xs: &[Tensor3<T>]) -> Result<(Vec<Tensor3<T>>, ConvBnCache<T>)> {
        let (c, conv_cache) = self.conv.forward_train(xs)?;
        let (mut ys, bn_cache) = self.bn.forward_train(&c)?;
        drop(c);
        let out = if self.relu {
            ys.iter_mut().for_each(|y| relu_slice(y.data_mut()));
            Some(ys.clone())
        } else {
            None
        };
        Ok((ys, ConvBnCache { conv: conv_cache, bn: bn_cache, out }))
    }

    pub fn backward(
        &mut self,
        xs: &[Tensor3<T>],
        cache: ConvBnCache<T>,
        dys: Vec<Tensor3<T>>,
        input_grad: bool,
    ) -> Result<Option<Vec<Tensor3<T>>>> {
        let dys = match &cache.out {
            Some(out) => out.iter().zip(&dys).map(|(y, dy)| relu_backward(y, dy)).collect(),
            None => dys,
        };
        let dc = self.bn.backward(&cache.bn, &dys)?;
        self.conv.backward(xs, cache.conv, &dc, input_grad)
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Dense map over row-stacked vectors, `y = W x (+ b)` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, kind: ParamKind, rng: &mut impl Rng) -> Self {
        let weight = Param::new(kind, vec![out_dim, in_dim], uniform_init(rng, in_dim * out_dim, in_dim));
        let bias = bias.then(|| Param::new(kind, vec![out_dim], uniform_init(rng, out_dim, in_dim)));
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn forward(&self, xs: &[T], rows: usize) -> Result<Vec<T>> {
        if xs.len() != rows * self.in_dim {
            return Err(Error::shape(format!(
                "linear layer expects {} inputs per row, got {}",
                self.in_dim,
                xs.len() / rows.max(1)
            )));
        }
        linear_batch(xs, rows, &self.weight.value, self.bias.as_ref().map(|b| b.value.as_slice()), self.out_dim)
    }

    pub fn backward(&mut self, xs: &[T], rows: usize, dys: &[T]) -> Result<Vec<T>> {
        linear_backward(
            xs,
            rows,
            &self.weight.value,
            dys,
            self.out_dim,
            &mut self.weight.grad,
            self.bias.as_mut().map(|b| b.grad.as_mut_slice()),
        )
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}
