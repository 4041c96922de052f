//! Differentiable layers and the network graph built from them.

mod activation;
mod batchnorm;
mod conv;
mod gct_layer;
mod linear;
mod loss;
pub mod network;
mod pool;
mod residual;
mod se;

pub use activation::Relu;
pub use batchnorm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv2d;
pub use gct_layer::GctLayer;
pub use linear::Linear;
pub use loss::{softmax_xent, XentOutput};
pub use network::{build_network, LayerSpec, Network, NetworkSpec, Node, Placement};
pub use pool::{GlobalAvgPool, MaxPool};
pub use residual::Residual;
pub use se::{effective_reduction, se_forward, SeBlock, SeParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a parameter vector is, for weight-decay grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    GctAlpha,
    GctGamma,
    GctBeta,
}

/// Mutable view of one named parameter vector and its gradient.
pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

/// A trainable vector with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn view(&mut self, name: String, kind: ParamKind) -> ParamView<'_, T> {
        ParamView {
            name,
            kind,
            value: &mut self.value,
            grad: &mut self.grad,
        }
    }
}

/// Per-layer deterministic RNG derived from the network seed and layer name.
pub(crate) fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name keeps streams independent of layer insertion order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h)
}

/// One node of a network graph.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool<T>),
    GlobalAvgPool(GlobalAvgPool),
    Linear(Linear<T>),
    Gct(GctLayer<T>),
    Se(SeBlock<T>),
    Residual(Residual<T>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::Relu($l) => $body,
            Layer::MaxPool($l) => $body,
            Layer::GlobalAvgPool($l) => $body,
            Layer::Linear($l) => $body,
            Layer::Gct($l) => $body,
            Layer::Se($l) => $body,
            Layer::Residual($l) => $body,
        }
    };
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &str {
        dispatch!(self, l => &l.name)
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => Ok(l.forward(x)),
            Layer::Linear(l) => l.forward(x),
            Layer::Gct(l) => l.forward(x),
            Layer::Se(l) => l.forward(x),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    /// Gradient with respect to the input; parameter gradients are overwritten.
    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        dispatch!(self, l => l.backward(grad))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        match self {
            Layer::Conv(l) => f(l.weight.view(format!("{}.weight", l.name), ParamKind::Weight)),
            Layer::BatchNorm(l) => {
                f(l.gamma.view(format!("{}.gamma", l.name), ParamKind::BnScale));
                f(l.beta.view(format!("{}.beta", l.name), ParamKind::BnShift));
            }
            Layer::Linear(l) => {
                f(l.weight.view(format!("{}.weight", l.name), ParamKind::Weight));
                f(l.bias.view(format!("{}.bias", l.name), ParamKind::Bias));
            }
            Layer::Gct(l) => l.visit_params(f),
            Layer::Se(l) => {
                f(l.w1.view(format!("{}.w1", l.name), ParamKind::Weight));
                f(l.w2.view(format!("{}.w2", l.name), ParamKind::Weight));
            }
            Layer::Residual(l) => {
                for child in l.body.iter_mut().chain(l.shortcut.iter_mut()) {
                    child.visit_params(f);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    /// Non-trainable state (BN running statistics).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut Vec<T>)) {
        match self {
            Layer::BatchNorm(l) => {
                f(format!("{}.running_mean", l.name), &mut l.running_mean);
                f(format!("{}.running_var", l.name), &mut l.running_var);
            }
            Layer::Residual(l) => {
                for child in l.body.iter_mut().chain(l.shortcut.iter_mut()) {
                    child.visit_buffers(f);
                }
            }
            _ => {}
        }
    }

    /// Depth-first walk over this layer and every nested layer.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Layer<T>)) {
        f(self);
        if let Layer::Residual(r) = self {
            for child in r.body.iter().chain(r.shortcut.iter()) {
                child.walk(f);
            }
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Layer<T>)) {
        f(self);
        if let Layer::Residual(r) = self {
            for child in r.body.iter_mut().chain(r.shortcut.iter_mut()) {
                child.walk_mut(f);
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.value.len());
        total
    }
}

/// Runs a sequence of layers forward.
pub(crate) fn forward_seq<T: Scalar>(layers: &mut [Layer<T>], x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
    let mut cur = x.clone();
    for layer in layers.iter_mut() {
        cur = layer.forward(&cur, mode)?;
    }
    Ok(cur)
}

pub(crate) fn backward_seq<T: Scalar>(layers: &mut [Layer<T>], grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut cur = grad.clone();
    for layer in layers.iter_mut().rev() {
        cur = layer.backward(&cur)?;
    }
    Ok(cur)
}

pub(crate) fn missing_cache(layer: &str) -> crate::error::Error {
    crate::error::Error::InvalidParam(format!("{layer}: backward called before forward"))
}
