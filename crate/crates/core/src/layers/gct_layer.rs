use super::{missing_cache, ParamKind, ParamView};
use crate::error::Result;
use crate::gct::{gct_backward, gct_forward, GctForwardCache, GctParams, GctVariant};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Graph node wrapping a gated channel transformation.
#[derive(Debug, Clone)]
pub struct GctLayer<T> {
    pub name: String,
    pub params: GctParams<T>,
    pub grad_alpha: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    cache: Option<GctForwardCache<T>>,
}

impl<T: Scalar> GctLayer<T> {
    pub fn new(name: &str, channels: usize, variant: GctVariant) -> Self {
        Self::from_params(name, GctParams::new(channels, variant))
    }

    pub fn from_params(name: &str, params: GctParams<T>) -> Self {
        let c = params.channels();
        Self {
            name: name.to_string(),
            params,
            grad_alpha: vec![T::zero(); c],
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); c],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.params.channels()
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, cache) = gct_forward(x, &self.params)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let g = gct_backward(cache, grad, &self.params)?;
        self.grad_alpha = g.alpha;
        self.grad_gamma = g.gamma;
        self.grad_beta = g.beta;
        Ok(g.x)
    }

    /// Forward cache of the last call, if any.
    pub fn last_cache(&self) -> Option<&GctForwardCache<T>> {
        self.cache.as_ref()
    }

    pub(super) fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: format!("{}.alpha", self.name),
            kind: ParamKind::GctAlpha,
            value: &mut self.params.alpha,
            grad: &mut self.grad_alpha,
        });
        f(ParamView {
            name: format!("{}.gamma", self.name),
            kind: ParamKind::GctGamma,
            value: &mut self.params.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamView {
            name: format!("{}.beta", self.name),
            kind: ParamKind::GctBeta,
            value: &mut self.params.beta,
            grad: &mut self.grad_beta,
        });
    }
}
