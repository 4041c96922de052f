//! Squeeze-and-excitation block: average pool, bottleneck MLP, sigmoid channel gate.

use rand_distr::{Distribution, Normal};

use super::{layer_rng, missing_cache, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{SpatialReduce, Tensor4};

/// Bias-free excitation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<T> {
    pub channels: usize,
    pub reduction: usize,
    /// Row-major (C / r, C).
    pub w1: Vec<T>,
    /// Row-major (C, C / r).
    pub w2: Vec<T>,
}

impl<T: Scalar> SeParams<T> {
    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::InvalidParam(format!(
                "SE reduction {} must divide channel count {}",
                self.reduction, self.channels
            )));
        }
        let h = self.hidden();
        if self.w1.len() != h * self.channels || self.w2.len() != h * self.channels {
            return Err(Error::shape("se weights", h * self.channels, self.w1.len().max(self.w2.len())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden()
    }
}

/// Reduction actually used for `channels`: at most `requested`, keeping
/// `C / r >= 4` where possible, and always dividing `C`.
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    let mut r = requested.min((channels / 4).max(1)).max(1);
    while !channels.is_multiple_of(r) {
        r -= 1;
    }
    r
}

#[derive(Debug, Clone)]
struct SeCache<T> {
    input: Tensor4<T>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    gate: Vec<T>,
}

struct SeForward<T> {
    out: Tensor4<T>,
    cache: SeCache<T>,
}

fn se_forward_impl<T: Scalar>(x: &Tensor4<T>, channels: usize, hidden: usize, w1: &[T], w2: &[T]) -> Result<SeForward<T>> {
    let s = x.shape();
    if s.c != channels {
        return Err(Error::shape("se channels", channels, s.c));
    }
    let hw = T::from_usize(s.plane()).unwrap();
    let pooled: Vec<T> = x
        .reduce_spatial(SpatialReduce::Sum)
        .into_data()
        .into_iter()
        .map(|v| v / hw)
        .collect();
    let mut hidden_pre = vec![T::zero(); s.n * hidden];
    T::gemm(s.n, channels, hidden, T::one(), &pooled, false, w1, true, T::zero(), &mut hidden_pre);
    let act: Vec<T> = hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
    let mut logits = vec![T::zero(); s.n * channels];
    T::gemm(s.n, hidden, channels, T::one(), &act, false, w2, true, T::zero(), &mut logits);
    let gate: Vec<T> = logits.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
    let out = x.scale_planes(&gate)?;
    Ok(SeForward {
        out,
        cache: SeCache {
            input: x.clone(),
            pooled,
            hidden_pre,
            gate,
        },
    })
}

/// Functional form of the SE block.
pub fn se_forward<T: Scalar>(x: &Tensor4<T>, p: &SeParams<T>) -> Result<Tensor4<T>> {
    p.validate()?;
    Ok(se_forward_impl(x, p.channels, p.hidden(), &p.w1, &p.w2)?.out)
}

#[derive(Debug, Clone)]
pub struct SeBlock<T> {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
    pub w1: Param<T>,
    pub w2: Param<T>,
    cache: Option<SeCache<T>>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidParam(format!(
                "SE reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        let mut rng = layer_rng(seed, name);
        let d1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
        let d2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let w1 = (0..hidden * channels).map(|_| T::from_f64_lossy(d1.sample(&mut rng))).collect();
        let w2 = (0..hidden * channels).map(|_| T::from_f64_lossy(d2.sample(&mut rng))).collect();
        Ok(Self {
            name: name.to_string(),
            channels,
            reduction,
            w1: Param::new(w1),
            w2: Param::new(w2),
            cache: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn params(&self) -> SeParams<T> {
        SeParams {
            channels: self.channels,
            reduction: self.reduction,
            w1: self.w1.value.clone(),
            w2: self.w2.value.clone(),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let f = se_forward_impl(x, self.channels, self.hidden(), &self.w1.value, &self.w2.value)?;
        self.cache = Some(f.cache);
        Ok(f.out)
    }

    /// Gate values of the last forward pass, (N * C) row-major.
    pub fn last_gate(&self) -> Option<&[T]> {
        self.cache.as_ref().map(|c| c.gate.as_slice())
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let x = &cache.input;
        let s = x.shape();
        if grad.shape() != s {
            return Err(Error::shape4("se backward", s, grad.shape()));
        }
        let (c, h) = (self.channels, self.hidden());
        let mut g_logit = vec![T::zero(); s.n * c];
        for n in 0..s.n {
            for ch in 0..c {
                let gg: T = x.plane(n, ch).iter().zip(grad.plane(n, ch)).map(|(&a, &b)| a * b).sum();
                let gate = cache.gate[n * c + ch];
                g_logit[n * c + ch] = gg * gate * (T::one() - gate);
            }
        }
        let act: Vec<T> = cache.hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
        // dW2 (C x h) = g_logit^T (C x N) * act (N x h)
        T::gemm(c, s.n, h, T::one(), &g_logit, true, &act, false, T::zero(), &mut self.w2.grad);
        let mut g_hidden = vec![T::zero(); s.n * h];
        T::gemm(s.n, c, h, T::one(), &g_logit, false, &self.w2.value, false, T::zero(), &mut g_hidden);
        for (g, &pre) in g_hidden.iter_mut().zip(&cache.hidden_pre) {
            if pre <= T::zero() {
                *g = T::zero();
            }
        }
        T::gemm(h, s.n, c, T::one(), &g_hidden, true, &cache.pooled, false, T::zero(), &mut self.w1.grad);
        let mut g_pooled = vec![T::zero(); s.n * c];
        T::gemm(s.n, h, c, T::one(), &g_hidden, false, &self.w1.value, false, T::zero(), &mut g_pooled);
        let hw = T::from_usize(s.plane()).unwrap();
        let mut gx = Tensor4::zeros(s);
        for n in 0..s.n {
            for ch in 0..c {
                let gate = cache.gate[n * c + ch];
                let gp = g_pooled[n * c + ch] / hw;
                for (d, &g) in gx.plane_mut(n, ch).iter_mut().zip(grad.plane(n, ch)) {
                    *d = g * gate + gp;
                }
            }
        }
        Ok(gx)
    }
}
