use rand::Rng;

use super::{layer_rng, missing_cache, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Fully connected layer over the flattened (C, H, W) features; output is (N, K, 1, 1).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major (out_features, in_features).
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, seed: u64) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let mut rng = layer_rng(seed, name);
        let value = (0..in_features * out_features)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Self {
            name: name.to_string(),
            in_features,
            out_features,
            weight: Param::new(value),
            bias: Param::new(vec![T::zero(); out_features]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        if s.sample() != self.in_features {
            return Err(Error::shape("linear in_features", self.in_features, s.sample()));
        }
        let mut out = Tensor4::zeros(Shape4::new(s.n, self.out_features, 1, 1));
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(
            s.n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            true,
            T::one(),
            out.data_mut(),
        );
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let n = x.shape().n;
        if grad.len() != n * self.out_features {
            return Err(Error::shape("linear backward", n * self.out_features, grad.len()));
        }
        let g = grad.data();
        T::gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            g,
            true,
            x.data(),
            false,
            T::zero(),
            &mut self.weight.grad,
        );
        for (k, b) in self.bias.grad.iter_mut().enumerate() {
            *b = (0..n).map(|i| g[i * self.out_features + k]).sum();
        }
        let mut gx = Tensor4::zeros(x.shape());
        T::gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            g,
            false,
            &self.weight.value,
            false,
            T::zero(),
            gx.data_mut(),
        );
        Ok(gx)
    }
}
