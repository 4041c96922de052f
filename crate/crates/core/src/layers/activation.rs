use super::missing_cache;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct Relu<T> {
    pub name: String,
    cache: Option<Tensor4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        self.cache = Some(x.clone());
        x.map(|v| v.max(T::zero()))
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        if x.shape() != grad.shape() {
            return Err(Error::shape4("relu backward", x.shape(), grad.shape()));
        }
        grad.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
    }
}
