use rand_distr::{Distribution, Normal};

use super::{missing_cache, layer_rng, Param};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeometry, Shape4, Tensor4};

/// Bias-free 2-d convolution; always followed by batch norm in the reference nets.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Param<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn new(name: &str, in_channels: usize, out_channels: usize, geometry: ConvGeometry, seed: u64) -> Self {
        let fan_in = in_channels * geometry.kernel_h * geometry.kernel_w;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let mut rng = layer_rng(seed, name);
        let len = out_channels * fan_in;
        let value = (0..len).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect();
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            geometry,
            weight: Param::new(value),
            cache: None,
        }
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels,
            self.geometry.kernel_h,
            self.geometry.kernel_w,
        )
    }

    pub fn weight_tensor(&self) -> Tensor4<T> {
        Tensor4::new(self.weight_shape(), self.weight.value.clone()).expect("weight length matches shape")
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = conv2d_forward(x, &self.weight_tensor(), self.geometry)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let (gx, gw) = conv2d_backward(x, &self.weight_tensor(), grad, self.geometry)?;
        self.weight.grad = gw.into_data();
        Ok(gx)
    }
}
