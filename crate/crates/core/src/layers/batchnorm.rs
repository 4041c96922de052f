use super::{missing_cache, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub name: String,
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::shape("batchnorm channels", self.channels, s.c));
        }
        let m = s.n * s.plane();
        let mf = T::from_usize(m).unwrap();
        let eps = T::from_f64_lossy(self.epsilon);
        let mom = T::from_f64_lossy(self.momentum);
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        match mode {
            Mode::Train => {
                for c in 0..s.c {
                    let sum: T = (0..s.n).map(|n| x.plane(n, c).iter().copied().sum::<T>()).sum();
                    let mu = sum / mf;
                    let sq: T = (0..s.n)
                        .map(|n| x.plane(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
                        .sum();
                    mean[c] = mu;
                    var[c] = sq / mf;
                    let unbiased = if m > 1 {
                        sq / T::from_usize(m - 1).unwrap()
                    } else {
                        var[c]
                    };
                    self.running_mean[c] = mom * self.running_mean[c] + (T::one() - mom) * mu;
                    self.running_var[c] = mom * self.running_var[c] + (T::one() - mom) * unbiased;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(&self.running_mean);
                var.copy_from_slice(&self.running_var);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                let xh = x_hat.plane_mut(n, c);
                for v in xh.iter_mut() {
                    *v = (*v - mean[c]) * inv_std[c];
                }
                for (o, &h) in y.plane_mut(n, c).iter_mut().zip(x_hat.plane(n, c)) {
                    *o = g * h + b;
                }
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, mode });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let s = cache.x_hat.shape();
        if grad.shape() != s {
            return Err(Error::shape4("batchnorm backward", s, grad.shape()));
        }
        let mf = T::from_usize(s.n * s.plane()).unwrap();
        let mut gx = Tensor4::zeros(s);
        for c in 0..s.c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for n in 0..s.n {
                for (&g, &h) in grad.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            self.gamma.grad[c] = sum_gx;
            self.beta.grad[c] = sum_g;
            let k = self.gamma.value[c] * cache.inv_std[c];
            for n in 0..s.n {
                let xh = cache.x_hat.plane(n, c);
                let go = grad.plane(n, c);
                let dst = gx.plane_mut(n, c);
                match cache.mode {
                    Mode::Train => {
                        for ((d, &g), &h) in dst.iter_mut().zip(go).zip(xh) {
                            *d = k * (g - sum_g / mf - h * sum_gx / mf);
                        }
                    }
                    Mode::Eval => {
                        for (d, &g) in dst.iter_mut().zip(go) {
                            *d = k * g;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}
