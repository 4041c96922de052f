use super::missing_cache;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Shape4, Tensor4};

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool<T> {
    pub name: String,
    pub geometry: ConvGeometry,
    cache: Option<(Shape4, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool<T> {
    pub fn new(name: &str, geometry: ConvGeometry) -> Self {
        Self {
            name: name.to_string(),
            geometry,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let g = self.geometry;
        if g.padding * 2 > g.kernel_h.min(g.kernel_w) {
            return Err(Error::InvalidParam(format!("{}: padding exceeds half the window", self.name)));
        }
        let (ho, wo) = g.output_hw(s.h, s.w)?;
        let out_shape = Shape4::new(s.n, s.c, ho, wo);
        let mut out = Tensor4::zeros(out_shape);
        let mut argmax = Vec::with_capacity(out_shape.len());
        let pad = g.padding as isize;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                let plane = x.plane(n, c);
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best: Option<(usize, T)> = None;
                        for ki in 0..g.kernel_h {
                            let ii = (oi * g.stride + ki) as isize - pad;
                            if ii < 0 || ii as usize >= s.h {
                                continue;
                            }
                            for kj in 0..g.kernel_w {
                                let jj = (oj * g.stride + kj) as isize - pad;
                                if jj < 0 || jj as usize >= s.w {
                                    continue;
                                }
                                let idx = ii as usize * s.w + jj as usize;
                                if best.is_none_or(|(_, b)| plane[idx] > b) {
                                    best = Some((idx, plane[idx]));
                                }
                            }
                        }
                        let (idx, v) = best.expect("window overlaps the input");
                        argmax.push(base + idx);
                        let o = out.offset(n, c, oi, oj);
                        out.data_mut()[o] = v;
                    }
                }
            }
        }
        self.cache = Some((s, argmax));
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (s, argmax) = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        if grad.len() != argmax.len() {
            return Err(Error::shape("maxpool backward", argmax.len(), grad.len()));
        }
        let mut gx = Tensor4::zeros(*s);
        for (&i, &g) in argmax.iter().zip(grad.data()) {
            gx.data_mut()[i] += g;
        }
        Ok(gx)
    }
}

/// Mean over each (n, c) plane; output is (N, C, 1, 1).
#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    pub name: String,
    cache: Option<Shape4>,
}

impl GlobalAvgPool {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let s = x.shape();
        self.cache = Some(s);
        let hw = T::from_usize(s.plane()).unwrap();
        x.reduce_spatial(crate::tensor::SpatialReduce::Sum).map(|v| v / hw)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = self.cache.ok_or_else(|| missing_cache(&self.name))?;
        if grad.len() != s.n * s.c {
            return Err(Error::shape("gap backward", s.n * s.c, grad.len()));
        }
        let hw = T::from_usize(s.plane()).unwrap();
        Ok(Tensor4::from_fn(s, |n, c, _, _| grad.data()[n * s.c + c] / hw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_recovers_constant_planes() {
        let x = Tensor4::from_fn([2, 3, 4, 4], |n, c, _, _| (n * 3 + c) as f64 * 0.25);
        let mut gap = GlobalAvgPool::new("gap");
        let y = gap.forward(&x);
        for n in 0..2 {
            for c in 0..3 {
                assert_eq!(y.at(n, c, 0, 0), (n * 3 + c) as f64 * 0.25);
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max_and_routes_gradient() {
        let x = Tensor4::new([1, 1, 2, 4], vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let mut p = MaxPool::new("pool", ConvGeometry::square(2, 2, 0));
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = p.backward(&Tensor4::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn padded_maxpool_ignores_padding() {
        let x = Tensor4::full([1, 1, 2, 2], -3.0f64);
        let mut p = MaxPool::new("pool", ConvGeometry::square(3, 2, 1));
        let y = p.forward(&x).unwrap();
        assert_eq!(y.data(), &[-3.0]);
    }
}
