use gct_core::tensor::{conv2d_backward, conv2d_forward, conv2d_forward_direct, ConvGeometry};
use gct_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max absolute difference over the max magnitude of the reference.
fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

struct Case {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: Vec<f64>,
    wt: Vec<f64>,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let k = rng.random_range(1..=3);
        let h = rng.random_range(k..=8);
        let w = rng.random_range(k..=8);
        let (n, c, o) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let x = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride: rng.random_range(1..=2),
            pad: rng.random_range(0..=k / 2 + 1),
            x,
            wt,
        }
    }

    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn xi(&self, n: usize, c: usize, i: isize, j: isize) -> Option<usize> {
        if i < 0 || j < 0 || i as usize >= self.h || j as usize >= self.w {
            return None;
        }
        Some(((n * self.c + c) * self.h + i as usize) * self.w + j as usize)
    }

    fn wi(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.c + c) * self.k + a) * self.k + b
    }

    /// Six nested loops over (n, o, i, j, c, window).
    fn forward(&self) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let mut y = vec![0.0; self.n * self.o * ho * wo];
        for n in 0..self.n {
            for o in 0..self.o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..self.c {
                            for a in 0..self.k {
                                for b in 0..self.k {
                                    let ii = (i * self.stride + a) as isize - self.pad as isize;
                                    let jj = (j * self.stride + b) as isize - self.pad as isize;
                                    if let Some(xi) = self.xi(n, c, ii, jj) {
                                        acc += self.x[xi] * self.wt[self.wi(o, c, a, b)];
                                    }
                                }
                            }
                        }
                        y[((n * self.o + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        y
    }

    /// Adjoint of `forward` for a given upstream gradient.
    fn backward(&self, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (ho, wo) = self.out_hw();
        let mut gx = vec![0.0; self.x.len()];
        let mut gw = vec![0.0; self.wt.len()];
        for n in 0..self.n {
            for o in 0..self.o {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = gy[((n * self.o + o) * ho + i) * wo + j];
                        for c in 0..self.c {
                            for a in 0..self.k {
                                for b in 0..self.k {
                                    let ii = (i * self.stride + a) as isize - self.pad as isize;
                                    let jj = (j * self.stride + b) as isize - self.pad as isize;
                                    if let Some(xi) = self.xi(n, c, ii, jj) {
                                        let wi = self.wi(o, c, a, b);
                                        gx[xi] += g * self.wt[wi];
                                        gw[wi] += g * self.x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw)
    }

    fn tensors(&self) -> (Tensor4<f64>, Tensor4<f64>, ConvGeometry) {
        (
            Tensor4::new([self.n, self.c, self.h, self.w], self.x.clone()).unwrap(),
            Tensor4::new([self.o, self.c, self.k, self.k], self.wt.clone()).unwrap(),
            ConvGeometry::square(self.k, self.stride, self.pad),
        )
    }
}

#[test]
fn forward_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let case = Case::random(&mut rng);
        let (x, w, g) = case.tensors();
        let want = case.forward();
        let gemm = conv2d_forward(&x, &w, g).unwrap();
        let direct = conv2d_forward_direct(&x, &w, g).unwrap();
        assert!(rel_err(gemm.data(), &want) < 1e-12);
        assert!(rel_err(direct.data(), &want) < 1e-12);
    }
}

#[test]
fn backward_matches_adjoint_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let case = Case::random(&mut rng);
        let (x, w, g) = case.tensors();
        let y = conv2d_forward(&x, &w, g).unwrap();
        let gy: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (want_x, want_w) = case.backward(&gy);
        let (gx, gw) = conv2d_backward(&x, &w, &Tensor4::new(y.shape(), gy).unwrap(), g).unwrap();
        assert!(rel_err(gx.data(), &want_x) < 1e-12);
        assert!(rel_err(gw.data(), &want_w) < 1e-12);
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let case = Case::random(&mut rng);
        let (x, w, g) = case.tensors();
        let y32 = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), g).unwrap();
        let y64 = case.forward();
        let back: Vec<f64> = y32.data().iter().map(|&v| v as f64).collect();
        assert!(rel_err(&back, &y64) < 1e-5);
    }
}

#[test]
fn elementwise_map_inverts() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor4::from_fn([2, 3, 4, 5], |_, _, _, _| rng.random_range(-3.0..3.0f64));
    let back = x.map(f64::sinh).map(f64::asinh);
    assert!(rel_err(back.data(), x.data()) < 1e-12);
    let back = x.map(f64::exp).map(f64::ln);
    assert!(rel_err(back.data(), x.data()) < 1e-12);
}
