//! Central finite-difference checks of every layer's backward pass (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gct::{embed, Adaptation, ChannelNorm, EmbedNorm, EpsilonPlacement, GctParams, GctVariant};
use crate::layers::{
    softmax_xent, BatchNorm, Conv2d, GctLayer, GlobalAvgPool, Layer, Linear, MaxPool, Mode, Relu, Residual,
    SeBlock,
};
use crate::tensor::{ConvGeometry, Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Magnitude below which errors are measured absolutely rather than relatively.
pub const ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
pub fn check_gradients(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn uniform(shape: impl Into<Shape4>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let shape = shape.into();
    Tensor4::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Checks input and parameter gradients of `layer` at `x` under the loss
/// `sum(r * layer(x))` with a random projection `r`.
///
/// `corrupt` is added to the first analytic component of every gradient;
/// zero checks the layer as implemented.
pub fn check_layer(
    layer: &mut Layer<f64>,
    x: &Tensor4<f64>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    corrupt: f64,
) -> Result<f64> {
    let y = layer.forward(x, mode)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let mut grad_x = layer.backward(&r)?;
    grad_x.data_mut()[0] += corrupt;

    let mut worst = {
        let shape = x.shape();
        let mut eval = |v: &[f64]| {
            let xt = Tensor4::new(shape, v.to_vec()).expect("shape");
            dot(&layer.forward(&xt, mode).expect("forward"), &r)
        };
        check_gradients(&mut eval, x.data(), grad_x.data())
    };

    let mut params: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |p| {
        let mut grad = p.grad.to_vec();
        grad[0] += corrupt;
        params.push((p.value.to_vec(), grad))
    });
    for (idx, (value, grad)) in params.iter().enumerate() {
        let mut eval = |v: &[f64]| {
            let mut k = 0;
            layer.visit_params(&mut |p| {
                if k == idx {
                    p.value.copy_from_slice(v);
                }
                k += 1;
            });
            dot(&layer.forward(x, mode).expect("forward"), &r)
        };
        worst = worst.max(check_gradients(&mut eval, value, grad));
        let mut k = 0;
        layer.visit_params(&mut |p| {
            if k == idx {
                p.value.copy_from_slice(value);
            }
            k += 1;
        });
    }
    Ok(worst)
}

/// Random values whose magnitudes are pairwise separated and bounded away
/// from zero, so max/abs kinks stay far outside the finite-difference step.
fn separated(shape: impl Into<Shape4>, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let shape = shape.into();
    let len = shape.len();
    let mut mags: Vec<f64> = (1..=len)
        .map(|k| 0.1 + (k as f64 + rng.random_range(0.0..0.5)) / len as f64)
        .collect();
    for i in (1..len).rev() {
        mags.swap(i, rng.random_range(0..=i));
    }
    let data = mags.into_iter().map(|m| if rng.random_bool(0.5) { m } else { -m }).collect();
    Tensor4::new(shape, data).expect("shape")
}

fn random_gct(c: usize, variant: GctVariant, rng: &mut ChaCha8Rng) -> GctLayer<f64> {
    let mut p = GctParams::new(c, variant);
    for v in &mut p.alpha {
        *v = rng.random_range(0.5..1.5);
    }
    for v in p.gamma.iter_mut().chain(p.beta.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    GctLayer::from_params("gct", p)
}

fn small_shape(rng: &mut ChaCha8Rng, min_c: usize) -> Shape4 {
    Shape4::new(
        rng.random_range(1..=3),
        rng.random_range(min_c..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    )
}

fn randomize_bn(bn: &mut BatchNorm<f64>, rng: &mut ChaCha8Rng) {
    for v in &mut bn.gamma.value {
        *v = rng.random_range(0.5..1.5);
    }
    for v in &mut bn.beta.value {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in &mut bn.running_mean {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in &mut bn.running_var {
        *v = rng.random_range(0.5..1.5);
    }
}

/// One named group of gradient checks.
pub struct Case {
    pub name: String,
    run: Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<f64>>,
}

impl Case {
    fn new(name: impl Into<String>, run: impl Fn(&mut ChaCha8Rng, f64) -> Result<f64> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }

    pub fn run(&self, instances: usize, seed: u64) -> Result<CaseReport> {
        self.run_corrupted(instances, seed, 0.0)
    }

    /// Like [`Case::run`] with every analytic gradient deliberately perturbed.
    pub fn run_corrupted(&self, instances: usize, seed: u64, corrupt: f64) -> Result<CaseReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max((self.run)(&mut rng, corrupt)?);
        }
        Ok(CaseReport {
            case: self.name.clone(),
            instances,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        })
    }
}

/// Smallest coefficient of variation of the embedding accepted for
/// mean-variance instances.
pub const MIN_EMBED_SPREAD: f64 = 0.1;

fn min_spread(s: &Tensor4<f64>) -> f64 {
    let c = s.shape().c;
    s.data()
        .chunks(c)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            var.sqrt() / mean.abs().max(f64::MIN_POSITIVE)
        })
        .fold(f64::INFINITY, f64::min)
}

fn gct_case(variant: GctVariant) -> Case {
    let mean_variance = variant.channel_norm == ChannelNorm::MeanVariance;
    Case::new(format!("gct/{}", variant.label()), move |rng, corrupt| {
        let shape = small_shape(rng, if mean_variance { 2 } else { 1 });
        let gct = random_gct(shape.c, variant, rng);
        let mut x = separated(shape, rng);
        // Mean-variance normalization divides by the embedding spread; draws
        // whose spread is tiny relative to the mean are too stiff for h = 1e-5.
        while mean_variance && min_spread(&embed(&x, &gct.params)?) < MIN_EMBED_SPREAD {
            x = separated(shape, rng);
        }
        check_layer(&mut Layer::Gct(gct), &x, Mode::Train, rng, corrupt)
    })
}

/// Every GCT variant combination the suite covers: 3 embeddings x 3 gates
/// with L2 channel normalization, the two other channel normalizations, and
/// the mean-based epsilon placement.
pub fn gct_variants() -> Vec<GctVariant> {
    let mut out = Vec::new();
    for embed_norm in EmbedNorm::ALL {
        for adaptation in Adaptation::ALL {
            out.push(GctVariant {
                embed_norm,
                adaptation,
                ..GctVariant::default()
            });
        }
    }
    for channel_norm in [ChannelNorm::L1, ChannelNorm::MeanVariance] {
        out.push(GctVariant {
            channel_norm,
            ..GctVariant::default()
        });
    }
    out.push(GctVariant {
        epsilon_placement: EpsilonPlacement::ReferenceCode,
        ..GctVariant::default()
    });
    out
}

/// Full suite: every layer kind plus every GCT variant.
pub fn suite() -> Vec<Case> {
    let mut cases = vec![
        Case::new("conv", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            let k = [1, 3][rng.random_range(0..2)];
            let pad = rng.random_range(0..=k / 2);
            let stride = rng.random_range(1..=2);
            let geom = ConvGeometry::square(k, stride, pad);
            let shape = Shape4::new(shape.n, shape.c, shape.h.max(k) + 1, shape.w.max(k) + 1);
            let mut layer = Layer::Conv(Conv2d::new("conv", shape.c, rng.random_range(1..=4), geom, rng.random()));
            check_layer(&mut layer, &uniform(shape, -1.0, 1.0, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("batch_norm/train", |rng, corrupt| {
            let shape = Shape4::new(rng.random_range(2..=3), rng.random_range(1..=5), rng.random_range(2..=4), rng.random_range(2..=4));
            let mut bn = BatchNorm::new("bn", shape.c);
            randomize_bn(&mut bn, rng);
            check_layer(&mut Layer::BatchNorm(bn), &uniform(shape, -1.0, 1.0, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("batch_norm/eval", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            let mut bn = BatchNorm::new("bn", shape.c);
            randomize_bn(&mut bn, rng);
            check_layer(&mut Layer::BatchNorm(bn), &uniform(shape, -1.0, 1.0, rng), Mode::Eval, rng, corrupt)
        }),
        Case::new("relu", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            check_layer(&mut Layer::Relu(Relu::new("relu")), &separated(shape, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("max_pool", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            let shape = Shape4::new(shape.n, shape.c, shape.h + 2, shape.w + 2);
            let geom = if rng.random_bool(0.5) {
                ConvGeometry::square(2, 2, 0)
            } else {
                ConvGeometry::square(3, 2, 1)
            };
            check_layer(
                &mut Layer::MaxPool(MaxPool::new("pool", geom)),
                &separated(shape, rng),
                Mode::Train,
                rng,
                corrupt,
            )
        }),
        Case::new("global_avg_pool", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            check_layer(
                &mut Layer::GlobalAvgPool(GlobalAvgPool::new("gap")),
                &uniform(shape, -1.0, 1.0, rng),
                Mode::Train,
                rng,
                corrupt,
            )
        }),
        Case::new("linear", |rng, corrupt| {
            let shape = small_shape(rng, 1);
            let mut l = Linear::new("fc", shape.sample(), rng.random_range(1..=5), rng.random());
            for b in &mut l.bias.value {
                *b = rng.random_range(-0.5..0.5);
            }
            check_layer(&mut Layer::Linear(l), &uniform(shape, -1.0, 1.0, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("se", |rng, corrupt| {
            let c = [4, 8, 12][rng.random_range(0..3)];
            let r = [1, 2, 4][rng.random_range(0..3)];
            let shape = Shape4::new(rng.random_range(1..=3), c, rng.random_range(1..=4), rng.random_range(1..=4));
            let se = SeBlock::new("se", c, r, rng.random())?;
            check_layer(&mut Layer::Se(se), &uniform(shape, -1.0, 1.0, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("residual", |rng, corrupt| {
            let shape = Shape4::new(2, rng.random_range(2..=3), 3, 3);
            let out_c = rng.random_range(1..=3);
            let seed = rng.random();
            let mut bn1 = BatchNorm::new("bn1", out_c);
            let mut bn2 = BatchNorm::new("bn2", out_c);
            randomize_bn(&mut bn1, rng);
            randomize_bn(&mut bn2, rng);
            let block = Residual {
                name: "res".into(),
                body: vec![
                    Layer::Gct(random_gct(shape.c, GctVariant::default(), rng)),
                    Layer::Conv(Conv2d::new("c1", shape.c, out_c, ConvGeometry::square(3, 1, 1), seed)),
                    Layer::BatchNorm(bn1),
                ],
                shortcut: vec![
                    Layer::Conv(Conv2d::new("c2", shape.c, out_c, ConvGeometry::square(1, 1, 0), seed)),
                    Layer::BatchNorm(bn2),
                ],
            };
            check_layer(&mut Layer::Residual(block), &separated(shape, rng), Mode::Train, rng, corrupt)
        }),
        Case::new("softmax_xent", |rng, corrupt| {
            let n = rng.random_range(1..=4);
            let k = rng.random_range(2..=6);
            let logits = uniform([n, k, 1, 1], -2.0, 2.0, rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut out = softmax_xent(&logits, &labels)?;
            out.grad.data_mut()[0] += corrupt;
            let shape = logits.shape();
            Ok(check_gradients(
                |v| softmax_xent(&Tensor4::new(shape, v.to_vec()).unwrap(), &labels).unwrap().loss,
                logits.data(),
                out.grad.data(),
            ))
        }),
    ];
    cases.extend(gct_variants().into_iter().map(gct_case));
    cases
}

/// Runs every case with `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    run_suite_corrupted(instances, seed, 0.0)
}

pub fn run_suite_corrupted(instances: usize, seed: u64, corrupt: f64) -> Result<Vec<CaseReport>> {
    suite()
        .iter()
        .enumerate()
        .map(|(i, c)| c.run_corrupted(instances, seed.wrapping_add(i as u64), corrupt))
        .collect()
}
