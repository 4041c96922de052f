//! Gated channel transformation.
//!
//! For each sample the layer computes a per-channel global context
//! embedding `s_c = alpha_c * ||x_c||`, normalizes the embedding vector
//! across channels, and rescales every channel by a gate driven by the
//! normalized embedding: `x_c * act(gamma_c * s_hat_c + beta_c)`.
//!
//! With `alpha = 1`, `gamma = 0`, `beta = 0` and the `1 + tanh` gate the
//! layer is an exact identity map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, SpatialReduce, Tensor4};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Norm used for the per-channel global context embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedNorm {
    L1,
    #[default]
    L2,
    Linf,
}

/// Normalization applied across the channel embeddings of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelNorm {
    L1,
    #[default]
    L2,
    MeanVariance,
}

/// Gate activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    #[default]
    OnePlusTanh,
    Sigmoid,
    OnePlusElu,
}

/// Where epsilon enters the L2 channel normalization.
///
/// `Equation` adds it to the sum of squared embeddings. `ReferenceCode`
/// adds it to their mean, i.e. `sqrt(sum s^2 + C * eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPlacement {
    #[default]
    Equation,
    ReferenceCode,
}

impl EmbedNorm {
    pub const ALL: [EmbedNorm; 3] = [EmbedNorm::Linf, EmbedNorm::L1, EmbedNorm::L2];

    pub fn name(self) -> &'static str {
        match self {
            EmbedNorm::L1 => "l1",
            EmbedNorm::L2 => "l2",
            EmbedNorm::Linf => "linf",
        }
    }
}

impl ChannelNorm {
    pub const ALL: [ChannelNorm; 3] = [ChannelNorm::L1, ChannelNorm::L2, ChannelNorm::MeanVariance];

    pub fn name(self) -> &'static str {
        match self {
            ChannelNorm::L1 => "l1",
            ChannelNorm::L2 => "l2",
            ChannelNorm::MeanVariance => "mean_variance",
        }
    }
}

impl Adaptation {
    pub const ALL: [Adaptation; 3] = [Adaptation::Sigmoid, Adaptation::OnePlusElu, Adaptation::OnePlusTanh];

    pub fn name(self) -> &'static str {
        match self {
            Adaptation::OnePlusTanh => "one_plus_tanh",
            Adaptation::Sigmoid => "sigmoid",
            Adaptation::OnePlusElu => "one_plus_elu",
        }
    }

    /// Gate value and its derivative at `z`.
    #[inline]
    pub fn eval<T: Scalar>(self, z: T) -> (T, T) {
        let one = T::one();
        match self {
            Adaptation::OnePlusTanh => {
                let t = z.tanh();
                (one + t, one - t * t)
            }
            Adaptation::Sigmoid => {
                let s = one / (one + (-z).exp());
                (s, s * (one - s))
            }
            Adaptation::OnePlusElu => {
                if z >= T::zero() {
                    (one + z, one)
                } else {
                    let e = z.exp();
                    (e, e)
                }
            }
        }
    }
}

/// Variant selectors and epsilon, without the per-channel vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GctVariant {
    pub embed_norm: EmbedNorm,
    pub channel_norm: ChannelNorm,
    pub adaptation: Adaptation,
    pub epsilon: f64,
    pub epsilon_placement: EpsilonPlacement,
}

impl Default for GctVariant {
    fn default() -> Self {
        Self {
            embed_norm: EmbedNorm::L2,
            channel_norm: ChannelNorm::L2,
            adaptation: Adaptation::OnePlusTanh,
            epsilon: DEFAULT_EPSILON,
            epsilon_placement: EpsilonPlacement::Equation,
        }
    }
}

impl GctVariant {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Short label such as `l2/l2/one_plus_tanh`.
    pub fn label(&self) -> String {
        let mut label = format!(
            "{}/{}/{}",
            self.embed_norm.name(),
            self.channel_norm.name(),
            self.adaptation.name()
        );
        if self.epsilon_placement == EpsilonPlacement::ReferenceCode {
            label.push_str("/reference_epsilon");
        }
        label
    }
}

/// Trainable per-channel vectors plus the variant they are used with.
#[derive(Debug, Clone, PartialEq)]
pub struct GctParams<T> {
    pub alpha: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub variant: GctVariant,
}

impl<T: Scalar> GctParams<T> {
    /// alpha = 1, gamma = 0, beta = 0.
    pub fn new(channels: usize, variant: GctVariant) -> Self {
        Self {
            alpha: vec![T::one(); channels],
            gamma: vec![T::zero(); channels],
            beta: vec![T::zero(); channels],
            variant,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    /// Epsilon may be zero only for exact-arithmetic checks; layers built
    /// from a network spec always use a positive value.
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let c = self.alpha.len();
        if c == 0 || self.gamma.len() != c || self.beta.len() != c {
            return Err(Error::InvalidParam(format!(
                "alpha/gamma/beta lengths must match and be non-zero: {}/{}/{}",
                c,
                self.gamma.len(),
                self.beta.len()
            )));
        }
        Ok(())
    }

    fn eps(&self) -> T {
        T::from_f64_lossy(self.variant.epsilon)
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        self.validate()?;
        if shape.c != self.channels() {
            return Err(Error::shape("gct channels", self.channels(), shape.c));
        }
        Ok(())
    }

    pub fn to_record(&self) -> GctParamsRecord {
        GctParamsRecord {
            alpha: self.alpha.iter().map(|v| v.to_f64_lossy()).collect(),
            gamma: self.gamma.iter().map(|v| v.to_f64_lossy()).collect(),
            beta: self.beta.iter().map(|v| v.to_f64_lossy()).collect(),
            epsilon: self.variant.epsilon,
            embed_norm: self.variant.embed_norm,
            channel_norm: self.variant.channel_norm,
            adaptation: self.variant.adaptation,
            epsilon_placement: self.variant.epsilon_placement,
        }
    }

    pub fn from_record(r: &GctParamsRecord) -> Result<Self> {
        let p = Self {
            alpha: r.alpha.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            gamma: r.gamma.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            beta: r.beta.iter().map(|&v| T::from_f64_lossy(v)).collect(),
            variant: GctVariant {
                embed_norm: r.embed_norm,
                channel_norm: r.channel_norm,
                adaptation: r.adaptation,
                epsilon: r.epsilon,
                epsilon_placement: r.epsilon_placement,
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(&serde_json::from_str(s)?)
    }
}

fn is_default_placement(p: &EpsilonPlacement) -> bool {
    *p == EpsilonPlacement::Equation
}

/// Flat JSON form of [`GctParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GctParamsRecord {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub embed_norm: EmbedNorm,
    pub channel_norm: ChannelNorm,
    pub adaptation: Adaptation,
    #[serde(default, skip_serializing_if = "is_default_placement")]
    pub epsilon_placement: EpsilonPlacement,
}

/// Unscaled channel norms `||x_c||` (epsilon included), shape (N, C, 1, 1).
fn channel_norms<T: Scalar>(x: &Tensor4<T>, params: &GctParams<T>) -> Tensor4<T> {
    let eps = params.eps();
    match params.variant.embed_norm {
        EmbedNorm::L2 => x.reduce_spatial(SpatialReduce::SumOfSquares).map(|v| (v + eps).sqrt()),
        EmbedNorm::L1 => x.reduce_spatial(SpatialReduce::SumAbs).map(|v| v + eps),
        EmbedNorm::Linf => x.reduce_spatial(SpatialReduce::MaxAbs).map(|v| v + eps),
    }
}

fn scale_by_alpha<T: Scalar>(norms: &Tensor4<T>, alpha: &[T]) -> Tensor4<T> {
    let c = alpha.len();
    let mut s = norms.clone();
    for (i, v) in s.data_mut().iter_mut().enumerate() {
        *v *= alpha[i % c];
    }
    s
}

/// Global context embedding `s`, shape (N, C, 1, 1).
pub fn embed<T: Scalar>(x: &Tensor4<T>, params: &GctParams<T>) -> Result<Tensor4<T>> {
    params.check_input(x.shape())?;
    Ok(scale_by_alpha(&channel_norms(x, params), &params.alpha))
}

/// Per-sample normalization statistic used by each channel-norm variant.
struct NormStat<T> {
    denom: T,
    mean: T,
    std: T,
}

/// Sum over sorted terms, independent of channel order.
fn ordered_sum<T: Scalar>(terms: impl Iterator<Item = T>) -> T {
    let mut v: Vec<T> = terms.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.into_iter().sum()
}

fn norm_stat<T: Scalar>(row: &[T], variant: &GctVariant) -> NormStat<T> {
    let eps = T::from_f64_lossy(variant.epsilon);
    let c = T::from_usize(row.len()).unwrap();
    match variant.channel_norm {
        ChannelNorm::L2 => {
            let eps = match variant.epsilon_placement {
                EpsilonPlacement::Equation => eps,
                EpsilonPlacement::ReferenceCode => eps * c,
            };
            let sq = ordered_sum(row.iter().map(|&v| v * v));
            NormStat {
                denom: (sq + eps).sqrt(),
                mean: T::zero(),
                std: T::zero(),
            }
        }
        ChannelNorm::L1 => NormStat {
            denom: ordered_sum(row.iter().map(|v| v.abs())) + eps,
            mean: T::zero(),
            std: T::zero(),
        },
        ChannelNorm::MeanVariance => {
            let mean = ordered_sum(row.iter().copied()) / c;
            let var = ordered_sum(row.iter().map(|&v| (v - mean) * (v - mean))) / c;
            let std = var.sqrt();
            NormStat {
                denom: std + eps,
                mean,
                std,
            }
        }
    }
}

/// Normalized embedding `s_hat` computed independently per sample.
///
/// A zero denominator (only reachable with epsilon = 0) yields `s_hat = 0`.
pub fn channel_normalize<T: Scalar>(s: &Tensor4<T>, params: &GctParams<T>) -> Result<Tensor4<T>> {
    params.validate()?;
    let shape = s.shape();
    if shape.c != params.channels() || shape.h != 1 || shape.w != 1 {
        return Err(Error::shape(
            "channel_normalize",
            format!("(N, {}, 1, 1)", params.channels()),
            shape,
        ));
    }
    let c = shape.c;
    let cf = T::from_usize(c).unwrap();
    let mut out = s.clone();
    for (row, dst) in s.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let st = norm_stat(row, &params.variant);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = if st.denom == T::zero() {
                T::zero()
            } else {
                match params.variant.channel_norm {
                    ChannelNorm::L2 => cf.sqrt() * v / st.denom,
                    ChannelNorm::L1 => cf * v / st.denom,
                    ChannelNorm::MeanVariance => (v - st.mean) / st.denom,
                }
            };
        }
    }
    Ok(out)
}

/// Gate pre-activations `gamma * s_hat + beta` and activations.
fn gates<T: Scalar>(s_hat: &Tensor4<T>, params: &GctParams<T>) -> (Tensor4<T>, Tensor4<T>) {
    let c = params.channels();
    let z = Tensor4::from_fn(s_hat.shape(), |n, ch, _, _| {
        params.gamma[ch] * s_hat.data()[n * c + ch] + params.beta[ch]
    });
    let gate = z.map(|v| params.variant.adaptation.eval(v).0);
    (z, gate)
}

/// Rescales each channel of `x` by its gate.
pub fn gate_adapt<T: Scalar>(x: &Tensor4<T>, s_hat: &Tensor4<T>, params: &GctParams<T>) -> Result<Tensor4<T>> {
    params.check_input(x.shape())?;
    let expect = Shape4::new(x.shape().n, x.shape().c, 1, 1);
    if s_hat.shape() != expect {
        return Err(Error::shape4("gate_adapt s_hat", expect, s_hat.shape()));
    }
    let (_, gate) = gates(s_hat, params);
    x.scale_planes(gate.data())
}

/// Intermediate values kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct GctForwardCache<T> {
    pub input: Tensor4<T>,
    /// `||x_c||` with epsilon, before the alpha scaling.
    pub norms: Tensor4<T>,
    pub s: Tensor4<T>,
    pub s_hat: Tensor4<T>,
    pub z: Tensor4<T>,
    pub gate: Tensor4<T>,
    pub variant: GctVariant,
}

pub fn gct_forward<T: Scalar>(x: &Tensor4<T>, params: &GctParams<T>) -> Result<(Tensor4<T>, GctForwardCache<T>)> {
    params.check_input(x.shape())?;
    let norms = channel_norms(x, params);
    let s = scale_by_alpha(&norms, &params.alpha);
    let s_hat = channel_normalize(&s, params)?;
    let (z, gate) = gates(&s_hat, params);
    let out = x.scale_planes(gate.data())?;
    Ok((
        out,
        GctForwardCache {
            input: x.clone(),
            norms,
            s,
            s_hat,
            z,
            gate,
            variant: params.variant,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct GctGrads<T> {
    pub x: Tensor4<T>,
    pub alpha: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Backpropagates `grad_s_hat` of one sample through the channel normalization.
fn channel_norm_backward<T: Scalar>(s: &[T], g_hat: &[T], variant: &GctVariant, out: &mut [T]) {
    let st = norm_stat(s, variant);
    if st.denom == T::zero() {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let c = T::from_usize(s.len()).unwrap();
    let d = st.denom;
    match variant.channel_norm {
        ChannelNorm::L2 => {
            // s_hat_k = sqrt(C) s_k / d,  d = sqrt(sum s^2 + eps')
            let dot: T = s.iter().zip(g_hat).map(|(&a, &b)| a * b).sum();
            let k = c.sqrt();
            for ((o, &sv), &g) in out.iter_mut().zip(s).zip(g_hat) {
                *o = k * g / d - k * sv * dot / (d * d * d);
            }
        }
        ChannelNorm::L1 => {
            // s_hat_k = C s_k / d,  d = sum |s| + eps
            let dot: T = s.iter().zip(g_hat).map(|(&a, &b)| a * b).sum();
            for ((o, &sv), &g) in out.iter_mut().zip(s).zip(g_hat) {
                *o = c * g / d - c * sign(sv) * dot / (d * d);
            }
        }
        ChannelNorm::MeanVariance => {
            // s_hat_k = (s_k - mu) / (sigma + eps)
            let g_mean = g_hat.iter().copied().sum::<T>() / c;
            let dot: T = s.iter().zip(g_hat).map(|(&a, &b)| (a - st.mean) * b).sum();
            for ((o, &sv), &g) in out.iter_mut().zip(s).zip(g_hat) {
                let dsigma = if st.std > T::zero() {
                    (sv - st.mean) / (c * st.std)
                } else {
                    T::zero()
                };
                *o = (g - g_mean) / d - dot / (d * d) * dsigma;
            }
        }
    }
}

/// Exact gradients through embedding, channel normalization and gating.
///
/// Parameter gradients are summed over the batch.
pub fn gct_backward<T: Scalar>(
    cache: &GctForwardCache<T>,
    grad_out: &Tensor4<T>,
    params: &GctParams<T>,
) -> Result<GctGrads<T>> {
    let x = &cache.input;
    let shape = x.shape();
    if cache.variant != params.variant || shape.c != params.channels() {
        return Err(Error::InvalidParam(
            "gct_backward: cache was produced with different parameters".into(),
        ));
    }
    if grad_out.shape() != shape {
        return Err(Error::shape4("gct_backward grad_out", shape, grad_out.shape()));
    }
    let (nb, c) = (shape.n, shape.c);
    let variant = &params.variant;
    let mut grad_x = Tensor4::zeros(shape);
    let mut grad_alpha = vec![T::zero(); c];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut g_hat = vec![T::zero(); c];
    let mut g_s = vec![T::zero(); c];
    let mut g_norm = vec![T::zero(); c];

    for n in 0..nb {
        for ch in 0..c {
            let i = n * c + ch;
            let g_gate: T = x
                .plane(n, ch)
                .iter()
                .zip(grad_out.plane(n, ch))
                .map(|(&a, &b)| a * b)
                .sum();
            let g_z = g_gate * variant.adaptation.eval(cache.z.data()[i]).1;
            grad_beta[ch] += g_z;
            grad_gamma[ch] += g_z * cache.s_hat.data()[i];
            g_hat[ch] = g_z * params.gamma[ch];
        }
        let s_row = &cache.s.data()[n * c..(n + 1) * c];
        channel_norm_backward(s_row, &g_hat, variant, &mut g_s);
        for ch in 0..c {
            let i = n * c + ch;
            grad_alpha[ch] += g_s[ch] * cache.norms.data()[i];
            g_norm[ch] = g_s[ch] * params.alpha[ch];
        }

        for ch in 0..c {
            let gate = cache.gate.data()[n * c + ch];
            let norm = cache.norms.data()[n * c + ch];
            let gn = g_norm[ch];
            let xp = x.plane(n, ch);
            let go = grad_out.plane(n, ch);
            let gx = grad_x.plane_mut(n, ch);
            for (dst, &g) in gx.iter_mut().zip(go) {
                *dst = g * gate;
            }
            if gn == T::zero() {
                continue;
            }
            match variant.embed_norm {
                EmbedNorm::L2 => {
                    for (dst, &xv) in gx.iter_mut().zip(xp) {
                        *dst += gn * xv / norm;
                    }
                }
                EmbedNorm::L1 => {
                    for (dst, &xv) in gx.iter_mut().zip(xp) {
                        *dst += gn * sign(xv);
                    }
                }
                EmbedNorm::Linf => {
                    let mut best = 0;
                    for (j, v) in xp.iter().enumerate() {
                        if v.abs() > xp[best].abs() {
                            best = j;
                        }
                    }
                    gx[best] += gn * sign(xp[best]);
                }
            }
        }
    }
    Ok(GctGrads {
        x: grad_x,
        alpha: grad_alpha,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: usize, eps: f64) -> GctParams<f64> {
        GctParams::new(
            c,
            GctVariant {
                epsilon: eps,
                ..GctVariant::default()
            },
        )
    }

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::new(shape, data).unwrap()
    }

    #[test]
    fn fresh_params_are_identity_init() {
        let p = GctParams::<f32>::new(4, GctVariant::default());
        assert!(p.alpha.iter().all(|&a| a == 1.0));
        assert!(p.gamma.iter().all(|&g| g == 0.0));
        assert!(p.beta.iter().all(|&b| b == 0.0));
        assert_eq!(p.variant.epsilon, 1e-5);
    }

    #[test]
    fn embed_examples() {
        let x = t([1, 1, 1, 2], vec![3.0, 4.0]);
        let mut p = params(1, 0.0);
        assert_eq!(embed(&x, &p).unwrap().data(), &[5.0]);
        p.alpha = vec![2.0];
        assert_eq!(embed(&x, &p).unwrap().data(), &[10.0]);

        let mut p1 = params(1, 0.0);
        p1.variant.embed_norm = EmbedNorm::L1;
        let y = t([1, 1, 1, 3], vec![1.0, -2.0, 3.0]);
        assert_eq!(embed(&y, &p1).unwrap().data(), &[6.0]);

        let zero = Tensor4::<f64>::zeros([2, 3, 2, 2]);
        let s = embed(&zero, &params(3, 1e-5)).unwrap();
        for &v in s.data() {
            assert!((v - 1e-5f64.sqrt()).abs() < 1e-15);
            assert!((v - 3.1623e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn embed_rejects_channel_mismatch() {
        let x = Tensor4::<f64>::zeros([1, 3, 2, 2]);
        assert!(matches!(embed(&x, &params(2, 1e-5)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn channel_normalize_examples() {
        let p = params(4, 0.0);
        let s = Tensor4::full([1, 4, 1, 1], 2.5);
        for &v in channel_normalize(&s, &p).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-15);
        }

        let p2 = params(2, 0.0);
        let s = t([1, 2, 1, 1], vec![3.0, 4.0]);
        let h = channel_normalize(&s, &p2).unwrap();
        assert!((h.data()[0] - 0.848528137423857).abs() < 1e-12);
        assert!((h.data()[1] - 1.131370849898476).abs() < 1e-12);

        let mut mv = params(2, 0.0);
        mv.variant.channel_norm = ChannelNorm::MeanVariance;
        let h = channel_normalize(&s, &mv).unwrap();
        assert!((h.data()[0] + 1.0).abs() < 1e-15);
        assert!((h.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_gives_zero_not_nan() {
        let p = params(3, 0.0);
        let s = Tensor4::<f64>::zeros([1, 3, 1, 1]);
        assert!(channel_normalize(&s, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_examples() {
        let x = t([1, 1, 1, 2], vec![1.5, -2.0]);
        let p = params(1, 0.0);
        let s_hat = Tensor4::full([1, 1, 1, 1], 1.0);
        assert_eq!(gate_adapt(&x, &s_hat, &p).unwrap(), x);

        let mut q = p.clone();
        q.gamma = vec![1.0];
        let y = gate_adapt(&Tensor4::full([1, 1, 1, 1], 1.0), &s_hat, &q).unwrap();
        assert!((y.data()[0] - 1.761_594_155_955_764_9).abs() < 1e-15);

        let mut sg = p.clone();
        sg.variant.adaptation = Adaptation::Sigmoid;
        assert_eq!(gate_adapt(&x, &s_hat, &sg).unwrap().data(), &[0.75, -1.0]);
    }

    #[test]
    fn elu_gate_branches() {
        let (g, d) = Adaptation::OnePlusElu.eval(0.5f64);
        assert_eq!((g, d), (1.5, 1.0));
        let (g, d) = Adaptation::OnePlusElu.eval(-1.0f64);
        assert!((g - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(g, d);
    }

    #[test]
    fn single_channel_gate_is_uniform() {
        let x = Tensor4::from_fn([2, 1, 3, 3], |n, _, h, w| (n + h * 3 + w) as f64 - 4.0);
        let mut p = params(1, 0.0);
        p.gamma = vec![0.7];
        p.beta = vec![-0.2];
        let (_, cache) = gct_forward(&x, &p).unwrap();
        for &v in cache.s_hat.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        for &g in cache.gate.data() {
            assert!((g - (1.0 + 0.5f64.tanh())).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_at_zero_gate_weights() {
        let x = Tensor4::from_fn([2, 3, 2, 2], |n, c, h, w| ((n * 7 + c * 5 + h * 3 + w) as f64).sin());
        let g = Tensor4::from_fn([2, 3, 2, 2], |n, c, h, w| ((n + c * 2 + h + w * 3) as f64).cos());
        let p = params(3, 1e-5);
        let (y, cache) = gct_forward(&x, &p).unwrap();
        assert_eq!(y, x);
        let grads = gct_backward(&cache, &g, &p).unwrap();
        assert_eq!(grads.x, g);
        assert!(grads.alpha.iter().all(|&v| v == 0.0));
        for c in 0..3 {
            let want: f64 = (0..2)
                .map(|n| x.plane(n, c).iter().zip(g.plane(n, c)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            assert!((grads.beta[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let x = Tensor4::from_fn([1, 3, 2, 2], |_, c, h, w| (c + h + w) as f64 + 0.5);
        let mut p = params(3, 1e-5);
        p.gamma = vec![0.3, -0.4, 0.9];
        p.beta = vec![0.1, 0.2, -0.3];
        let (_, cache) = gct_forward(&x, &p).unwrap();
        let grads = gct_backward(&cache, &Tensor4::zeros(x.shape()), &p).unwrap();
        assert!(grads.x.data().iter().all(|&v| v == 0.0));
        assert!(grads.alpha.iter().chain(&grads.gamma).chain(&grads.beta).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let x = Tensor4::<f64>::full([1, 2, 2, 2], 1.0);
        let p = params(2, 1e-5);
        let (_, cache) = gct_forward(&x, &p).unwrap();
        let mut q = p.clone();
        q.variant.adaptation = Adaptation::Sigmoid;
        assert!(gct_backward(&cache, &x, &q).is_err());
    }

    #[test]
    fn reference_code_epsilon_matches_mean_formulation() {
        let s = t([1, 3, 1, 1], vec![0.2, 0.5, 0.9]);
        let mut p = params(3, 1e-2);
        p.variant.epsilon_placement = EpsilonPlacement::ReferenceCode;
        let h = channel_normalize(&s, &p).unwrap();
        let mean_sq = (0.04 + 0.25 + 0.81) / 3.0;
        for (i, &v) in [0.2, 0.5, 0.9].iter().enumerate() {
            assert!((h.data()[i] - v / (mean_sq + 1e-2f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn json_roundtrip_has_flat_fields() {
        let mut p = GctParams::<f64>::new(2, GctVariant::default());
        p.gamma = vec![0.25, -0.5];
        let js = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        for key in ["alpha", "gamma", "beta", "epsilon", "embed_norm", "channel_norm", "adaptation"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["adaptation"], "one_plus_tanh");
        assert_eq!(GctParams::<f64>::from_json(&js).unwrap(), p);
        assert!(GctParams::<f64>::from_json(r#"{"alpha":[1],"gamma":[],"beta":[0],"epsilon":1e-5,"embed_norm":"l2","channel_norm":"l2","adaptation":"sigmoid"}"#).is_err());
    }
}
