use gct_core::gct::{
    channel_normalize, embed, gct_backward, gct_forward, Adaptation, ChannelNorm, EmbedNorm, GctParams, GctVariant,
};
use gct_core::Tensor4;
use proptest::prelude::*;

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::new(shape, data).unwrap()
}

/// Shape up to `max` plus matching data in [-range, range].
fn shaped(max: [usize; 4], range: f64) -> impl Strategy<Value = ([usize; 4], Vec<f64>)> {
    (1..=max[0], 1..=max[1], 1..=max[2], 1..=max[3]).prop_flat_map(move |(n, c, h, w)| {
        let shape = [n, c, h, w];
        (Just(shape), prop::collection::vec(-range..range, n * c * h * w))
    })
}

fn variant_strategy() -> impl Strategy<Value = GctVariant> {
    (
        prop::sample::select(EmbedNorm::ALL.to_vec()),
        prop::sample::select(ChannelNorm::ALL.to_vec()),
        prop::sample::select(Adaptation::ALL.to_vec()),
    )
        .prop_map(|(embed_norm, channel_norm, adaptation)| GctVariant {
            embed_norm,
            channel_norm,
            adaptation,
            ..GctVariant::default()
        })
}

fn zero_eps(v: GctVariant) -> GctVariant {
    GctVariant { epsilon: 0.0, ..v }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fresh_params_are_identity((shape, data) in shaped([4, 32, 16, 16], 1e3)) {
        let x = tensor(shape, data);
        let p = GctParams::new(shape[1], GctVariant::default());
        let (y, _) = gct_forward(&x, &p).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let x32 = x.cast::<f32>();
        let (y32, _) = gct_forward(&x32, &GctParams::new(shape[1], GctVariant::default())).unwrap();
        prop_assert!(y32.data().iter().zip(x32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_stay_in_range(
        (shape, data) in shaped([3, 8, 4, 4], 10.0),
        variant in variant_strategy(),
        alpha in prop::collection::vec(-2.0..2.0f64, 8),
        gamma in prop::collection::vec(-2.0..2.0f64, 8),
        beta in prop::collection::vec(-2.0..2.0f64, 8),
    ) {
        let c = shape[1];
        let p = GctParams { alpha: alpha[..c].to_vec(), gamma: gamma[..c].to_vec(), beta: beta[..c].to_vec(), variant };
        let (_, cache) = gct_forward(&tensor(shape, data), &p).unwrap();
        for &g in cache.gate.data() {
            match variant.adaptation {
                Adaptation::OnePlusTanh => prop_assert!(g > 0.0 && g < 2.0),
                Adaptation::Sigmoid => prop_assert!(g > 0.0 && g < 1.0),
                Adaptation::OnePlusElu => prop_assert!(g > 0.0),
            }
        }
    }

    #[test]
    fn l2_normalized_embedding_has_squared_sum_c(
        (shape, data) in shaped([3, 16, 4, 4], 5.0),
        embed_norm in prop::sample::select(EmbedNorm::ALL.to_vec()),
    ) {
        prop_assume!(data.iter().any(|&v| v != 0.0));
        let variant = zero_eps(GctVariant { embed_norm, ..GctVariant::default() });
        let p = GctParams::new(shape[1], variant);
        let x = tensor(shape, data);
        let s_hat = channel_normalize(&embed(&x, &p).unwrap(), &p).unwrap();
        let c = shape[1] as f64;
        for (n, row) in s_hat.data().chunks(shape[1]).enumerate() {
            if x.sample(n).iter().all(|&v| v == 0.0) {
                continue;
            }
            let sum: f64 = row.iter().map(|v| v * v).sum();
            prop_assert!((sum - c).abs() / c < 1e-10, "sum {} vs {}", sum, c);
        }
    }

    #[test]
    fn gate_is_invariant_to_positive_input_scaling(
        (shape, data) in shaped([3, 8, 4, 4], 5.0),
        variant in variant_strategy(),
        k in 0.01..100.0f64,
        alpha in prop::collection::vec(0.1..2.0f64, 8),
        gamma in prop::collection::vec(-2.0..2.0f64, 8),
        beta in prop::collection::vec(-2.0..2.0f64, 8),
    ) {
        let c = shape[1];
        prop_assume!(data.iter().all(|&v| v.abs() > 1e-3));
        let p = GctParams {
            alpha: alpha[..c].to_vec(),
            gamma: gamma[..c].to_vec(),
            beta: beta[..c].to_vec(),
            variant: zero_eps(variant),
        };
        let x = tensor(shape, data);
        let (y, a) = gct_forward(&x, &p).unwrap();
        let (ky, b) = gct_forward(&x.scale(k), &p).unwrap();
        for (g1, g2) in a.gate.data().iter().zip(b.gate.data()) {
            prop_assert!((g1 - g2).abs() <= 1e-12 * g1.abs().max(g2.abs()), "{} vs {}", g1, g2);
        }
        for (u, v) in y.data().iter().zip(ky.data()) {
            prop_assert!((k * u - v).abs() <= 1e-12 * v.abs().max((k * u).abs()));
        }
    }

    #[test]
    fn channel_permutation_is_equivariant(
        (shape, data) in shaped([3, 8, 4, 4], 5.0),
        variant in variant_strategy(),
        alpha in prop::collection::vec(0.1..2.0f64, 8),
        gamma in prop::collection::vec(-2.0..2.0f64, 8),
        beta in prop::collection::vec(-2.0..2.0f64, 8),
        perm_seed in any::<u64>(),
    ) {
        let c = shape[1];
        let mut perm: Vec<usize> = (0..c).collect();
        let mut state = perm_seed;
        for i in (1..c).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let p = GctParams { alpha: alpha[..c].to_vec(), gamma: gamma[..c].to_vec(), beta: beta[..c].to_vec(), variant };
        let q = GctParams {
            alpha: perm.iter().map(|&i| p.alpha[i]).collect(),
            gamma: perm.iter().map(|&i| p.gamma[i]).collect(),
            beta: perm.iter().map(|&i| p.beta[i]).collect(),
            variant,
        };
        let x = tensor(shape, data);
        let (y, _) = gct_forward(&x, &p).unwrap();
        let (yp, _) = gct_forward(&x.permute_channels(&perm).unwrap(), &q).unwrap();
        let want = y.permute_channels(&perm).unwrap();
        prop_assert!(yp.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_alpha_channel_ignores_its_content(
        (shape, data) in shaped([2, 6, 3, 3], 5.0),
        replacement in prop::collection::vec(-5.0..5.0f64, 9),
        gamma in prop::collection::vec(0.5..2.0f64, 6),
        beta in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        let c = shape[1];
        let mut p = GctParams::new(c, zero_eps(GctVariant::default()));
        p.gamma = gamma[..c].to_vec();
        p.beta = beta[..c].to_vec();
        p.alpha[0] = 0.0;
        let x = tensor(shape, data);
        let mut x2 = x.clone();
        let hw = shape[2] * shape[3];
        for n in 0..shape[0] {
            x2.plane_mut(n, 0).copy_from_slice(&replacement[..hw]);
        }
        let (_, a) = gct_forward(&x, &p).unwrap();
        let (_, b) = gct_forward(&x2, &p).unwrap();
        prop_assert_eq!(a.gate.data(), b.gate.data());
        for n in 0..shape[0] {
            prop_assert_eq!(a.s_hat.data()[n * c], 0.0);
            prop_assert_eq!(a.gate.data()[n * c], 1.0 + p.beta[0].tanh());
        }
    }

    #[test]
    fn l2_embedding_has_epsilon_floor(
        (shape, data) in shaped([2, 6, 3, 3], 5.0),
        alpha in prop::collection::vec(0.0..2.0f64, 6),
    ) {
        let mut p = GctParams::new(shape[1], GctVariant::default());
        p.alpha = alpha[..shape[1]].to_vec();
        let s = embed(&tensor(shape, data), &p).unwrap();
        for (i, &v) in s.data().iter().enumerate() {
            prop_assert!(v >= p.alpha[i % shape[1]] * 1e-5f64.sqrt());
        }
    }

    #[test]
    fn backward_at_zero_gamma_beta_is_simple(
        (shape, data) in shaped([2, 5, 3, 3], 5.0),
        grad in prop::collection::vec(-1.0..1.0f64, 2 * 5 * 3 * 3),
        alpha in prop::collection::vec(0.1..2.0f64, 5),
    ) {
        let mut p = GctParams::new(shape[1], GctVariant::default());
        p.alpha = alpha[..shape[1]].to_vec();
        let x = tensor(shape, data);
        let g = tensor(shape, grad[..x.len()].to_vec());
        let (_, cache) = gct_forward(&x, &p).unwrap();
        let grads = gct_backward(&cache, &g, &p).unwrap();
        prop_assert_eq!(grads.x.data(), g.data());
        prop_assert!(grads.alpha.iter().all(|&v| v == 0.0));
        for ch in 0..shape[1] {
            let mut want = 0.0;
            for n in 0..shape[0] {
                want += x.plane(n, ch).iter().zip(g.plane(n, ch)).map(|(a, b)| a * b).sum::<f64>();
            }
            prop_assert!((grads.beta[ch] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        let zero = Tensor4::zeros(shape);
        let z = gct_backward(&cache, &zero, &p).unwrap();
        prop_assert!(z.x.data().iter().chain(&z.alpha).chain(&z.gamma).chain(&z.beta).all(|&v| v == 0.0));
    }
}
