use peswap::model::{parameter_shapes, DecodeConfig, ModelConfig, NormOrder, TransformerModel};
use peswap::numerics::{RngStream, Tensor};
use peswap::positional::PEKind;
use proptest::prelude::*;

fn small(pe: PEKind) -> TransformerModel<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        ffn_dim: 32,
        ..ModelConfig::toy(20, 20, pe)
    };
    TransformerModel::new(cfg, &mut RngStream::named(21, "init")).unwrap()
}

fn pe_strategy() -> impl Strategy<Value = PEKind> {
    prop::sample::select(PEKind::ALL.to_vec())
}

fn tokens(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..20, len)
}

fn row(t: &Tensor<f64>, b: usize, pos: usize) -> &[f64] {
    let (l, v) = (t.shape()[1], t.shape()[2]);
    &t.data()[(b * l + pos) * v..(b * l + pos + 1) * v]
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoder_is_causal(pe in pe_strategy(), src in tokens(1..8), tgt in tokens(2..8), cut in 0usize..6, fresh in 4usize..20) {
        let m = small(pe);
        let cut = cut % (tgt.len() - 1);
        let mut changed = tgt.clone();
        changed[cut + 1] = fresh;
        let a = m.forward_teacher_forced(&[src.clone()], &[tgt.clone()]).unwrap();
        let b = m.forward_teacher_forced(&[src], &[changed]).unwrap();
        for pos in 0..=cut {
            prop_assert!(max_gap(row(&a, 0, pos), row(&b, 0, pos)) < 1e-12);
        }
    }

    #[test]
    fn padding_does_not_leak(pe in pe_strategy(), s1 in tokens(1..6), s2 in tokens(6..10), t1 in tokens(1..4), t2 in tokens(4..8)) {
        let m = small(pe);
        let alone = m.forward_teacher_forced(&[s1.clone()], &[t1.clone()]).unwrap();
        let batched = m.forward_teacher_forced(&[s1, s2], &[t1.clone(), t2]).unwrap();
        for pos in 0..t1.len() {
            prop_assert!(max_gap(row(&alone, 0, pos), row(&batched, 0, pos)) < 1e-10);
        }
    }

    #[test]
    fn nope_encoder_is_permutation_equivariant(src in tokens(2..9), seed in any::<u64>()) {
        let m = small(PEKind::Nope);
        let mut perm: Vec<usize> = (0..src.len()).collect();
        let mut rng = RngStream::named(seed, "perm");
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permuted: Vec<usize> = perm.iter().map(|&i| src[i]).collect();
        let a = m.encode(&[src]).unwrap();
        let b = m.encode(&[permuted]).unwrap();
        let d = a.states.last_dim();
        for (j, &i) in perm.iter().enumerate() {
            let x = &a.states.data()[i * d..(i + 1) * d];
            let y = &b.states.data()[j * d..(j + 1) * d];
            prop_assert!(max_gap(x, y) < 1e-10);
        }
    }

    #[test]
    fn parameter_count_matches_enumeration(
        d_heads in 1usize..4, heads in 1usize..4, ffn in 1usize..40, enc in 0usize..3, dec in 1usize..3,
        vocab in 5usize..30, bias in any::<bool>(), pre in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            d_model: 2 * d_heads * heads,
            n_heads: heads,
            ffn_dim: ffn,
            enc_layers: enc,
            dec_layers: dec,
            proj_bias: bias,
            norm_order: if pre { NormOrder::Pre } else { NormOrder::Post },
            ..ModelConfig::toy(vocab, vocab + 1, PEKind::Rope)
        };
        let m = TransformerModel::<f32>::new(cfg.clone(), &mut RngStream::named(1, "init")).unwrap();
        let enumerated: usize = m.params().iter().map(|(_, p)| p.value.numel()).sum();
        let listed: usize = parameter_shapes(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        prop_assert_eq!(enumerated, cfg.param_count());
        prop_assert_eq!(listed, cfg.param_count());
        prop_assert_eq!(m.count_params(false), cfg.param_count());
    }

    #[test]
    fn beam_of_one_is_greedy(pe in pe_strategy(), src in tokens(1..8)) {
        let m = small(pe);
        let cfg = DecodeConfig::with_beam(1);
        let mut src = src;
        src.push(2);
        prop_assert_eq!(m.greedy_decode(&src, &cfg).unwrap(), m.beam_search(&src, &cfg).unwrap());
    }
}

#[test]
fn toy_parameter_count_by_hand() {
    // 2+2 layers, d=64, ffn 256, shared output projection, biases on.
    let d = 64;
    let attn = 4 * (d * d + d);
    let ffn = (d * 256 + 256) + (256 * d + d);
    let enc = attn + ffn + 2 * 2 * d;
    let dec = 2 * attn + ffn + 3 * 2 * d;
    let expected = 2 * 200 * d + 2 * enc + 2 * dec + 2 * 2 * d;
    assert_eq!(ModelConfig::toy(200, 200, PEKind::Sine).param_count(), expected);
}

#[test]
fn swap_keeps_weights_and_changes_behaviour() {
    let base = small(PEKind::Sine);
    let src = vec![vec![5, 6, 7, 8, 2]];
    let tgt = vec![vec![1, 9, 10]];
    let reference = base.forward_teacher_forced(&src, &tgt).unwrap();
    for pe in [PEKind::Rope, PEKind::Alibi, PEKind::Nope] {
        let mut m = base.clone();
        m.swap_pe(pe).unwrap();
        for ((_, a), (_, b)) in base.params().iter().zip(m.params().iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert!(reference.max_abs_diff(&m.forward_teacher_forced(&src, &tgt).unwrap()) > 1e-6);
    }
}
