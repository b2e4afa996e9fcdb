use proptest::prelude::*;
use sinklab_core::analysis::{alpha_scores, sink_metric};
use sinklab_core::attention::{build_masks, MaskKind};
use sinklab_core::data::{pack, BosPolicy, Vocab};
use sinklab_core::positional::{rotary_rotate, t5_bucket};
use sinklab_core::tensor::softmax_rows;
use sinklab_core::Tensor;

fn mask_kind(t: usize) -> impl Strategy<Value = MaskKind> {
    prop_oneof![
        Just(MaskKind::Causal),
        (1..t, any::<bool>()).prop_map(|(p, bidirectional)| MaskKind::Prefix { p, bidirectional }),
        (1..=t).prop_map(|w| MaskKind::Window { w }),
    ]
}

fn row_stochastic(t: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-4.0f64..4.0, t * t).prop_map(move |raw| {
        let logits = Tensor::matrix(t, t, raw).unwrap();
        let masks = build_masks::<f64>(MaskKind::Causal, t, 0);
        softmax_rows(&logits, Some(&masks.additive)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(t in 1usize..12, raw in prop::collection::vec(-50.0f64..50.0, 144)) {
        let x = Tensor::matrix(t, t, raw[..t * t].to_vec()).unwrap();
        let masks = build_masks::<f64>(MaskKind::Causal, t, 0);
        let p = softmax_rows(&x, Some(&masks.additive)).unwrap();
        for i in 0..t {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masks_match_the_predicate(t in 2usize..16, pick in 0usize..1000) {
        let kinds = [
            MaskKind::Causal,
            MaskKind::prefix(1 + pick % (t - 1)),
            MaskKind::Prefix { p: 1 + pick % (t - 1), bidirectional: false },
            MaskKind::Window { w: 1 + pick % t },
        ];
        for kind in kinds {
            let m = build_masks::<f64>(kind, t, 1);
            for i in 0..t {
                prop_assert_eq!(m.binary.get(i, 0), 1.0);
                prop_assert_eq!(m.binary.get(i, 1 + i), 1.0);
                for j in 0..t {
                    let allowed = kind.allows(i + 1, j + 1);
                    prop_assert_eq!(m.binary.get(i, j + 1) == 1.0, allowed);
                    prop_assert_eq!(m.additive.get(i, j + 1) == 0.0, allowed);
                }
            }
        }
    }

    #[test]
    fn window_and_causal_agree_for_full_windows(kind in (2usize..20).prop_flat_map(mask_kind), i in 1usize..20, j in 1usize..20) {
        if let MaskKind::Window { w } = kind {
            if w >= i {
                prop_assert_eq!(kind.allows(i, j), MaskKind::Causal.allows(i, j));
            }
        }
        if j > i && !matches!(kind, MaskKind::Prefix { bidirectional: true, .. }) {
            prop_assert!(!kind.allows(i, j));
        }
    }

    #[test]
    fn packing_conserves_tokens(
        docs in prop::collection::vec(prop::collection::vec(0usize..13, 0..40), 1..8),
        context in 2usize..20,
        with_bos in any::<bool>(),
    ) {
        prop_assume!(docs.iter().any(|d| !d.is_empty()));
        let vocab = Vocab::new(16).unwrap();
        let bos = if with_bos { BosPolicy::WithBos } else { BosPolicy::WithoutBos };
        let s = pack(&docs, context, bos, vocab).unwrap();
        let total: usize = docs.iter().map(|d| d.len() + 1 + with_bos as usize).sum();
        prop_assert_eq!(s.len() * context + s.dropped, total);
        prop_assert!(s.dropped < context);
        prop_assert!(s.chunks.iter().all(|c| c.len() == context));
        let eos = s.chunks.iter().flatten().filter(|&&t| t == vocab.eos()).count();
        prop_assert!(eos <= docs.len());
    }

    #[test]
    fn alpha_scores_are_fractions(p in (2usize..10).prop_flat_map(row_stochastic), eps in 0.01f64..0.99) {
        let t = p.rows();
        let stack = p.reshape(vec![1, 1, t, t]).unwrap();
        for k in 1..=t {
            let a = alpha_scores(&stack, k).unwrap()[0][0];
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
            let s = sink_metric(&stack, k, eps).unwrap();
            prop_assert!(s == 0.0 || s == 1.0);
            prop_assert_eq!(s == 1.0, a > eps);
        }
    }

    #[test]
    fn rotation_preserves_norm_and_inverts(v in prop::collection::vec(-3.0f64..3.0, 1..9), t in -200i64..200) {
        let mut v = v;
        if v.len() % 2 == 1 { v.push(0.5); }
        let r = rotary_rotate(&v, t).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum();
        let n1: f64 = r.iter().map(|x| x * x).sum();
        prop_assert!((n0 - n1).abs() < 1e-9);
        let back = rotary_rotate(&r, -t).unwrap();
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn buckets_are_monotone_and_bounded(d in 0usize..2000, b in 2usize..64, m in 2usize..512) {
        let lo = t5_bucket(d, b, m);
        prop_assert!(lo < b);
        prop_assert!(t5_bucket(d + 1, b, m) >= lo);
    }
}
