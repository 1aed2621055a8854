//! Randomized invariants of the metric, the losses and the attention blocks.

mod common;

use common::threshold_oracle;
use msbt::attention::{transformer_layer, TransformerLayerParams, LAYERNORM_EPS};
use msbt::autodiff::{layernorm, Graph, ParamStore, Scope};
use msbt::eval::average_precision;
use msbt::losses::{mil_topk_loss, tcc_loss};
use msbt::tensor::Tensor;
use num_rational::Rational64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores_and_labels(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("needs a positive", |(_, l)| l.iter().any(|&b| b))
    })
}

#[test]
fn ap_matches_oracle_exhaustively_for_small_inputs() {
    // Every label pattern for every length up to 12, under distinct, partly tied
    // and fully tied scores.
    for n in 1..=12usize {
        let patterns: [Vec<f64>; 3] = [
            (0..n).map(|i| ((i * 5) % n) as f64).collect(),
            (0..n).map(|i| ((i * 7) % 4) as f64).collect(),
            vec![0.5; n],
        ];
        for scores in &patterns {
            for mask in 1u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let exact: Rational64 = average_precision(scores, &labels).unwrap();
                assert_eq!(exact, threshold_oracle(scores, &labels), "{scores:?} {labels:?}");
            }
        }
    }
}

#[test]
fn ap_hand_values() {
    let exact: Rational64 = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
    assert_eq!(exact, Rational64::new(5, 6));
    for n in 2..=12i64 {
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut labels = vec![false; n as usize];
        labels[0] = true;
        let exact: Rational64 = average_precision(&scores, &labels).unwrap();
        assert_eq!(exact, Rational64::new(1, n));
    }
    let perfect: Rational64 = average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
    assert_eq!(perfect, Rational64::from_integer(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ap_matches_threshold_oracle((scores, labels) in scores_and_labels(12)) {
        let exact: Rational64 = average_precision(&scores, &labels).unwrap();
        prop_assert_eq!(exact, threshold_oracle(&scores, &labels));
        let float: f64 = average_precision(&scores, &labels).unwrap();
        prop_assert!((float - *exact.numer() as f64 / *exact.denom() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&float));
    }

    #[test]
    fn ap_invariant_under_monotone_maps((scores, labels) in scores_and_labels(12)) {
        let base: Rational64 = average_precision(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let cube: Vec<f64> = scores.iter().map(|s| (s - 0.5).powi(3)).collect();
        prop_assert_eq!(average_precision::<Rational64>(&exp, &labels).unwrap(), base);
        prop_assert_eq!(average_precision::<Rational64>(&cube, &labels).unwrap(), base);
    }

    #[test]
    fn ap_ignores_item_order((scores, labels) in scores_and_labels(12), rot in 0usize..12) {
        let n = scores.len();
        let idx: Vec<usize> = (0..n).map(|i| (i * 5 + rot) % n).collect();
        prop_assume!({ let mut s = idx.clone(); s.sort(); s.dedup(); s.len() == n });
        let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l2: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(
            average_precision::<Rational64>(&s2, &l2).unwrap(),
            average_precision::<Rational64>(&scores, &labels).unwrap()
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![3, 5], 0.0, 3.0, &mut rng);
        let g = Graph::new();
        let y = g.constant(x.clone()).softmax_rows().value();
        for r in 0..3 {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ys = g.constant(x.map(|v| v + shift)).softmax_rows().value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_standardizes_rows(seed in 0u64..1000, scale in 0.5f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![4, 8], 1.0, scale, &mut rng);
        let g = Graph::new();
        let y = layernorm(
            g.constant(x),
            g.constant(Tensor::ones(vec![8])),
            g.constant(Tensor::zeros(vec![8])),
            LAYERNORM_EPS,
        )
        .unwrap()
        .value();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn tcc_is_non_negative(seed in 0u64..1000, t in 1usize..7, pairs in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let zs: Vec<_> = (0..pairs)
            .map(|_| g.constant(Tensor::<f64>::randn(vec![t, 4], 0.0, 1.0, &mut rng)))
            .collect();
        prop_assert!(tcc_loss(&zs, 0.5).unwrap().value().item() >= 0.0);
    }

    #[test]
    fn tcc_ignores_positive_rescaling(seed in 0u64..1000, a in 0.1f64..10.0, b in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let x = Tensor::<f64>::randn(vec![5, 4], 0.0, 1.0, &mut rng);
        let y = Tensor::<f64>::randn(vec![5, 4], 0.0, 1.0, &mut rng);
        let base = tcc_loss(&[g.constant(x.clone()), g.constant(y.clone())], 0.5).unwrap().value().item();
        let scaled = tcc_loss(&[g.constant(x.map(|v| v * a)), g.constant(y.map(|v| v * b))], 0.5)
            .unwrap()
            .value()
            .item();
        prop_assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn mil_is_order_free_and_matches_bce_at_full_k(seed in 0u64..1000, t in 1usize..12, label in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::<f64>::uniform(vec![t], 1.0, &mut rng).map(|v| 0.5 + 0.49 * v);
        let g = Graph::new();
        let loss = mil_topk_loss(g.constant(s.clone()), label, t).unwrap().value().item();
        let mean = s.data().iter().sum::<f64>() / t as f64;
        let bce = if label { -mean.ln() } else { -(1.0 - mean).ln() };
        prop_assert!((loss - bce).abs() < 1e-12);
        let perm: Vec<usize> = (0..t).rev().collect();
        let k = t.div_ceil(2);
        let a = mil_topk_loss(g.constant(s.clone()), label, k).unwrap().value().item();
        let b = mil_topk_loss(g.constant(s.permute_rows(&perm)), label, k).unwrap().value().item();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn transformer_layer_is_permutation_equivariant(seed in 0u64..200, shift in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = TransformerLayerParams::init(&mut store, "layer", 8, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(vec![6, 8], 0.0, 1.0, &mut rng);
        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let g = Graph::new();
        let scope = Scope::new(&g, &store);
        let y = transformer_layer(&scope, scope.constant(x.clone()), &p).unwrap().value();
        let yp = transformer_layer(&scope, scope.constant(x.permute_rows(&perm)), &p).unwrap().value();
        for (a, b) in y.permute_rows(&perm).data().iter().zip(yp.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
