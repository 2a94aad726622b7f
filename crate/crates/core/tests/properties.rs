mod oracles;

use std::collections::BTreeSet;

use cdds_core::eval::{recall_at, report_from_scores};
use cdds_core::objectives::{modal_term, ModalForm};
use cdds_core::semalign::{sparsify, x_semantic_reference, Axis, TransportPlan};
use cdds_core::{Tape, Tensor};
use oracles::{sparsify_case, transport_case};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn distinct(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-100_000i32..100_000, 1..=max_len)
        .prop_map(|s: BTreeSet<i32>| s.into_iter().map(|v| v as f64 / 1000.0).collect())
        .prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn transport_matches_brute_force(src in distinct(64), tgt in distinct(64), extra in prop::collection::vec(-120.0f64..120.0, 0..16)) {
        prop_assert_eq!(transport_case(&src, &tgt, &extra), Ok(()));
    }
}

fn score_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..=16).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(1e-3f64..1.0, d), d),
            prop::collection::vec(-2.0f64..2.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sparsify_matches_brute_force((rows, alpha) in score_matrix(), tie_row in any::<prop::sample::Index>()) {
        let tie = tie_row.index(rows.len());
        prop_assert_eq!(sparsify_case(&rows, &alpha, tie), Ok(()));
    }

    #[test]
    fn column_axis_is_row_axis_transposed((rows, alpha) in score_matrix()) {
        let s = Tensor::from_rows(&rows).unwrap();
        let col = sparsify(&s, &alpha, Axis::Column).unwrap();
        let row = sparsify(&s.transpose().unwrap(), &alpha, Axis::Row).unwrap();
        prop_assert_eq!(col.mask, row.mask.transpose().unwrap());
        prop_assert_eq!(col.weights, row.weights.transpose().unwrap());
        prop_assert_eq!(col.thresholds, row.thresholds);
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn modal_loss_ignores_row_order(seed in any::<u64>(), r in 2usize..10, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, r, d);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.shuffle(&mut rng);
        for form in [ModalForm::Consistency, ModalForm::Literal] {
            let mut tape = Tape::new();
            let a = tape.constant(m.clone());
            let la = modal_term(&mut tape, a, form).unwrap();
            let b = tape.constant(permute_rows(&m, &perm));
            let lb = modal_term(&mut tape, b, form).unwrap();
            let (la, lb) = (tape.value(la).item().unwrap(), tape.value(lb).item().unwrap());
            prop_assert!((la - lb).abs() <= 1e-10 * la.abs().max(1.0));
        }
    }

    #[test]
    fn x_semantics_follow_row_order(seed in any::<u64>(), items in 1usize..4, gs in 1usize..5, gt in 1usize..5, d in 1usize..5, pooled in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = random_matrix(&mut rng, items * gs, d);
        let target = random_matrix(&mut rng, items * gt, d);
        let weights = Tensor::matrix(d, d, (0..d * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let mut pairing: Vec<usize> = (0..items).collect();
        pairing.shuffle(&mut rng);
        let plan = TransportPlan { group_s: gs, group_t: gt, pairing, pooled_source: pooled };
        let base = x_semantic_reference(&source, &target, &weights, &plan).unwrap();

        // Shuffling rows inside each item moves outputs with their sources.
        let within = |g: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..items).flat_map(|k| {
                let mut p: Vec<usize> = (k * g..(k + 1) * g).collect();
                p.shuffle(rng);
                p
            }).collect()
        };
        let ps = within(gs, &mut rng);
        let moved = x_semantic_reference(&permute_rows(&source, &ps), &target, &weights, &plan).unwrap();
        prop_assert!(moved.max_abs_diff(&permute_rows(&base, &ps)).unwrap() <= 1e-12);

        // Target row order carries no information.
        let pt = within(gt, &mut rng);
        let same = x_semantic_reference(&source, &permute_rows(&target, &pt), &weights, &plan).unwrap();
        prop_assert!(same.max_abs_diff(&base).unwrap() <= 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random_matrix(&mut rng, n, n);
        let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i)).collect();
        let report = report_from_scores(&scores, &pairs).unwrap();
        for dir in [report.image_to_text, report.text_to_image] {
            let [r1, r5, r10] = dir.values();
            prop_assert!(0.0 <= r1 && r1 <= r5 && r5 <= r10 && r10 <= 100.0);
        }
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let curve: Vec<f64> = (1..=n + 1).map(|k| recall_at(&ranks, k)).collect();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.last().unwrap(), 100.0);
    }
}

#[test]
fn random_scores_give_chance_recall() {
    // 20 draws of a 100 x 100 matrix: 2000 queries per direction at p = 1%.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (trials, n) = (20, 100);
    let pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, i)).collect();
    let (mut i2t, mut t2i) = (0.0, 0.0);
    for _ in 0..trials {
        let r = report_from_scores(&random_matrix(&mut rng, n, n), &pairs).unwrap();
        i2t += r.image_to_text.r1 / trials as f64;
        t2i += r.text_to_image.r1 / trials as f64;
    }
    let queries = (trials * n) as f64;
    let sigma = 100.0 * (0.01 * 0.99 / queries).sqrt();
    for r1 in [i2t, t2i] {
        assert!((r1 - 1.0).abs() <= 3.0 * sigma, "R@1 {r1} vs 1% ± {}", 3.0 * sigma);
    }
}
