use std::collections::BTreeSet;

use proptest::prelude::*;

use relpos::corpus::{batch_indices, decode, encode, pack_sequences, Vocab};
use relpos::eval::label_density;
use relpos::objectives::{
    rel_pos_labels, sample_corruption, select_pairs, selected_count, CorruptionMode, Objective, ObjectiveError,
};
use relpos::tensor::{softmax_rows, Graph, Tensor};

fn objective() -> impl Strategy<Value = Objective> {
    prop::sample::select(Objective::ALL.to_vec())
}

fn rate() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(1.0), 0.0..=1.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn permutation_is_a_bijection_on_the_selection(k in 1usize..=16, r in rate(), seed in any::<u64>()) {
        let plan = sample_corruption(k, r, CorruptionMode::Permute, seed);
        prop_assert_eq!(plan.selected.len(), selected_count(k, r));
        let mut image: Vec<usize> = plan.selected.iter().map(|&t| plan.pi[t]).collect();
        image.sort_unstable();
        prop_assert_eq!(&image, &plan.selected);
        for t in 0..k {
            if !plan.is_selected(t) {
                prop_assert_eq!(plan.pi[t], t);
            }
        }
    }

    #[test]
    fn labels_are_antisymmetric_with_zero_diagonal(k in 1usize..=16, r in rate(), seed in any::<u64>()) {
        let plan = sample_corruption(k, r, CorruptionMode::Permute, seed);
        let l = rel_pos_labels(k, 16, &plan).unwrap();
        for i in 0..k {
            prop_assert_eq!(l.offset(i, i), 0);
            prop_assert_eq!(l.class(i, i), 15);
            for j in 0..k {
                prop_assert_eq!(l.offset(i, j), -l.offset(j, i));
                prop_assert_eq!(l.class(i, j) + l.class(j, i), 2 * 15);
            }
        }
    }

    #[test]
    fn binary_labels_follow_the_presented_offset(k in 1usize..=16, r in rate(), seed in any::<u64>()) {
        let plan = sample_corruption(k, r, CorruptionMode::Permute, seed);
        let l = rel_pos_labels(k, k, &plan).unwrap();
        for i in 0..k {
            for j in 0..k {
                let presented = plan.pi[i] as i64 - plan.pi[j] as i64;
                let want = (presented == i as i64 - j as i64) as u8;
                prop_assert_eq!(l.correct(i, j), want);
                if !plan.is_selected(i) && !plan.is_selected(j) {
                    prop_assert_eq!(l.correct(i, j), 1);
                }
            }
        }
    }

    #[test]
    fn pair_sets_nest(k in 1usize..=16, r in rate(), seed in any::<u64>()) {
        let plan = sample_corruption(k, r, CorruptionMode::Permute, seed);
        let all: BTreeSet<usize> = select_pairs(&plan, Objective::Pplm).unwrap().into_iter().collect();
        prop_assert_eq!(all.len(), k * k);
        match select_pairs(&plan, Objective::PplmSome) {
            Ok(some) => {
                prop_assert!(some.iter().all(|p| all.contains(p)));
                prop_assert_eq!(some.len(), plan.selected.len().pow(2));
            }
            Err(ObjectiveError::SkipBatch) => prop_assert!(plan.selected.is_empty()),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn density_matches_selected_pairs(k in 1usize..=16, o in objective(), r in rate(), seed in any::<u64>()) {
        let plan = sample_corruption(k, r, o.corruption_mode(), seed);
        let counted = match o {
            Objective::Mlm => plan.token_mask_targets.len(),
            _ => select_pairs(&plan, o).map(|p| p.len()).unwrap_or(0),
        };
        prop_assert_eq!(counted, label_density(k, o, r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..40, seed in any::<u64>()) {
        let mut x: Vec<f64> = (0..rows * cols)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 40) as f64) / 1e5 - 50.0)
            .collect();
        softmax_rows(&mut x, cols);
        for row in x.chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(n in 1usize..5, c in 2usize..20, shift in -30.0f64..30.0) {
        let data: Vec<f64> = (0..n * c).map(|i| (i as f64 * 0.37).sin() * 5.0 + shift).collect();
        let targets: Vec<usize> = (0..n).map(|i| (i * 7) % c).collect();
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![n, c], data).unwrap());
        let loss = g.cross_entropy(l, &targets).unwrap();
        prop_assert!(g.value(loss).item() >= 0.0);
    }

    #[test]
    fn batches_depend_only_on_their_inputs(n in 1usize..200, bs in 1usize..32, seed in any::<u64>(), step in 0u64..1000) {
        prop_assume!(bs <= n);
        let a = batch_indices(n, bs, seed, step).unwrap();
        prop_assert_eq!(&a, &batch_indices(n, bs, seed, step).unwrap());
        prop_assert!(a.iter().all(|&i| i < n));
    }

    #[test]
    fn packing_keeps_whole_windows(len in 0usize..500, k in 2usize..64) {
        let stream: Vec<u32> = (0..len as u32).collect();
        let packed = pack_sequences(&stream, k);
        prop_assert_eq!(packed.len(), len / k);
        prop_assert!(packed.iter().all(|s| s.len() == k));
        prop_assert_eq!(packed.concat(), stream[..len / k * k].to_vec());
    }

    #[test]
    fn encode_decode_roundtrips_known_words(words in prop::collection::vec("[a-e]{1,3}", 1..30)) {
        let text = words.join(" ");
        let vocab = Vocab::from_documents([text.as_str()], 1000, 1).unwrap();
        prop_assert_eq!(decode(&encode(&text, &vocab), &vocab), text);
    }
}
