//! Property tests for the perturbation algebra, the vocabulary and span decoding.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tavat::metrics::bio_spans;
use tavat::tensor::Tensor;
use tavat::vat::{
    frobenius, instance_step, project_frobenius, scaling_index, token_step, ScalingSource,
    VocabPolicy,
};
use tavat::vocab::{PerturbationVocabulary, VocabMeta};

/// A padded sequence: (dim, mask, eta, grad). At least one position is kept.
fn sequence() -> impl Strategy<Value = (usize, Vec<bool>, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(dim, len)| {
        (
            Just(dim),
            prop::collection::vec(any::<bool>(), len),
            prop::collection::vec(-3.0..3.0f64, len * dim),
            prop::collection::vec(-3.0..3.0f64, len * dim),
            0..len,
        )
            .prop_map(|(dim, mut mask, mut eta, mut grad, anchor)| {
                mask[anchor] = true;
                for (i, (e, g)) in eta.iter_mut().zip(grad.iter_mut()).enumerate() {
                    if !mask[i / dim] {
                        *e = 0.0;
                        *g = 0.0;
                    }
                }
                (dim, mask, eta, grad)
            })
    })
}

fn padded_rows_zero(p: &[f64], mask: &[bool], dim: usize) -> bool {
    p.chunks(dim)
        .zip(mask)
        .all(|(row, &m)| m || row.iter().all(|&v| v == 0.0))
}

proptest! {
    #[test]
    fn projection_bounds_and_is_idempotent(p in prop::collection::vec(-10.0..10.0f64, 1..40), eps in 1e-3..5.0f64) {
        let once = project_frobenius(&p, eps);
        prop_assert!(frobenius(&once) <= eps + 1e-9);
        prop_assert_eq!(project_frobenius(&once, eps), once.clone());
        if frobenius(&p) <= eps {
            prop_assert_eq!(once, p);
        }
    }

    #[test]
    fn scaling_index_in_unit_range_with_unit_max((dim, mask, eta, _) in sequence(), c in 1e-3..1e3f64) {
        let n = scaling_index(&eta, &mask, dim).unwrap();
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(n.iter().zip(&mask).all(|(&v, &m)| m || v == 0.0));
        let max = n.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(max, 1.0);
        let scaled: Vec<f64> = eta.iter().map(|v| v * c).collect();
        let ns = scaling_index(&scaled, &mask, dim).unwrap();
        for (a, b) in n.iter().zip(&ns) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn steps_stay_in_ball_and_off_padding(
        (dim, mask, eta, grad) in sequence(),
        alpha in 0.01..2.0f64,
        eps in 0.05..3.0f64,
        token_norm in any::<bool>(),
        post in any::<bool>(),
    ) {
        let start = project_frobenius(&eta, eps);
        let source = if post { ScalingSource::PostAscent } else { ScalingSource::PreStep };
        let t = token_step(&start, &grad, alpha, eps, &mask, dim, token_norm, source).unwrap();
        let d = instance_step(&start, &grad, alpha, eps, &mask, dim).unwrap();
        for out in [&t, &d] {
            prop_assert!(frobenius(out) <= eps + 1e-9);
            prop_assert!(padded_rows_zero(out, &mask, dim));
        }
    }

    #[test]
    fn scatter_never_writes_padding_row(
        ids in prop::collection::vec(0usize..12, 1..10),
        values in prop::collection::vec(-1.0..1.0f64, 30),
        include_special in any::<bool>(),
    ) {
        let dim = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vocab = PerturbationVocabulary::init(12, dim, 0.1, VocabMeta::default(), &mut rng).unwrap();
        let mask: Vec<bool> = ids.iter().map(|&i| i != 0).collect();
        let eta = Tensor::new(vec![1, ids.len(), dim], values[..ids.len() * dim].to_vec()).unwrap();
        let policy = VocabPolicy { include_special, ..Default::default() };
        let before = vocab.clone();
        vocab.scatter(&ids, &mask, &eta, &policy).unwrap();
        prop_assert!(vocab.row(0).iter().all(|&v| v == 0.0));
        for id in 1..12 {
            if !policy.permits(id) || !ids.contains(&id) {
                prop_assert_eq!(vocab.row(id), before.row(id));
            }
        }
    }

    #[test]
    fn bio_spans_are_ordered_and_disjoint(tags in prop::collection::vec(prop::sample::select(vec!["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]), 0..20)) {
        let spans = bio_spans(&tags);
        for s in &spans {
            prop_assert!(s.start < s.end && s.end <= tags.len());
            prop_assert!(tags[s.start] != "O");
        }
        for w in spans.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
    }
}
