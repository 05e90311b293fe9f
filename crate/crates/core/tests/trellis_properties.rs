use latdur::trellis::{
    count_valid, enumerate_valid, log_likelihood, marginal_gradient, nbest_beam, path_score, viterbi_best,
    EmissionTable, Trellis,
};
use latdur::types::{Matrix, TokenSequence};
use proptest::prelude::*;

fn normalized(rows: usize, raw: &[f64]) -> Matrix {
    let cols = raw.len() / rows;
    let mut out = Vec::with_capacity(raw.len());
    for row in raw.chunks(cols) {
        let z = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - z));
    }
    Matrix::from_vec(rows, cols, out).unwrap()
}

prop_compose! {
    fn instance()(u in 1usize..5, k in 1usize..5, vocab in 1usize..4)
        (frames in u..=u * k, k in Just(k), vocab in Just(vocab),
         tokens in proptest::collection::vec(0..vocab, u..=u),
         seed in proptest::collection::vec(-3.0f64..3.0, 20 * (2 + vocab)))
        -> (EmissionTable, TokenSequence, usize)
    {
        let trans = normalized(frames, &seed[..frames * 2]);
        let emit = normalized(frames, &seed[frames * 2..frames * (2 + vocab)]);
        (EmissionTable::new(trans, emit).unwrap(), TokenSequence::new(tokens, vocab).unwrap(), k)
    }
}

proptest! {
    #[test]
    fn every_frame_carries_the_full_marginal((em, y, k) in instance()) {
        let tr = Trellis::new(&em, &y, k).unwrap();
        for t in 0..em.frames() {
            prop_assert!((tr.frame_log_total(t) - tr.log_marginal()).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_dominates_every_path((em, y, k) in instance()) {
        let (_, best) = viterbi_best(&em, &y, k).unwrap();
        let z = log_likelihood(&em, &y, k).unwrap();
        prop_assert!(best <= z + 1e-12);
        for l in enumerate_valid(em.frames(), y.len(), k).unwrap() {
            prop_assert!(path_score(&em, &y, &l).unwrap() <= best + 1e-9);
        }
    }

    #[test]
    fn beam_is_sorted_distinct_and_bounded((em, y, k) in instance(), width in 1usize..12) {
        let hyps = nbest_beam(&em, &y, k, width).unwrap();
        let total = count_valid(em.frames(), y.len(), k) as usize;
        prop_assert_eq!(hyps.len(), width.min(total));
        for pair in hyps.windows(2) {
            prop_assert!(pair[0].log_score >= pair[1].log_score);
            prop_assert_ne!(&pair[0].durations, &pair[1].durations);
        }
    }

    #[test]
    fn emission_gradient_counts_frames((em, y, k) in instance()) {
        // every frame emits exactly one token, so occupancy over emit sums to T'
        let g = marginal_gradient(&em, &y, k).unwrap();
        let total: f64 = g.log_emit.as_slice().iter().sum();
        prop_assert!((total - em.frames() as f64).abs() < 1e-9);
    }
}
