//! Best-path and N-best search over the trellis.
//!
//! Ties between alignments whose scores agree to 1e-12 relative go to the one
//! that SHIFTs earlier (lexicographic order with SHIFT < BLANK).

use std::cmp::Ordering;

use super::{instance_dims, max_backward, Dims, EmissionTable, LogTable};
use crate::error::Result;
use crate::numeric::{log_add, nearly_equal, NEG_INF};
use crate::trellis::{alignment_to_duration, backward_impl};
use crate::types::{Alignment, DurationSequence, TokenSequence, Transition};

/// Completion score used to rank partial hypotheses in [`nbest_beam_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Completion {
    /// Best-path (max-product) backward score. Ranking a prefix by its score
    /// plus its best completion keeps every prefix of the true N best paths,
    /// so the search is exact for any width.
    #[default]
    Viterbi,
    /// Sum-product backward score, `log_beta`. Exact only when the beam is
    /// wide enough to hold every live prefix.
    Marginal,
}

/// One complete alignment hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub durations: DurationSequence,
    pub alignment: Alignment,
    pub log_score: f64,
}

/// Descending score; near-ties broken toward the lexicographically smaller path.
fn ranks_before(score_a: f64, path_a: &[Transition], score_b: f64, path_b: &[Transition]) -> bool {
    if nearly_equal(score_a, score_b) {
        path_a.cmp(path_b) == Ordering::Less
    } else {
        score_a > score_b
    }
}

/// Highest-scoring valid alignment and its joint log-probability.
pub fn viterbi_best(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<(Alignment, f64)> {
    let dims = instance_dims(em, y, max_duration)?;
    let tokens = y.as_slice();
    let best = max_backward(em, tokens, dims);

    let mut path = Vec::with_capacity(dims.frames);
    path.push(Transition::Shift);
    let mut score = em.trans(0, Transition::Shift) + em.emit(0, tokens[0]);
    let (mut u, mut r) = (0usize, 1usize);
    for t in 1..dims.frames {
        let shift = (u + 1 < dims.tokens && dims.can_complete(t, u + 1, 1)).then(|| {
            let s = em.trans(t, Transition::Shift) + em.emit(t, tokens[u + 1]);
            (s, s + best.get(t, u + 1, 1))
        });
        let blank = (r < dims.max_duration && dims.can_complete(t, u, r + 1)).then(|| {
            let s = em.trans(t, Transition::Blank) + em.emit(t, tokens[u]);
            (s, s + best.get(t, u, r + 1))
        });
        let take_shift = match (shift, blank) {
            (Some((_, vs)), Some((_, vb))) => nearly_equal(vs, vb) || vs > vb,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => unreachable!("feasible instance always has a valid move"),
        };
        if take_shift {
            score += shift.map(|(s, _)| s).unwrap_or(NEG_INF);
            u += 1;
            r = 1;
            path.push(Transition::Shift);
        } else {
            score += blank.map(|(s, _)| s).unwrap_or(NEG_INF);
            r += 1;
            path.push(Transition::Blank);
        }
    }
    debug_assert_eq!(u + 1, dims.tokens);
    Ok((Alignment::new(path)?, score))
}

/// Up to `width` distinct valid duration sequences, best first.
pub fn nbest_beam(em: &EmissionTable, y: &TokenSequence, max_duration: usize, width: usize) -> Result<Vec<Hypothesis>> {
    nbest_beam_with(em, y, max_duration, width, Completion::Viterbi)
}

struct Partial {
    u: usize,
    r: usize,
    path: Vec<Transition>,
    score: f64,
    rank: f64,
}

/// Left-to-right beam over frames carrying `(u, r)`. Each partial hypothesis
/// is ranked by its accumulated score plus the backward completion score of
/// its state; prefixes with no valid completion are dropped.
pub fn nbest_beam_with(
    em: &EmissionTable,
    y: &TokenSequence,
    max_duration: usize,
    width: usize,
    completion: Completion,
) -> Result<Vec<Hypothesis>> {
    let dims = instance_dims(em, y, max_duration)?;
    if width == 0 {
        return Err(crate::error::Error::InvalidValue("beam width must be >= 1".into()));
    }
    let tokens = y.as_slice();
    let rest: LogTable = match completion {
        Completion::Viterbi => max_backward(em, tokens, dims),
        Completion::Marginal => backward_impl(em, tokens, dims, log_add),
    };

    let s0 = em.trans(0, Transition::Shift) + em.emit(0, tokens[0]);
    let mut beam = vec![Partial {
        u: 0,
        r: 1,
        path: vec![Transition::Shift],
        score: s0,
        rank: s0 + rest.get(0, 0, 1),
    }];

    for t in 1..dims.frames {
        let mut next: Vec<Partial> = Vec::with_capacity(width);
        for p in &beam {
            for (a, u, r) in [(Transition::Shift, p.u + 1, 1), (Transition::Blank, p.u, p.r + 1)] {
                if !valid_move(&dims, t, u, r) {
                    continue;
                }
                let score = p.score + em.trans(t, a) + em.emit(t, tokens[u]);
                let rank = score + rest.get(t, u, r);
                // cheap reject before cloning the path
                if next.len() == width {
                    let last = &next[width - 1];
                    if !(rank > last.rank || nearly_equal(rank, last.rank)) {
                        continue;
                    }
                }
                let mut path = Vec::with_capacity(t + 1);
                path.extend_from_slice(&p.path);
                path.push(a);
                insert_ranked(&mut next, Partial { u, r, path, score, rank }, width, |c| c.rank);
            }
        }
        beam = next;
    }

    let mut finished: Vec<Partial> = Vec::with_capacity(beam.len());
    for p in beam {
        debug_assert_eq!(p.u + 1, dims.tokens);
        insert_ranked(&mut finished, p, width, |c| c.score);
    }
    finished
        .into_iter()
        .map(|p| {
            let alignment = Alignment::new(p.path)?;
            Ok(Hypothesis {
                durations: alignment_to_duration(&alignment)?,
                alignment,
                log_score: p.score,
            })
        })
        .collect()
}

fn valid_move(dims: &Dims, t: usize, u: usize, r: usize) -> bool {
    u < dims.tokens && r <= dims.max_duration && dims.can_complete(t, u, r)
}

/// Insertion into a list kept in rank order and truncated to `width`. A
/// pairwise scan is used because near-tie comparison is not a total order.
fn insert_ranked(list: &mut Vec<Partial>, item: Partial, width: usize, key: fn(&Partial) -> f64) {
    let pos = list
        .iter()
        .position(|c| ranks_before(key(&item), &item.path, key(c), &c.path))
        .unwrap_or(list.len());
    if pos < width {
        list.insert(pos, item);
        list.truncate(width);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trellis::{enumerate_valid, path_score};
    use crate::types::Matrix;
    use Transition::{Blank as B, Shift as S};

    fn uniform(frames: usize, vocab: usize) -> EmissionTable {
        EmissionTable::new(
            Matrix::filled(frames, 2, 0.5f64.ln()),
            Matrix::filled(frames, vocab, -(vocab as f64).ln()),
        )
        .unwrap()
    }

    fn tokens(v: &[usize], vocab: usize) -> TokenSequence {
        TokenSequence::new(v.to_vec(), vocab).unwrap()
    }

    #[test]
    fn viterbi_on_single_path() {
        let em = uniform(3, 3);
        let (a, s) = viterbi_best(&em, &tokens(&[2, 0, 1], 3), 4).unwrap();
        assert_eq!(a.transitions(), &[S, S, S]);
        assert!((s - 3.0 * (0.5f64.ln() - 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn viterbi_defers_shift_when_blank_dominates() {
        // T'=3, U=2, K=2: frame 2 strongly prefers BLANK, so l = (2, 1).
        let mut trans = Matrix::filled(3, 2, 0.5f64.ln());
        trans.set(1, 0, 0.9f64.ln());
        trans.set(1, 1, 0.1f64.ln());
        let em = EmissionTable::new(trans, Matrix::filled(3, 1, 0.0)).unwrap();
        let y = tokens(&[0, 0], 1);
        let (a, s) = viterbi_best(&em, &y, 2).unwrap();
        assert_eq!(a.transitions(), &[S, B, S]);
        // argmax over the enumeration
        let best = enumerate_valid(3, 2, 2)
            .unwrap()
            .iter()
            .map(|d| path_score(&em, &y, d).unwrap())
            .fold(NEG_INF, f64::max);
        assert!((s - best).abs() < 1e-12);
    }

    #[test]
    fn viterbi_ties_prefer_earlier_shift() {
        let em = uniform(3, 1);
        let (a, _) = viterbi_best(&em, &tokens(&[0, 0], 1), 2).unwrap();
        assert_eq!(a.transitions(), &[S, S, B]);
    }

    #[test]
    fn beam_width_one_matches_viterbi_on_tie() {
        let em = uniform(3, 1);
        let y = tokens(&[0, 0], 1);
        let hyps = nbest_beam(&em, &y, 2, 1).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].durations.as_slice(), &[1, 2]);
    }

    #[test]
    fn beam_two_symmetric_paths() {
        let em = uniform(3, 1);
        let y = tokens(&[0, 0], 1);
        for completion in [Completion::Viterbi, Completion::Marginal] {
            let hyps = nbest_beam_with(&em, &y, 2, 2, completion).unwrap();
            assert_eq!(hyps.len(), 2);
            assert_eq!(hyps[0].durations.as_slice(), &[1, 2]);
            assert_eq!(hyps[1].durations.as_slice(), &[2, 1]);
            assert!(nearly_equal(hyps[0].log_score, hyps[1].log_score));
            assert!((hyps[0].log_score - 0.125f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_rejects_zero_width() {
        let em = uniform(3, 1);
        assert!(nbest_beam(&em, &tokens(&[0, 0], 1), 2, 0).is_err());
    }

    #[test]
    fn beam_returns_at_most_all_paths() {
        let em = uniform(6, 2);
        let y = tokens(&[0, 1, 0], 2);
        let all = enumerate_valid(6, 3, 3).unwrap();
        let hyps = nbest_beam(&em, &y, 3, 100).unwrap();
        assert_eq!(hyps.len(), all.len());
    }
}
