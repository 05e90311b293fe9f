use crate::error::{Error, Result};
use crate::types::{Alignment, DurationSequence, Transition};

/// Largest alignment count [`enumerate_valid`] will materialize.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Run length of each token: one for its SHIFT plus the BLANKs that follow.
pub fn alignment_to_duration(a: &Alignment) -> Result<DurationSequence> {
    let mut durations = Vec::with_capacity(a.shift_count());
    for (t, &step) in a.transitions().iter().enumerate() {
        match step {
            Transition::Shift => durations.push(1),
            Transition::Blank => match durations.last_mut() {
                Some(l) => *l += 1,
                None => {
                    return Err(Error::MalformedAlignment(format!("BLANK at t={} before any SHIFT", t + 1)));
                }
            },
        }
    }
    Ok(DurationSequence::new(durations))
}

pub fn duration_to_alignment(l: &DurationSequence) -> Result<Alignment> {
    if let Some(index) = l.iter().position(|d| d == 0) {
        return Err(Error::InvalidValue(format!("duration at u={} is 0", index + 1)));
    }
    let mut steps = Vec::with_capacity(l.total());
    for d in l.iter() {
        steps.push(Transition::Shift);
        steps.extend(std::iter::repeat_n(Transition::Blank, d - 1));
    }
    Alignment::new(steps)
}

/// Number of compositions of `frames` into `tokens` parts, each in `1..=max_duration`.
pub fn count_valid(frames: usize, tokens: usize, max_duration: usize) -> u128 {
    // ways[s] = compositions of s into the parts placed so far
    let mut ways = vec![0u128; frames + 1];
    ways[0] = 1;
    for _ in 0..tokens {
        let mut next = vec![0u128; frames + 1];
        for (s, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for d in 1..=max_duration {
                if s + d > frames {
                    break;
                }
                next[s + d] = next[s + d].saturating_add(w);
            }
        }
        ways = next;
    }
    ways[frames]
}

/// Every duration sequence with `tokens` entries in `1..=max_duration`
/// summing to `frames`, in lexicographic order.
pub fn enumerate_valid(frames: usize, tokens: usize, max_duration: usize) -> Result<Vec<DurationSequence>> {
    let count = count_valid(frames, tokens, max_duration);
    if count > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = Vec::with_capacity(tokens);
    extend(frames, tokens, max_duration, &mut current, &mut out);
    Ok(out)
}

fn extend(remaining: usize, tokens: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<DurationSequence>) {
    let left = tokens - current.len();
    if left == 0 {
        if remaining == 0 {
            out.push(DurationSequence::new(current.clone()));
        }
        return;
    }
    for d in 1..=k.min(remaining) {
        let rest = remaining - d;
        if rest < left - 1 || rest > (left - 1) * k {
            continue;
        }
        current.push(d);
        extend(rest, tokens, k, current, out);
        current.pop();
    }
}
