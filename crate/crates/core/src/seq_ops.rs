//! Resolution changes between frame rate and token rate.

use crate::error::{Error, Result};
use crate::types::{DurationSequence, Matrix};

/// Frame count of each token: `g * l_u`.
pub fn frame_durations(l: &DurationSequence, grouping: usize) -> impl Iterator<Item = usize> + '_ {
    l.iter().map(move |d| d * grouping)
}

/// Token-level means: row `u` averages the `g * l_u` frames of token `u`.
pub fn aggregate(x: &Matrix, l: &DurationSequence, grouping: usize) -> Result<Matrix> {
    let needed = l.total() * grouping;
    if needed != x.rows() {
        return Err(Error::shape("aggregate frames", needed, x.rows()));
    }
    let mut out = Matrix::zeros(l.len(), x.cols());
    let mut t = 0;
    for (u, n) in frame_durations(l, grouping).enumerate() {
        if n == 0 {
            return Err(Error::InvalidValue(format!("duration at u={} is 0", u + 1)));
        }
        // running mean: exact when all frames of a token are identical
        let row = out.row_mut(u);
        row.copy_from_slice(x.row(t));
        for (k, frame) in (t + 1..t + n).enumerate() {
            let count = (k + 2) as f64;
            for (mean, v) in row.iter_mut().zip(x.row(frame)) {
                *mean += (v - *mean) / count;
            }
        }
        t += n;
    }
    Ok(out)
}

/// Repeats row `u` of `v` `g * l_u` times.
pub fn upsample(v: &Matrix, l: &DurationSequence, grouping: usize) -> Result<Matrix> {
    if v.rows() != l.len() {
        return Err(Error::shape("upsample rows", l.len(), v.rows()));
    }
    let mut data = Vec::with_capacity(l.total() * grouping * v.cols());
    for (u, n) in frame_durations(l, grouping).enumerate() {
        for _ in 0..n {
            data.extend_from_slice(v.row(u));
        }
    }
    Matrix::from_vec(l.total() * grouping, v.cols(), data)
}

/// Same as [`upsample`] for token ids.
pub fn upsample_tokens(tokens: &[usize], l: &DurationSequence, grouping: usize) -> Result<Vec<usize>> {
    if tokens.len() != l.len() {
        return Err(Error::shape("upsample tokens", l.len(), tokens.len()));
    }
    Ok(tokens
        .iter()
        .zip(frame_durations(l, grouping))
        .flat_map(|(&tok, n)| std::iter::repeat_n(tok, n))
        .collect())
}

/// Frames stacked into super-frames of `g` consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouped {
    /// `ceil(T / g)` rows of dimension `g * O`.
    pub super_frames: Matrix,
    /// Frames appended by repeating the final frame.
    pub padding: usize,
}

/// Stacks frames `g(t'-1)+1 ..= g t'` into super-frame `t'`. When `T` is not a
/// multiple of `g` the final frame is repeated to fill the last group.
pub fn group_frames(x: &Matrix, grouping: usize) -> Result<Grouped> {
    if grouping == 0 {
        return Err(Error::InvalidValue("grouping factor must be >= 1".into()));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidValue("cannot group an empty frame sequence".into()));
    }
    let padded = pad_frames(x, grouping);
    let rows = padded.rows() / grouping;
    let grouped = Matrix::from_vec(rows, grouping * x.cols(), padded.into_vec())?;
    Ok(Grouped {
        super_frames: grouped,
        padding: rows * grouping - x.rows(),
    })
}

/// The frame sequence padded by last-frame repetition to a multiple of `g`.
pub fn pad_frames(x: &Matrix, grouping: usize) -> Matrix {
    let rows = x.rows().div_ceil(grouping) * grouping;
    let mut data = Vec::with_capacity(rows * x.cols());
    data.extend_from_slice(x.as_slice());
    if rows > x.rows() && x.rows() > 0 {
        let last = x.row(x.rows() - 1);
        for _ in x.rows()..rows {
            data.extend_from_slice(last);
        }
    }
    Matrix::from_vec(rows, x.cols(), data).expect("padded size is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frames(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn aggregate_averages_each_token() {
        let x = frames(&[&[1.0, 0.0], &[3.0, 2.0], &[0.0, 3.0], &[3.0, 3.0], &[6.0, 0.0]]);
        let l = DurationSequence::new(vec![2, 3]);
        let xb = aggregate(&x, &l, 1).unwrap();
        assert_eq!(xb.row(0), &[2.0, 1.0]);
        assert_eq!(xb.row(1), &[3.0, 2.0]);
    }

    #[test]
    fn aggregate_identity_and_constants() {
        let x = frames(&[&[1.5], &[-2.0], &[0.25]]);
        let ones = DurationSequence::new(vec![1, 1, 1]);
        assert_eq!(aggregate(&x, &ones, 1).unwrap(), x);
        let c = Matrix::filled(6, 3, 0.7);
        let xb = aggregate(&c, &DurationSequence::new(vec![1, 2]), 2).unwrap();
        assert!(xb.as_slice().iter().all(|&v| v == 0.7));
        assert!(aggregate(&c, &DurationSequence::new(vec![1, 1]), 2).is_err());
    }

    #[test]
    fn upsample_repeats_rows() {
        let v = frames(&[&[1.0], &[2.0]]);
        let l = DurationSequence::new(vec![2, 3]);
        let up = upsample(&v, &l, 1).unwrap();
        assert_eq!(up.as_slice(), &[1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(upsample_tokens(&[7, 9], &l, 1).unwrap(), vec![7, 7, 9, 9, 9]);
        assert_eq!(upsample_tokens(&[7, 9], &l, 2).unwrap().len(), 10);
        let ones = DurationSequence::new(vec![1, 1]);
        assert_eq!(upsample(&v, &ones, 1).unwrap(), v);
    }

    #[test]
    fn group_frames_examples() {
        let x = Matrix::from_vec(6, 2, (0..12).map(f64::from).collect()).unwrap();
        let g1 = group_frames(&x, 1).unwrap();
        assert_eq!(g1.super_frames, x);
        assert_eq!(g1.padding, 0);

        let g3 = group_frames(&x, 3).unwrap();
        assert_eq!(g3.super_frames.shape(), (2, 6));
        assert_eq!(g3.super_frames.row(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);

        let x7 = Matrix::from_vec(7, 1, (1..=7).map(f64::from).collect()).unwrap();
        let g = group_frames(&x7, 3).unwrap();
        assert_eq!(g.super_frames.shape(), (3, 3));
        assert_eq!(g.padding, 2);
        assert_eq!(g.super_frames.row(2), &[7.0, 7.0, 7.0]);
    }

    fn token_matrix_and_durations() -> impl Strategy<Value = (Matrix, DurationSequence, usize)> {
        (1usize..6, 1usize..4, 1usize..4).prop_flat_map(|(u, d, g)| {
            (
                prop::collection::vec(-10.0f64..10.0, u * d),
                prop::collection::vec(1usize..6, u),
                Just((u, d, g)),
            )
                .prop_map(|(vals, durs, (u, d, g))| {
                    (Matrix::from_vec(u, d, vals).unwrap(), DurationSequence::new(durs), g)
                })
        })
    }

    proptest! {
        #[test]
        fn aggregate_inverts_upsample((v, l, g) in token_matrix_and_durations()) {
            let back = aggregate(&upsample(&v, &l, g).unwrap(), &l, g).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn upsample_preserves_mass((v, l, _g) in token_matrix_and_durations()) {
            let up = upsample(&v, &l, 1).unwrap();
            for j in 0..v.cols() {
                let col: f64 = (0..up.rows()).map(|t| up.get(t, j)).sum();
                let expected: f64 = l.iter().enumerate().map(|(u, d)| d as f64 * v.get(u, j)).sum();
                prop_assert!((col - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            }
        }
    }
}
