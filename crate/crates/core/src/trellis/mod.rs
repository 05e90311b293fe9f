//! Duration-constrained monotonic alignment trellis.
//!
//! States are `(t, u, r)`: super-frame `t`, token `u`, and the run length `r`
//! of token `u` so far (`1..=K`). A path starts in `(1, 1, 1)` with a SHIFT and
//! ends in `(T', U, r)` for any `r`. BLANK extends the run and is only allowed
//! while `r < K`; SHIFT moves to `(u + 1, 1)`. Every frame contributes a
//! transition score and the emission score of the token it is aligned to.
//!
//! Indices in the public API are 0-based for `t` and `u`; run lengths are
//! 1-based.

mod dump;
mod paths;
mod search;

pub use dump::{LogValue, TrellisDump};
pub use paths::{alignment_to_duration, count_valid, duration_to_alignment, enumerate_valid, ENUMERATION_LIMIT};
pub use search::{nbest_beam, nbest_beam_with, viterbi_best, Completion, Hypothesis};

use crate::error::{Error, Result};
use crate::numeric::{log_add, log_sum_exp, NEG_INF};
use crate::types::{DurationSequence, Matrix, TokenSequence, Transition};

/// Per-frame transition and emission log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionTable {
    log_trans: Matrix,
    log_emit: Matrix,
}

const NORMALIZATION_TOL: f64 = 1e-9;

impl EmissionTable {
    /// Validated table: both matrices have `T'` rows, `log_trans` has 2
    /// columns (BLANK, SHIFT) and every row log-sums to 0 within 1e-9.
    pub fn new(log_trans: Matrix, log_emit: Matrix) -> Result<Self> {
        let table = Self::from_scores(log_trans, log_emit)?;
        for (name, m) in [("log_trans", &table.log_trans), ("log_emit", &table.log_emit)] {
            for (t, row) in m.iter_rows().enumerate() {
                let z = log_sum_exp(row);
                if !(z.abs() <= NORMALIZATION_TOL) {
                    return Err(Error::InvalidValue(format!(
                        "{name} row {t} log-sums to {z}, expected 0"
                    )));
                }
            }
        }
        Ok(table)
    }

    /// Unnormalized scores. Used for gradient checks, where single entries
    /// are perturbed independently.
    pub fn from_scores(log_trans: Matrix, log_emit: Matrix) -> Result<Self> {
        if log_trans.cols() != 2 {
            return Err(Error::shape("log_trans columns", 2, log_trans.cols()));
        }
        if log_trans.rows() != log_emit.rows() {
            return Err(Error::shape("emission table rows", log_trans.rows(), log_emit.rows()));
        }
        if log_trans.rows() == 0 || log_emit.cols() == 0 {
            return Err(Error::InvalidValue("emission table is empty".into()));
        }
        let bad = |v: &f64| v.is_nan() || *v == f64::INFINITY;
        if log_trans.as_slice().iter().any(bad) || log_emit.as_slice().iter().any(bad) {
            return Err(Error::InvalidValue("emission table has NaN or +inf".into()));
        }
        Ok(EmissionTable { log_trans, log_emit })
    }

    pub fn frames(&self) -> usize {
        self.log_trans.rows()
    }

    pub fn vocab(&self) -> usize {
        self.log_emit.cols()
    }

    pub fn log_trans(&self) -> &Matrix {
        &self.log_trans
    }

    pub fn log_emit(&self) -> &Matrix {
        &self.log_emit
    }

    #[inline]
    pub fn trans(&self, t: usize, a: Transition) -> f64 {
        self.log_trans.get(t, a.column())
    }

    #[inline]
    pub fn emit(&self, t: usize, token: usize) -> f64 {
        self.log_emit.get(t, token)
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.log_trans, self.log_emit)
    }
}

/// Dimensions of one alignment problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub frames: usize,
    pub tokens: usize,
    pub max_duration: usize,
}

impl Dims {
    pub fn is_feasible(&self) -> bool {
        self.max_duration >= 1
            && self.tokens >= 1
            && self.frames >= self.tokens
            && self.frames <= self.tokens * self.max_duration
    }

    fn check(self) -> Result<Self> {
        if self.is_feasible() {
            Ok(self)
        } else {
            Err(Error::Infeasible {
                frames: self.frames,
                tokens: self.tokens,
                max_duration: self.max_duration,
            })
        }
    }

    /// Whether state `(t, u, r)` can be reached from the start by a valid prefix.
    pub fn reachable_from_start(&self, t: usize, u: usize, r: usize) -> bool {
        if r == 0 || r > self.max_duration || r > t + 1 {
            return false;
        }
        let before = t + 1 - r;
        before >= u && before <= u * self.max_duration
    }

    /// Whether a valid completion exists from state `(t, u, r)`.
    pub fn can_complete(&self, t: usize, u: usize, r: usize) -> bool {
        if r == 0 || r > self.max_duration || t >= self.frames || u >= self.tokens {
            return false;
        }
        let remaining = self.frames - 1 - t;
        let later = self.tokens - 1 - u;
        remaining >= later && remaining <= (self.max_duration - r) + later * self.max_duration
    }
}

fn instance_dims(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<Dims> {
    if let Some(&token) = y.as_slice().iter().find(|&&v| v >= em.vocab()) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: em.vocab(),
        });
    }
    Dims {
        frames: em.frames(),
        tokens: y.len(),
        max_duration,
    }
    .check()
}

/// Log-domain table over `(t, u, r)` states.
#[derive(Clone, Debug, PartialEq)]
pub struct LogTable {
    dims: Dims,
    data: Vec<f64>,
}

impl LogTable {
    fn new(dims: Dims) -> Self {
        LogTable {
            dims,
            data: vec![NEG_INF; dims.frames * dims.tokens * dims.max_duration],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    fn index(&self, t: usize, u: usize, r: usize) -> usize {
        debug_assert!(r >= 1 && r <= self.dims.max_duration);
        (t * self.dims.tokens + u) * self.dims.max_duration + (r - 1)
    }

    /// Value at `(t, u, r)`; `r` is the 1-based run length.
    #[inline]
    pub fn get(&self, t: usize, u: usize, r: usize) -> f64 {
        self.data[self.index(t, u, r)]
    }

    #[inline]
    fn set(&mut self, t: usize, u: usize, r: usize, v: f64) {
        let i = self.index(t, u, r);
        self.data[i] = v;
    }

    /// Row-major values, `t` slowest and `r` fastest.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
fn event(em: &EmissionTable, y: &[usize], t: usize, a: Transition, u: usize) -> f64 {
    em.trans(t, a) + em.emit(t, y[u])
}

/// Forward pass: `log_alpha(t, u, r)` is the log-sum over valid prefixes ending
/// at frame `t` in token `u` with run length `r`.
pub fn forward(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<LogTable> {
    let dims = instance_dims(em, y, max_duration)?;
    Ok(forward_impl(em, y.as_slice(), dims, log_add))
}

/// Backward pass: `log_beta(t, u, r)` is the log-sum over completions from
/// `(t, u, r)` to the end, excluding frame `t` itself.
pub fn backward(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<LogTable> {
    let dims = instance_dims(em, y, max_duration)?;
    Ok(backward_impl(em, y.as_slice(), dims, log_add))
}

fn forward_impl(em: &EmissionTable, y: &[usize], dims: Dims, combine: fn(f64, f64) -> f64) -> LogTable {
    let Dims {
        frames,
        tokens,
        max_duration: k,
    } = dims;
    let mut alpha = LogTable::new(dims);
    alpha.set(0, 0, 1, event(em, y, 0, Transition::Shift, 0));
    for t in 1..frames {
        for u in 0..tokens.min(t + 1) {
            if u > 0 {
                let entered = (1..=k).fold(NEG_INF, |acc, r| combine(acc, alpha.get(t - 1, u - 1, r)));
                if entered > NEG_INF {
                    alpha.set(t, u, 1, entered + event(em, y, t, Transition::Shift, u));
                }
            }
            let blank = event(em, y, t, Transition::Blank, u);
            for r in 2..=k.min(t + 1) {
                let prev = alpha.get(t - 1, u, r - 1);
                if prev > NEG_INF {
                    alpha.set(t, u, r, prev + blank);
                }
            }
        }
    }
    alpha
}

fn backward_impl(em: &EmissionTable, y: &[usize], dims: Dims, combine: fn(f64, f64) -> f64) -> LogTable {
    let Dims {
        frames,
        tokens,
        max_duration: k,
    } = dims;
    let mut beta = LogTable::new(dims);
    for r in 1..=k {
        beta.set(frames - 1, tokens - 1, r, 0.0);
    }
    for t in (0..frames - 1).rev() {
        for u in 0..tokens {
            let shift = if u + 1 < tokens {
                let next = beta.get(t + 1, u + 1, 1);
                if next > NEG_INF {
                    next + event(em, y, t + 1, Transition::Shift, u + 1)
                } else {
                    NEG_INF
                }
            } else {
                NEG_INF
            };
            let blank = event(em, y, t + 1, Transition::Blank, u);
            for r in 1..=k {
                let stay = if r < k {
                    let next = beta.get(t + 1, u, r + 1);
                    if next > NEG_INF {
                        next + blank
                    } else {
                        NEG_INF
                    }
                } else {
                    NEG_INF
                };
                beta.set(t, u, r, combine(stay, shift));
            }
        }
    }
    beta
}

pub(crate) fn max_backward(em: &EmissionTable, y: &[usize], dims: Dims) -> LogTable {
    backward_impl(em, y, dims, f64::max)
}

/// Log-sum over the terminal states `(T', U, 1..=K)` of a forward table.
pub fn log_marginal(alpha: &LogTable) -> f64 {
    let d = alpha.dims();
    let terminal: Vec<f64> = (1..=d.max_duration)
        .map(|r| alpha.get(d.frames - 1, d.tokens - 1, r))
        .collect();
    log_sum_exp(&terminal)
}

/// `log P(y | x)` summed over all valid alignments; `-inf` when the
/// dimensions admit no alignment at all.
pub fn log_likelihood(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<f64> {
    match forward(em, y, max_duration) {
        Ok(alpha) => Ok(log_marginal(&alpha)),
        Err(Error::Infeasible { .. }) => Ok(NEG_INF),
        Err(e) => Err(e),
    }
}

/// Forward and backward tables of one instance.
#[derive(Clone, Debug)]
pub struct Trellis {
    alpha: LogTable,
    beta: LogTable,
    log_marginal: f64,
}

impl Trellis {
    pub fn new(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<Self> {
        let dims = instance_dims(em, y, max_duration)?;
        let alpha = forward_impl(em, y.as_slice(), dims, log_add);
        let beta = backward_impl(em, y.as_slice(), dims, log_add);
        let log_marginal = log_marginal(&alpha);
        Ok(Trellis {
            alpha,
            beta,
            log_marginal,
        })
    }

    pub fn dims(&self) -> Dims {
        self.alpha.dims()
    }

    pub fn alpha(&self) -> &LogTable {
        &self.alpha
    }

    pub fn beta(&self) -> &LogTable {
        &self.beta
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    /// A state lies on some valid complete path.
    pub fn is_reachable(&self, t: usize, u: usize, r: usize) -> bool {
        let d = self.dims();
        d.reachable_from_start(t, u, r) && d.can_complete(t, u, r)
    }

    /// Posterior log-probability of passing through `(t, u, r)`.
    pub fn log_occupancy(&self, t: usize, u: usize, r: usize) -> f64 {
        let v = self.alpha.get(t, u, r) + self.beta.get(t, u, r);
        if v == NEG_INF || self.log_marginal == NEG_INF {
            NEG_INF
        } else {
            v - self.log_marginal
        }
    }

    /// Log-sum of `alpha + beta` over all states at frame `t`; equals the
    /// log-marginal for every `t`.
    pub fn frame_log_total(&self, t: usize) -> f64 {
        let d = self.dims();
        let mut acc = NEG_INF;
        for u in 0..d.tokens {
            for r in 1..=d.max_duration {
                acc = log_add(acc, self.alpha.get(t, u, r) + self.beta.get(t, u, r));
            }
        }
        acc
    }
}

/// Gradient of the log-marginal with respect to every transition and
/// emission score.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalGradient {
    pub log_marginal: f64,
    /// `T' x 2`, columns (BLANK, SHIFT).
    pub log_trans: Matrix,
    /// `T' x V`.
    pub log_emit: Matrix,
}

/// The gradient equals the posterior expected count of each event: SHIFT at
/// `t` is occupancy of run length 1, BLANK the rest, and emission `v` at `t`
/// sums occupancy over tokens with id `v`.
pub fn marginal_gradient(em: &EmissionTable, y: &TokenSequence, max_duration: usize) -> Result<MarginalGradient> {
    let trellis = Trellis::new(em, y, max_duration)?;
    let d = trellis.dims();
    let mut log_trans = Matrix::zeros(d.frames, 2);
    let mut log_emit = Matrix::zeros(d.frames, em.vocab());
    if trellis.log_marginal == NEG_INF {
        return Err(Error::InvalidValue("all valid alignments have zero probability".into()));
    }
    for t in 0..d.frames {
        for (u, &token) in y.as_slice().iter().enumerate() {
            let mut token_mass = 0.0;
            for r in 1..=d.max_duration {
                let lo = trellis.log_occupancy(t, u, r);
                if lo == NEG_INF {
                    continue;
                }
                let p = lo.exp();
                token_mass += p;
                let a = if r == 1 { Transition::Shift } else { Transition::Blank };
                let cur = log_trans.get(t, a.column());
                log_trans.set(t, a.column(), cur + p);
            }
            let cur = log_emit.get(t, token);
            log_emit.set(t, token, cur + token_mass);
        }
    }
    Ok(MarginalGradient {
        log_marginal: trellis.log_marginal,
        log_trans,
        log_emit,
    })
}

/// Log-probability of the single path encoded by `durations`, summed frame
/// by frame without any dynamic programming.
pub fn path_score(em: &EmissionTable, y: &TokenSequence, durations: &DurationSequence) -> Result<f64> {
    if durations.len() != y.len() || durations.total() != em.frames() {
        return Err(Error::shape(
            "path durations",
            format!("{} tokens over {} frames", y.len(), em.frames()),
            format!("{} tokens over {} frames", durations.len(), durations.total()),
        ));
    }
    let mut t = 0;
    let mut score = 0.0;
    for (&token, l) in y.as_slice().iter().zip(durations.iter()) {
        for step in 0..l {
            let a = if step == 0 { Transition::Shift } else { Transition::Blank };
            score += em.trans(t, a) + em.emit(t, token);
            t += 1;
        }
    }
    Ok(score)
}
