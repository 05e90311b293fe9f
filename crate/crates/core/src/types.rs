//! Domain types shared by the aligner, the losses, the toy models and the trainer.
//!
//! Durations are counted in super-frames (groups of `g` raw frames), so a
//! duration value `l` in `1..=K` doubles as the 1-based codeword index.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::losses::SgCoeffs;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape(
                    "matrix row",
                    format!("{cols} columns"),
                    format!("{} in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Input token ids `y_1..y_U`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidValue("token sequence is empty".into()));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        Ok(TokenSequence(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Acoustic frames `x_1..x_T`, one row per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct FrameSequence(Matrix);

impl TryFrom<Matrix> for FrameSequence {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        FrameSequence::new(m)
    }
}

impl From<FrameSequence> for Matrix {
    fn from(f: FrameSequence) -> Matrix {
        f.0
    }
}

impl FrameSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::InvalidValue(format!(
                "frame sequence must be at least 1x1, got {}x{}",
                frames.rows(),
                frames.cols()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidValue("frame sequence has non-finite entries".into()));
        }
        Ok(FrameSequence(frames))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// `K` codewords of dimension `D`. Codeword `k` (1-based) encodes duration `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct Codebook(Matrix);

impl TryFrom<Matrix> for Codebook {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Codebook::new(m)
    }
}

impl From<Codebook> for Matrix {
    fn from(c: Codebook) -> Matrix {
        c.0
    }
}

impl Codebook {
    pub fn new(codewords: Matrix) -> Result<Self> {
        if codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(Error::InvalidValue("codebook must have K >= 1 and D >= 1".into()));
        }
        if !codewords.is_finite() {
            return Err(Error::InvalidValue("codebook has non-finite entries".into()));
        }
        Ok(Codebook(codewords))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    /// Codeword for duration `l` (1-based).
    pub fn codeword(&self, l: usize) -> &[f64] {
        self.0.row(l - 1)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Per-token durations `l_1..l_U` in super-frame units.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationSequence(Vec<usize>);

impl DurationSequence {
    /// Wraps raw durations. Range and total are checked by [`validate_duration`].
    pub fn new(durations: Vec<usize>) -> Self {
        DurationSequence(durations)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// Fraction of positions where `self` and `truth` agree exactly.
    pub fn accuracy_against(&self, truth: &DurationSequence) -> f64 {
        let n = self.len().max(truth.len());
        if n == 0 {
            return 1.0;
        }
        let hits = self.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
        hits as f64 / n as f64
    }
}

impl fmt::Display for DurationSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, ")")
    }
}

/// First violated duration constraint. `index` is 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DurationViolation {
    #[error("expected {expected} durations, got {got}")]
    Length { expected: usize, got: usize },
    #[error("duration at u={} is {value}, outside 1..={max}", index + 1)]
    OutOfRange { index: usize, value: usize, max: usize },
    #[error("durations sum to {got}, expected {expected}")]
    Total { expected: usize, got: usize },
}

/// Checks `len = U`, `1 <= l_u <= K` in order, then `sum(l) = T_super`.
pub fn validate_duration(
    durations: &DurationSequence,
    tokens: usize,
    super_frames: usize,
    max_duration: usize,
) -> Result<(), DurationViolation> {
    if durations.len() != tokens {
        return Err(DurationViolation::Length {
            expected: tokens,
            got: durations.len(),
        });
    }
    for (index, value) in durations.iter().enumerate() {
        if value < 1 || value > max_duration {
            return Err(DurationViolation::OutOfRange {
                index,
                value,
                max: max_duration,
            });
        }
    }
    let total = durations.total();
    if total != super_frames {
        return Err(DurationViolation::Total {
            expected: super_frames,
            got: total,
        });
    }
    Ok(())
}

/// Per-step alignment transition. `Shift` enters the next token, `Blank` stays.
///
/// The derived order puts `Shift` first; tie-breaking on alignments relies on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    Shift,
    Blank,
}

impl Transition {
    /// Column in the transition log-probability table.
    pub fn column(self) -> usize {
        match self {
            Transition::Blank => 0,
            Transition::Shift => 1,
        }
    }
}

/// Frame-level path `a_1..a_T'`. The first transition is always `Shift`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment(Vec<Transition>);

impl Alignment {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        match transitions.first() {
            Some(Transition::Shift) => Ok(Alignment(transitions)),
            Some(Transition::Blank) => Err(Error::MalformedAlignment(
                "first transition must be SHIFT".into(),
            )),
            None => Err(Error::MalformedAlignment("alignment is empty".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.0
    }

    pub fn shift_count(&self) -> usize {
        self.0.iter().filter(|&&a| a == Transition::Shift).count()
    }

    /// Checks the token count and that no run exceeds `max_duration`.
    pub fn check(&self, tokens: usize, max_duration: usize) -> Result<()> {
        if self.shift_count() != tokens {
            return Err(Error::MalformedAlignment(format!(
                "{} SHIFTs for {tokens} tokens",
                self.shift_count()
            )));
        }
        let durations = crate::trellis::alignment_to_duration(self)?;
        validate_duration(&durations, tokens, self.len(), max_duration)?;
        Ok(())
    }
}

/// How multiple beam hypotheses are combined into the expectation over durations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorWeighting {
    /// Only the top hypothesis, weight 1.
    #[default]
    Best,
    /// Softmax over the hypothesis log-scores.
    SoftmaxNbest,
}

/// Training hyperparameters. Defaults follow the reference setup
/// (K=13, g=3, D=32, sigma=0.4, sigma_d=3.0, gamma=0.5, Adam at 5e-5,
/// beams 3/10).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub max_duration: usize,
    #[serde(rename = "g")]
    pub grouping: usize,
    #[serde(rename = "D")]
    pub code_dim: usize,
    #[serde(rename = "O")]
    pub frame_dim: usize,
    pub sigma: f64,
    pub sigma_d: f64,
    pub gamma: f64,
    pub alpha_prior: f64,
    pub beta_prior: f64,
    pub alpha_vq: f64,
    pub beta_vq: f64,
    pub learning_rate: f64,
    pub beam_train: usize,
    pub beam_infer: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Vocabulary size of the token inventory.
    #[serde(rename = "V")]
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub posterior_weighting: PosteriorWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_duration: 13,
            grouping: 3,
            code_dim: 32,
            frame_dim: 80,
            sigma: 0.4,
            sigma_d: 3.0,
            gamma: 0.5,
            alpha_prior: 1.0,
            beta_prior: 0.0,
            alpha_vq: 2.0,
            beta_vq: 1.0,
            learning_rate: 5e-5,
            beam_train: 3,
            beam_infer: 10,
            seed: 0,
            epochs: 10,
            vocab: 40,
            embed_dim: 16,
            hidden_dim: 32,
            batch_size: 16,
            posterior_weighting: PosteriorWeighting::Best,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("K", self.max_duration),
            ("g", self.grouping),
            ("D", self.code_dim),
            ("O", self.frame_dim),
            ("V", self.vocab),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("beam_train", self.beam_train),
            ("beam_infer", self.beam_infer),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidValue(format!("{name} must be >= 1")));
        }
        let positive = [
            ("sigma", self.sigma),
            ("sigma_d", self.sigma_d),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidValue(format!("{name} must be positive, got {v}")));
        }
        let nonneg = [
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidValue(format!("{name} must be non-negative, got {v}")));
        }
        self.prior_sg()?;
        self.vq_sg()?;
        Ok(())
    }

    pub fn prior_sg(&self) -> Result<SgCoeffs> {
        SgCoeffs::new(self.alpha_prior, self.beta_prior)
    }

    pub fn vq_sg(&self) -> Result<SgCoeffs> {
        SgCoeffs::new(self.alpha_vq, self.beta_vq)
    }
}

/// The four objective terms, signed as minimized losses (negated ELBO terms).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub decoder_nll: f64,
    pub prior_kl: f64,
    pub vq_kl: f64,
    pub ctc_nll: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn durs(v: &[usize]) -> DurationSequence {
        DurationSequence::new(v.to_vec())
    }

    #[test]
    fn validate_duration_examples() {
        assert_eq!(validate_duration(&durs(&[2, 3]), 2, 5, 3), Ok(()));
        assert_eq!(validate_duration(&durs(&[1]), 1, 1, 1), Ok(()));
        assert_eq!(
            validate_duration(&durs(&[4, 1]), 2, 5, 3),
            Err(DurationViolation::OutOfRange {
                index: 0,
                value: 4,
                max: 3
            })
        );
    }

    #[test]
    fn validate_duration_reports_length_and_total() {
        assert_eq!(
            validate_duration(&durs(&[1, 1]), 3, 2, 3),
            Err(DurationViolation::Length { expected: 3, got: 2 })
        );
        assert_eq!(
            validate_duration(&durs(&[1, 0]), 2, 1, 3),
            Err(DurationViolation::OutOfRange {
                index: 1,
                value: 0,
                max: 3
            })
        );
        assert_eq!(
            validate_duration(&durs(&[2, 2]), 2, 5, 3),
            Err(DurationViolation::Total { expected: 5, got: 4 })
        );
        let msg = DurationViolation::OutOfRange {
            index: 0,
            value: 4,
            max: 3,
        }
        .to_string();
        assert!(msg.contains("u=1"), "{msg}");
    }

    #[test]
    fn config_defaults_match_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.max_duration, 13);
        assert_eq!(c.grouping, 3);
        assert_eq!(c.code_dim, 32);
        assert_eq!(c.sigma, 0.4);
        assert_eq!(c.sigma_d, 3.0);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.beam_train, 3);
        assert_eq!(c.beam_infer, 10);
        assert_eq!((c.alpha_prior, c.beta_prior), (1.0, 0.0));
        assert_eq!((c.alpha_vq, c.beta_vq), (2.0, 1.0));
        c.validate().unwrap();
    }

    #[test]
    fn config_json_uses_short_field_names() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        for key in [
            "K", "g", "D", "O", "sigma", "sigma_d", "gamma", "alpha_prior", "beta_prior",
            "alpha_vq", "beta_vq", "learning_rate", "beam_train", "beam_infer", "seed", "epochs",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let partial: TrainConfig = serde_json::from_str(r#"{"K": 5, "g": 1}"#).unwrap();
        assert_eq!(partial.max_duration, 5);
        assert_eq!(partial.sigma, 0.4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"k": 5}"#).is_err());
    }

    #[test]
    fn config_rejects_nonpositive_values() {
        let mut c = TrainConfig::default();
        c.beam_train = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.alpha_vq = 0.0;
        c.beta_vq = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn alignment_must_start_with_shift() {
        assert!(Alignment::new(vec![Transition::Blank, Transition::Shift]).is_err());
        assert!(Alignment::new(vec![]).is_err());
        let a = Alignment::new(vec![Transition::Shift, Transition::Blank, Transition::Blank]).unwrap();
        assert!(a.check(1, 3).is_ok());
        assert!(a.check(1, 2).is_err());
        assert!(a.check(2, 3).is_err());
    }

    #[test]
    fn matrix_json_checks_dimensions() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Matrix>(&s).unwrap(), m);
        assert!(serde_json::from_str::<Matrix>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }

    #[test]
    fn token_and_frame_validation() {
        assert!(TokenSequence::new(vec![], 3).is_err());
        assert!(matches!(
            TokenSequence::new(vec![0, 3], 3),
            Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
        ));
        assert!(FrameSequence::new(Matrix::zeros(0, 2)).is_err());
        assert!(FrameSequence::new(Matrix::filled(1, 1, f64::NAN)).is_err());
        assert!(Codebook::new(Matrix::zeros(2, 0)).is_err());
    }
}
