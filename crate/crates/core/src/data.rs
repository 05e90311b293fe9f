//! Synthetic corpora with known durations, stored as JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DurationSequence, Matrix, TokenSequence};

/// Generator settings. Field names follow the config file convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "O")]
    pub frame_dim: usize,
    pub n_items: usize,
    /// Inclusive bounds on the number of tokens per item.
    #[serde(rename = "U_range")]
    pub token_range: [usize; 2],
    #[serde(rename = "K")]
    pub max_duration: usize,
    #[serde(rename = "g")]
    pub grouping: usize,
    /// Duration of each token id in super-frames. When absent, token `v`
    /// lasts `1 + (v mod K)`.
    pub duration_profile: Option<Vec<usize>>,
    pub noise_std: f64,
    /// Seed for the token prototypes, kept apart from the item seed so that
    /// train and test corpora can share one acoustic inventory.
    pub prototype_seed: u64,
    /// Forbid the same token twice in a row. Without this, the boundary
    /// between two copies of one token has no acoustic evidence.
    pub no_adjacent_repeat: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab: 8,
            frame_dim: 8,
            n_items: 200,
            token_range: [3, 8],
            max_duration: 5,
            grouping: 1,
            duration_profile: None,
            noise_std: 0.3,
            prototype_seed: 0,
            no_adjacent_repeat: true,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("V", self.vocab),
            ("O", self.frame_dim),
            ("K", self.max_duration),
            ("g", self.grouping),
        ] {
            if v == 0 {
                return Err(Error::InvalidValue(format!("{name} must be >= 1")));
            }
        }
        let [lo, hi] = self.token_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidValue(format!("U_range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
        }
        if self.no_adjacent_repeat && self.vocab < 2 && hi > 1 {
            return Err(Error::InvalidValue("no_adjacent_repeat needs V >= 2 for sequences longer than one token".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidValue(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if let Some(profile) = &self.duration_profile {
            if profile.len() != self.vocab {
                return Err(Error::shape("duration_profile", self.vocab, profile.len()));
            }
            if let Some((v, d)) = profile.iter().enumerate().find(|(_, d)| **d < 1 || **d > self.max_duration) {
                return Err(Error::InvalidValue(format!(
                    "duration_profile[{v}] = {d} is outside [1, {}]",
                    self.max_duration
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth duration of token `v`.
    pub fn duration_of(&self, v: usize) -> usize {
        match &self.duration_profile {
            Some(profile) => profile[v],
            None => 1 + v % self.max_duration,
        }
    }

    /// One `N(0, I)` prototype frame per token, from `prototype_seed`.
    pub fn prototypes(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let data = (0..self.vocab * self.frame_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(self.vocab, self.frame_dim, data).expect("prototype shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    pub tokens: Vec<usize>,
    pub frames: Matrix,
    /// Per-token durations in super-frames. Read only by evaluation.
    pub true_durations: Vec<usize>,
}

impl CorpusItem {
    pub fn token_sequence(&self, vocab: usize) -> Result<TokenSequence> {
        TokenSequence::new(self.tokens.clone(), vocab)
    }

    pub fn durations(&self) -> DurationSequence {
        DurationSequence::new(self.true_durations.clone())
    }
}

pub fn gen_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let prototypes = spec.prototypes();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = spec.token_range;
    let mut items = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let n = rng.random_range(lo..=hi);
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        while tokens.len() < n {
            let v = rng.random_range(0..spec.vocab);
            if spec.no_adjacent_repeat && tokens.last() == Some(&v) {
                continue;
            }
            tokens.push(v);
        }
        let true_durations: Vec<usize> = tokens.iter().map(|&v| spec.duration_of(v)).collect();
        let total = true_durations.iter().sum::<usize>() * spec.grouping;
        let mut data = Vec::with_capacity(total * spec.frame_dim);
        for (&v, &d) in tokens.iter().zip(&true_durations) {
            for _ in 0..d * spec.grouping {
                data.extend(prototypes.row(v).iter().map(|p| p + noise.sample(&mut rng)));
            }
        }
        items.push(CorpusItem {
            tokens,
            frames: Matrix::from_vec(total, spec.frame_dim, data)?,
            true_durations,
        });
    }
    Ok(items)
}

pub fn write_corpus<W: Write>(items: &[CorpusItem], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses JSON lines; blank lines are ignored, and errors carry the 1-based
/// line number.
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| Error::Parse { line: i + 1, message };
        let item: CorpusItem = serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
        if item.tokens.is_empty() {
            return Err(parse_error("item has no tokens".into()));
        }
        if item.tokens.len() != item.true_durations.len() {
            return Err(parse_error(format!(
                "{} tokens but {} durations",
                item.tokens.len(),
                item.true_durations.len()
            )));
        }
        if item.frames.rows() == 0 || !item.frames.is_finite() {
            return Err(parse_error("frames must be non-empty and finite".into()));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn save_corpus(path: &Path, items: &[CorpusItem]) -> Result<()> {
    write_corpus(items, BufWriter::new(File::create(path)?))
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    read_corpus(BufReader::new(File::open(path)?))
}
