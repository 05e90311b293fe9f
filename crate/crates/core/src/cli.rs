//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for anything that fails
//! validation (bad files, infeasible items, failed checks).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checks;
use crate::data::{gen_corpus, load_corpus, save_corpus, CorpusItem, CorpusSpec};
use crate::training::{align_durations, emission_table, fit, synthesize, Checkpoint, TrainItem};
use crate::trellis::{Trellis, TrellisDump};
use crate::types::{DurationSequence, Matrix, TokenSequence, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "latdur", version, about = "Latent-duration alignment, training and synthesis on synthetic corpora")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known durations
    GenData {
        /// Corpus spec JSON; built-in defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_items: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all components jointly and write a checkpoint
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Training config JSON; missing fields take their defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log, one JSON object per step
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Viterbi durations for every corpus item, scored against the stored truth
    Align {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict durations with the prior and decode frames
    Synthesize {
        /// Space-separated token ids, e.g. "3 1 4 1"
        #[arg(long)]
        tokens: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the forward and backward tables for one corpus item
    DumpTrellis {
        /// 0-based item index
        #[arg(long)]
        item: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant, gradient and oracle suite and print a table
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<Vec<CorpusItem>> {
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn train_items(corpus: &[CorpusItem], config: &TrainConfig) -> anyhow::Result<Vec<TrainItem>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, item)| {
            if item.frames.cols() != config.frame_dim {
                bail!("item {i}: frames have {} columns but O = {}", item.frames.cols(), config.frame_dim);
            }
            Ok(TrainItem {
                tokens: item.token_sequence(config.vocab).with_context(|| format!("item {i}"))?,
                frames: item.frames.clone(),
                truth: Some(item.durations()),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct AlignRecord<'a> {
    item: usize,
    durations: &'a [usize],
    true_durations: &'a [usize],
    accuracy: f64,
}

#[derive(Serialize)]
struct SynthesisOutput {
    tokens: Vec<usize>,
    durations: Vec<usize>,
    frames: Matrix,
}

fn execute(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::GenData {
            spec,
            seed,
            n_items,
            noise_std,
            out,
        } => {
            let mut spec: CorpusSpec = match spec {
                Some(path) => read_json(&path)?,
                None => CorpusSpec::default(),
            };
            if let Some(n) = n_items {
                spec.n_items = n;
            }
            if let Some(s) = noise_std {
                spec.noise_std = s;
            }
            let items = gen_corpus(&spec, seed)?;
            save_corpus(&out, &items)?;
            println!("wrote {} items to {}", items.len(), out.display());
        }
        Command::Train {
            corpus,
            config,
            out,
            log,
            seed,
            epochs,
            learning_rate,
            batch_size,
        } => {
            let mut config: TrainConfig = match config {
                Some(path) => read_json(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = seed {
                config.seed = v;
            }
            if let Some(v) = epochs {
                config.epochs = v;
            }
            if let Some(v) = learning_rate {
                config.learning_rate = v;
            }
            if let Some(v) = batch_size {
                config.batch_size = v;
            }
            config.validate()?;
            let items = train_items(&load(&corpus)?, &config)?;
            let mut log_out = match &log {
                Some(path) => Some(BufWriter::new(File::create(path)?)),
                None => None,
            };
            let mut ckpt = Checkpoint::new(config)?;
            let mut last = None;
            let mut skipped = 0;
            fit(&mut ckpt, &items, |entry| {
                if let Some(w) = log_out.as_mut() {
                    serde_json::to_writer(&mut *w, entry)?;
                    w.write_all(b"\n")?;
                }
                skipped += entry.skipped;
                last = Some(entry.clone());
                Ok(())
            })?;
            if let Some(mut w) = log_out {
                w.flush()?;
            }
            write_json(&out, &ckpt)?;
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} infeasible item visits");
            }
            if let Some(e) = last {
                println!("step {} total {:.4} ctc_nll {:.4}", e.step, e.total, e.ctc_nll);
            }
        }
        Command::Align { corpus, ckpt, out } => {
            let ckpt: Checkpoint = read_json(&ckpt)?;
            let items = load(&corpus)?;
            let mut w = BufWriter::new(File::create(&out)?);
            let (mut correct, mut total) = (0usize, 0usize);
            for (i, item) in items.iter().enumerate() {
                let y = item.token_sequence(ckpt.config.vocab).with_context(|| format!("item {i}"))?;
                let l = align_durations(&ckpt.params, &y, &item.frames).with_context(|| format!("item {i}"))?;
                let truth = item.durations();
                let hits = l.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
                correct += hits;
                total += truth.len();
                let record = AlignRecord {
                    item: i,
                    durations: l.as_slice(),
                    true_durations: truth.as_slice(),
                    accuracy: l.accuracy_against(&truth),
                };
                serde_json::to_writer(&mut w, &record)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            let acc = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
            println!("duration accuracy {acc:.4} over {total} tokens");
        }
        Command::Synthesize { tokens, ckpt, out } => {
            let ckpt: Checkpoint = read_json(&ckpt)?;
            let ids = tokens
                .split_whitespace()
                .map(|s| s.parse::<usize>().with_context(|| format!("bad token id {s:?}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let y = TokenSequence::new(ids, ckpt.config.vocab)?;
            let (l, frames): (DurationSequence, Matrix) = synthesize(&y, &ckpt.params)?;
            println!("durations {l}, {} frames", frames.rows());
            write_json(
                &out,
                &SynthesisOutput {
                    tokens: y.as_slice().to_vec(),
                    durations: l.as_slice().to_vec(),
                    frames,
                },
            )?;
        }
        Command::DumpTrellis {
            item,
            corpus,
            ckpt,
            out,
        } => {
            let ckpt: Checkpoint = read_json(&ckpt)?;
            let items = load(&corpus)?;
            let Some(entry) = items.get(item) else {
                bail!("item {item} out of range: corpus has {} items", items.len());
            };
            let y = entry.token_sequence(ckpt.config.vocab)?;
            let table = emission_table(&ckpt.params, &entry.frames)?;
            let trellis = Trellis::new(&table, &y, ckpt.config.max_duration)?;
            write_json(&out, &TrellisDump::from(&trellis))?;
            println!("log-marginal {:.6}", trellis.log_marginal());
        }
        Command::Check { seed } => {
            let results = checks::run_all(seed)?;
            let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
            let mut failed = 0;
            for r in &results {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                println!("{mark}  {:width$}  {}", r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} of {} checks passed", results.len() - failed, results.len());
            if failed > 0 {
                return Ok(EXIT_INVALID);
            }
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["latdur", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["latdur", "train"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["latdur", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_file_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.json");
        let code = run([
            "latdur",
            "synthesize",
            "--tokens",
            "1 2",
            "--ckpt",
            "/nonexistent/ckpt.json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_INVALID);
    }
}
