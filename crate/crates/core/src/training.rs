//! Joint training of the aligner, the latent nets, the decoder and the
//! codebook, plus the prior-driven inference path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{decoder_nll, prior_kl, prior_logits, total_objective, vq_kl};
use crate::models::{
    acoustic_encoder, backprop_decoder, backprop_encoder, backprop_latent, generate_frames, latentnet_phi, run_decoder,
    run_latent, LatentKind, ModelParams, ModelSpec,
};
use crate::numeric::log_sum_exp;
use crate::seq_ops::{aggregate, group_frames, pad_frames, upsample, upsample_tokens};
use crate::trellis::{alignment_to_duration, marginal_gradient, nbest_beam, viterbi_best, Dims, EmissionTable};
use crate::types::{validate_duration, DurationSequence, LossBreakdown, Matrix, PosteriorWeighting, TokenSequence, TrainConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "adam_update",
            n,
            format!("grads {}, m {}, v {}", grads.len(), state.m.len(), state.v.len()),
        ));
    }
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// A training pair. `truth` is only used to report duration accuracy.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub tokens: TokenSequence,
    pub frames: Matrix,
    pub truth: Option<DurationSequence>,
}

/// Loss and gradient of a single item.
#[derive(Clone, Debug)]
pub struct ItemResult {
    pub losses: LossBreakdown,
    /// Top beam hypothesis.
    pub durations: DurationSequence,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// Mean over the items that were used.
    pub losses: LossBreakdown,
    pub used: usize,
    pub skipped: usize,
    /// Fraction of tokens whose top-hypothesis duration equals the truth, over
    /// items that carry one.
    pub duration_accuracy: Option<f64>,
}

fn weights_for(log_scores: &[f64], mode: PosteriorWeighting) -> Vec<f64> {
    match mode {
        PosteriorWeighting::Best => {
            let mut w = vec![0.0; log_scores.len()];
            w[0] = 1.0;
            w
        }
        PosteriorWeighting::SoftmaxNbest => {
            let z = log_sum_exp(log_scores);
            log_scores.iter().map(|s| (s - z).exp()).collect()
        }
    }
}

/// Objective value for one item, accumulating its gradient into `grads`.
/// Errors with [`Error::Infeasible`] when the item has no valid alignment.
pub fn item_gradient(p: &ModelParams, config: &TrainConfig, item: &TrainItem, grads: &mut [f64]) -> Result<ItemResult> {
    let (g, k) = (config.grouping, config.max_duration);
    let y = &item.tokens;
    let tokens = y.as_slice();
    let grouped = group_frames(&item.frames, g)?;
    let dims = Dims {
        frames: grouped.super_frames.rows(),
        tokens: y.len(),
        max_duration: k,
    };
    if !dims.is_feasible() {
        return Err(Error::Infeasible {
            frames: dims.frames,
            tokens: dims.tokens,
            max_duration: k,
        });
    }
    let frames = pad_frames(&item.frames, g);

    // Aligner term. The log-marginal gradient is the posterior occupancy.
    let enc = acoustic_encoder(p, &grouped.super_frames)?;
    let mg = marginal_gradient(&enc.table, y, k)?;
    let scale = -config.gamma;
    let d_trans = scaled(&mg.log_trans, scale);
    let d_emit = scaled(&mg.log_emit, scale);
    backprop_encoder(p, &enc, &d_trans, &d_emit, grads)?;

    let hyps = nbest_beam(&enc.table, y, k, config.beam_train)?;
    let scores: Vec<f64> = hyps.iter().map(|h| h.log_score).collect();
    let weights = weights_for(&scores, config.posterior_weighting);

    let cb = p.codebook()?;
    let codebook_slot = p.layout().codebook;
    let (prior_sg, vq_sg) = (config.prior_sg()?, config.vq_sg()?);
    let mut losses = LossBreakdown::default();
    for (hyp, &w) in hyps.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let l = &hyp.durations;
        validate_duration(l, y.len(), dims.frames, k)?;
        let mut codes = Matrix::zeros(y.len(), cb.dim());
        for (u, d) in l.iter().enumerate() {
            codes.row_mut(u).copy_from_slice(cb.codeword(d));
        }

        let xbar = aggregate(&frames, l, g)?;
        let psi = run_latent(p, LatentKind::Psi, tokens, &codes, Some(&xbar))?;
        let vq = vq_kl(&psi.output, &cb, l, config.sigma, vq_sg)?;
        backprop_latent(p, &psi, &scaled(&vq.grad_input, w), grads)?;
        accumulate(codebook_slot.of_mut(grads), vq.grad_codebook.as_slice(), w);

        let phi = run_latent(p, LatentKind::Phi, tokens, &codes, None)?;
        let prior = prior_kl(&phi.output, &cb, l, prior_sg)?;
        backprop_latent(p, &phi, &scaled(&prior.grad_input, w), grads)?;
        accumulate(codebook_slot.of_mut(grads), prior.grad_codebook.as_slice(), w);

        let z_hat = upsample(&codes, l, g)?;
        let frame_tokens = upsample_tokens(tokens, l, g)?;
        let dec = run_decoder(p, &frames, &z_hat, &frame_tokens)?;
        let (nll, grad_mu) = decoder_nll(&frames, &dec.mu, config.sigma_d)?;
        backprop_decoder(p, &dec, &scaled(&grad_mu, w), grads)?;

        losses.decoder_nll += w * nll;
        losses.prior_kl += w * prior.value;
        losses.vq_kl += w * vq.value;
    }
    let losses = total_objective(losses.decoder_nll, losses.prior_kl, losses.vq_kl, -mg.log_marginal, config.gamma)?;
    Ok(ItemResult {
        losses,
        durations: hyps[0].durations.clone(),
    })
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    let data = m.as_slice().iter().map(|v| v * s).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
}

fn accumulate(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

/// Averages item gradients over the batch and applies one Adam update.
/// Infeasible items are skipped and counted; other errors abort the step.
pub fn train_step(
    batch: &[TrainItem],
    params: &mut ModelParams,
    config: &TrainConfig,
    state: &mut AdamState,
) -> Result<StepReport> {
    let mut grads = vec![0.0; params.len()];
    let mut sum = LossBreakdown::default();
    let (mut used, mut skipped) = (0, 0);
    let (mut correct, mut counted) = (0usize, 0usize);
    for item in batch {
        let result = match item_gradient(params, config, item, &mut grads) {
            Ok(r) => r,
            Err(Error::Infeasible { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        used += 1;
        sum.decoder_nll += result.losses.decoder_nll;
        sum.prior_kl += result.losses.prior_kl;
        sum.vq_kl += result.losses.vq_kl;
        sum.ctc_nll += result.losses.ctc_nll;
        sum.total += result.losses.total;
        if let Some(truth) = &item.truth {
            counted += truth.len();
            correct += result.durations.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
        }
    }
    let losses = if used > 0 {
        let n = used as f64;
        for g in grads.iter_mut() {
            *g /= n;
        }
        adam_update(
            params.values_mut(),
            &grads,
            state,
            config.learning_rate,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
        LossBreakdown {
            decoder_nll: sum.decoder_nll / n,
            prior_kl: sum.prior_kl / n,
            vq_kl: sum.vq_kl / n,
            ctc_nll: sum.ctc_nll / n,
            total: sum.total / n,
        }
    } else {
        LossBreakdown::default()
    };
    Ok(StepReport {
        losses,
        used,
        skipped,
        duration_accuracy: (counted > 0).then(|| correct as f64 / counted as f64),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub decoder_nll: f64,
    pub prior_kl: f64,
    pub vq_kl: f64,
    pub ctc_nll: f64,
    pub total: f64,
    pub duration_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub skipped: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
}

impl Checkpoint {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(ModelSpec::from_config(&config), config.seed)?;
        let optimizer = AdamState::new(params.len());
        Ok(Checkpoint {
            config,
            params,
            optimizer,
        })
    }
}

/// Runs `config.epochs` passes over `items` in batches of `config.batch_size`,
/// reshuffled each epoch from `config.seed`. `on_step` sees every log entry as
/// it is produced.
pub fn fit(
    ckpt: &mut Checkpoint,
    items: &[TrainItem],
    mut on_step: impl FnMut(&LogEntry) -> Result<()>,
) -> Result<()> {
    let config = ckpt.config.clone();
    config.validate()?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let report = train_step(&batch, &mut ckpt.params, &config, &mut ckpt.optimizer)?;
            let entry = LogEntry {
                step: ckpt.optimizer.step,
                decoder_nll: report.losses.decoder_nll,
                prior_kl: report.losses.prior_kl,
                vq_kl: report.losses.vq_kl,
                ctc_nll: report.losses.ctc_nll,
                total: report.losses.total,
                duration_accuracy: report.duration_accuracy,
                skipped: report.skipped,
            };
            on_step(&entry)?;
        }
    }
    Ok(())
}

/// Acoustic encoder output for an utterance, grouped by `g`.
pub fn emission_table(p: &ModelParams, frames: &Matrix) -> Result<EmissionTable> {
    let grouped = group_frames(frames, p.spec().grouping)?;
    Ok(acoustic_encoder(p, &grouped.super_frames)?.table)
}

/// Best alignment under the trained aligner, as durations.
pub fn align_durations(p: &ModelParams, y: &TokenSequence, frames: &Matrix) -> Result<DurationSequence> {
    let table = emission_table(p, frames)?;
    let (alignment, _) = viterbi_best(&table, y, p.spec().codebook_size)?;
    alignment_to_duration(&alignment)
}

/// Greedy prior decoding: each token's duration is the most likely codeword
/// index, and that codeword is fed back. Ties go to the smaller index.
pub fn infer_durations(y: &TokenSequence, p: &ModelParams) -> Result<DurationSequence> {
    let cb = p.codebook()?;
    let mut hidden = vec![0.0; p.spec().hidden_dim];
    let mut z_prev = p.layout().phi.start.of(p.values()).to_vec();
    let mut durations = Vec::with_capacity(y.len());
    for &token in y.as_slice() {
        let step = latentnet_phi(p, &hidden, &z_prev, token)?;
        let logits = prior_logits(&step.output, &cb)?;
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        let l = best + 1;
        durations.push(l);
        z_prev = cb.codeword(l).to_vec();
        hidden = step.hidden;
    }
    Ok(DurationSequence::new(durations))
}

/// Predicted durations and free-running decoder frames; the frame count is
/// `g * sum(durations)`.
pub fn synthesize(y: &TokenSequence, p: &ModelParams) -> Result<(DurationSequence, Matrix)> {
    let l = infer_durations(y, p)?;
    let cb = p.codebook()?;
    let mut codes = Matrix::zeros(y.len(), cb.dim());
    for (u, d) in l.iter().enumerate() {
        codes.row_mut(u).copy_from_slice(cb.codeword(d));
    }
    let g = p.spec().grouping;
    let z_hat = upsample(&codes, &l, g)?;
    let frame_tokens = upsample_tokens(y.as_slice(), &l, g)?;
    let frames = generate_frames(p, &z_hat, &frame_tokens)?;
    Ok((l, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusSpec};
    use crate::models::ParamGroup;

    fn small_config() -> TrainConfig {
        TrainConfig {
            max_duration: 3,
            grouping: 1,
            code_dim: 3,
            frame_dim: 2,
            vocab: 3,
            embed_dim: 2,
            hidden_dim: 4,
            batch_size: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn small_items(config: &TrainConfig, n: usize, seed: u64) -> Vec<TrainItem> {
        let spec = CorpusSpec {
            vocab: config.vocab,
            frame_dim: config.frame_dim,
            max_duration: config.max_duration,
            grouping: config.grouping,
            n_items: n,
            token_range: [2, 3],
            ..CorpusSpec::default()
        };
        gen_corpus(&spec, seed)
            .unwrap()
            .into_iter()
            .map(|it| TrainItem {
                tokens: it.token_sequence(config.vocab).unwrap(),
                truth: Some(it.durations()),
                frames: it.frames,
            })
            .collect()
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.0; 3], &mut s, 5e-5, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4);
        let g = [3.0, -1e-3, 250.0, -7.0];
        adam_update(&mut p, &g, &mut s, 5e-5, 0.9, 0.999, 1e-8).unwrap();
        for (dp, g) in p.iter().zip(g) {
            assert!(dp.abs() <= 5e-5 * (1.0 + 1e-6));
            assert!(dp.abs() > 4.9e-5);
            assert_eq!(dp.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(adam_update(&mut [0.0; 3], &[0.0; 3], &mut s, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let config = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let mut ckpt = Checkpoint::new(config.clone()).unwrap();
        let before = ckpt.params.clone();
        let items = small_items(&config, 2, 0);
        let report = train_step(&items, &mut ckpt.params, &config, &mut ckpt.optimizer).unwrap();
        assert_eq!(report.used, 2);
        assert_eq!(ckpt.params, before);
    }

    #[test]
    fn infeasible_items_are_skipped() {
        let config = small_config();
        let mut ckpt = Checkpoint::new(config.clone()).unwrap();
        let mut items = small_items(&config, 1, 0);
        items.push(TrainItem {
            tokens: TokenSequence::new(vec![0, 1], 3).unwrap(),
            frames: Matrix::zeros(9, 2),
            truth: None,
        });
        let report = train_step(&items, &mut ckpt.params, &config, &mut ckpt.optimizer).unwrap();
        assert_eq!((report.used, report.skipped), (1, 1));
    }

    #[test]
    fn elbo_gradients_do_not_reach_the_aligner() {
        let config = TrainConfig {
            gamma: 0.0,
            ..small_config()
        };
        let p = ModelParams::init(ModelSpec::from_config(&config), 1).unwrap();
        let items = small_items(&config, 1, 3);
        let mut grads = vec![0.0; p.len()];
        item_gradient(&p, &config, &items[0], &mut grads).unwrap();
        let lambda = p.layout().group_range(ParamGroup::Lambda);
        assert!(grads[lambda].iter().all(|g| *g == 0.0));
        assert!(grads.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn codebook_is_untouched_when_both_beta_coefficients_are_zero() {
        // beta = 0 stops every distance at the codeword, so neither the
        // quadratic prior term nor anything else moves the codebook.
        let config = TrainConfig {
            alpha_vq: 1.0,
            beta_vq: 0.0,
            ..small_config()
        };
        let p = ModelParams::init(ModelSpec::from_config(&config), 2).unwrap();
        let items = small_items(&config, 1, 5);
        let mut grads = vec![0.0; p.len()];
        item_gradient(&p, &config, &items[0], &mut grads).unwrap();
        let got = p.layout().codebook.of(&grads);
        assert!(got.iter().all(|g| *g == 0.0), "{got:?}");
    }

    #[test]
    fn small_run_reduces_loss_with_frozen_aligner() {
        let config = TrainConfig {
            gamma: 0.0,
            epochs: 60,
            batch_size: 1,
            ..small_config()
        };
        let items = small_items(&config, 1, 8);
        let mut ckpt = Checkpoint::new(config).unwrap();
        let mut totals = Vec::new();
        fit(&mut ckpt, &items, |e| {
            totals.push(e.total);
            Ok(())
        })
        .unwrap();
        assert_eq!(totals.len(), 60);
        assert!(totals[59] < totals[0], "{} vs {}", totals[59], totals[0]);
    }

    #[test]
    fn fit_is_deterministic() {
        let config = TrainConfig {
            epochs: 3,
            ..small_config()
        };
        let items = small_items(&config, 5, 1);
        let run = || {
            let mut ckpt = Checkpoint::new(config.clone()).unwrap();
            let mut log = Vec::new();
            fit(&mut ckpt, &items, |e| {
                log.push(e.clone());
                Ok(())
            })
            .unwrap();
            (serde_json::to_string(&ckpt).unwrap(), serde_json::to_string(&log).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_codeword_gives_unit_durations() {
        let config = TrainConfig {
            max_duration: 1,
            ..small_config()
        };
        let p = ModelParams::init(ModelSpec::from_config(&config), 0).unwrap();
        let y = TokenSequence::new(vec![0, 2, 1, 1], 3).unwrap();
        assert_eq!(infer_durations(&y, &p).unwrap().as_slice(), &[1, 1, 1, 1]);
    }

    #[test]
    fn identical_codewords_tie_to_smallest_index() {
        let config = small_config();
        let mut p = ModelParams::init(ModelSpec::from_config(&config), 0).unwrap();
        let slot = p.layout().codebook;
        for v in slot.of_mut(p.values_mut()) {
            *v = 0.25;
        }
        let y = TokenSequence::new(vec![0, 2, 1], 3).unwrap();
        assert_eq!(infer_durations(&y, &p).unwrap().as_slice(), &[1, 1, 1]);
    }

    #[test]
    fn synthesis_length_matches_durations() {
        let config = TrainConfig {
            grouping: 2,
            ..small_config()
        };
        let p = ModelParams::init(ModelSpec::from_config(&config), 4).unwrap();
        let y = TokenSequence::new(vec![2, 0, 1, 0], 3).unwrap();
        let (l, frames) = synthesize(&y, &p).unwrap();
        assert_eq!(frames.rows(), 2 * l.total());
        assert_eq!(frames.cols(), 2);
        assert_eq!(synthesize(&y, &p).unwrap().1, frames);
    }
}
