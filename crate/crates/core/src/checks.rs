//! Self-check suite behind the `check` subcommand: trellis results against
//! brute-force enumeration, analytic gradients against finite differences,
//! closed-form identities and constraint invariants on random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{decoder_nll, prior_kl, prior_logits, sg_sqdist, vq_kl, vq_kl_alt, SgCoeffs};
use crate::models::{
    acoustic_encoder, backprop_decoder, backprop_encoder, backprop_latent, finite_diff_check, finite_diff_gradient,
    max_relative_error, run_decoder, run_latent, LatentKind, ModelParams, ModelSpec,
};
use crate::numeric::log_sum_exp;
use crate::trellis::{
    alignment_to_duration, duration_to_alignment, enumerate_valid, log_likelihood, marginal_gradient, nbest_beam,
    path_score, viterbi_best, EmissionTable,
};
use crate::types::{validate_duration, Codebook, DurationSequence, Matrix, TokenSequence};

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Random normalized emission table with logits uniform in `[-spread, spread)`.
pub fn random_table(rng: &mut impl Rng, frames: usize, vocab: usize, spread: f64) -> EmissionTable {
    let mut rows = |cols: usize| {
        let mut m = Matrix::zeros(frames, cols);
        for t in 0..frames {
            let row = m.row_mut(t);
            row.iter_mut().for_each(|v| *v = rng.random_range(-spread..spread));
            crate::numeric::log_softmax_in_place(row);
        }
        m
    };
    let trans = rows(2);
    let emit = rows(vocab);
    EmissionTable::new(trans, emit).expect("normalized rows")
}

/// A random feasible `(table, tokens, K)` with `T' <= max_frames`,
/// `U <= max_tokens`, `K <= max_k`.
pub fn random_instance(
    rng: &mut impl Rng,
    max_frames: usize,
    max_tokens: usize,
    max_k: usize,
    spread: f64,
) -> (EmissionTable, TokenSequence, usize) {
    loop {
        let k = rng.random_range(1..=max_k);
        let u = rng.random_range(1..=max_tokens);
        let frames = rng.random_range(1..=max_frames);
        if frames < u || frames > u * k {
            continue;
        }
        let vocab = rng.random_range(1..=4);
        let tokens = (0..u).map(|_| rng.random_range(0..vocab)).collect();
        let y = TokenSequence::new(tokens, vocab).expect("ids in range");
        return (random_table(rng, frames, vocab, spread), y, k);
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Exact marginal, Viterbi and N-best against enumeration of every valid
/// duration sequence.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures) = (0.0f64, 0usize);
    for _ in 0..instances {
        let (em, y, k) = random_instance(&mut rng, 8, 4, 4, 2.0);
        let all = enumerate_valid(em.frames(), y.len(), k)?;
        let mut scored: Vec<(f64, DurationSequence)> = Vec::with_capacity(all.len());
        for l in all {
            scored.push((path_score(&em, &y, &l)?, l));
        }
        let brute: f64 = scored.iter().map(|(s, _)| s.exp()).sum();
        let exact = log_likelihood(&em, &y, k)?.exp();
        let rel = (exact - brute).abs() / brute;
        worst = worst.max(rel);
        let mut ok = rel <= 1e-10;

        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (alignment, score) = viterbi_best(&em, &y, k)?;
        ok &= alignment_to_duration(&alignment)? == scored[0].1 && (score - scored[0].0).abs() <= 1e-10;

        let hyps = nbest_beam(&em, &y, k, scored.len())?;
        ok &= hyps.len() == scored.len();
        ok &= hyps
            .iter()
            .zip(&scored)
            .all(|(h, (s, l))| h.durations == *l && (h.log_score - s).abs() <= 1e-10 * s.abs().max(1.0));
        if !ok {
            failures += 1;
        }
    }
    Ok(result(
        "trellis vs enumeration",
        failures == 0,
        format!("{instances} instances, {failures} mismatches, worst marginal rel err {worst:.2e}"),
    ))
}

struct GradReport {
    name: &'static str,
    worst: f64,
    tol: f64,
}

fn sg_points(rng: &mut impl Rng, coeffs: (f64, f64)) -> Result<f64> {
    let sg = SgCoeffs::new(coeffs.0, coeffs.1)?;
    let n = rng.random_range(1..6);
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let got = sg_sqdist(&a, &b, sg)?;
    let sq = |x: &[f64], z: &[f64]| x.iter().zip(z).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let num_a = finite_diff_gradient(|x| coeffs.0 * sq(x, &b), &a, FD_STEP);
    let num_b = finite_diff_gradient(|z| coeffs.1 * sq(&a, z), &b, FD_STEP);
    Ok(max_relative_error(&got.grad_a, &num_a).max(max_relative_error(&got.grad_b, &num_b)))
}

fn codebook_term_point(rng: &mut impl Rng, quantization: bool) -> Result<f64> {
    let (u, k, d) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4));
    let seq = random_matrix(rng, u, d, 1.0);
    let cbm = random_matrix(rng, k, d, 1.0);
    let l = DurationSequence::new((0..u).map(|_| rng.random_range(1..=k)).collect());
    let sg = SgCoeffs::new(1.0, 1.0)?;
    let eval = |s: &Matrix, c: &Matrix| -> Result<crate::losses::CodebookTerm> {
        let cb = Codebook::new(c.clone())?;
        if quantization {
            vq_kl(s, &cb, &l, 0.4, sg)
        } else {
            prior_kl(s, &cb, &l, sg)
        }
    };
    let got = eval(&seq, &cbm)?;
    let num_s = finite_diff_gradient(
        |x| eval(&Matrix::from_vec(u, d, x.to_vec()).unwrap(), &cbm).unwrap().value,
        seq.as_slice(),
        FD_STEP,
    );
    let num_c = finite_diff_gradient(
        |x| eval(&seq, &Matrix::from_vec(k, d, x.to_vec()).unwrap()).unwrap().value,
        cbm.as_slice(),
        FD_STEP,
    );
    Ok(max_relative_error(got.grad_input.as_slice(), &num_s)
        .max(max_relative_error(got.grad_codebook.as_slice(), &num_c)))
}

fn decoder_nll_point(rng: &mut impl Rng) -> Result<f64> {
    let (t, o) = (rng.random_range(1..5), rng.random_range(1..4));
    let x = random_matrix(rng, t, o, 2.0);
    let mu = random_matrix(rng, t, o, 2.0);
    let sigma = rng.random_range(0.5..3.0);
    let (_, grad) = decoder_nll(&x, &mu, sigma)?;
    let num = finite_diff_gradient(
        |m| decoder_nll(&x, &Matrix::from_vec(t, o, m.to_vec()).unwrap(), sigma).unwrap().0,
        mu.as_slice(),
        FD_STEP,
    );
    Ok(max_relative_error(grad.as_slice(), &num))
}

fn marginal_gradient_point(rng: &mut impl Rng) -> Result<f64> {
    // Moderate logits keep the log-likelihood small in magnitude, so that
    // central differences resolve posterior entries down to ~1e-5.
    let (em, y, k) = random_instance(rng, 8, 4, 4, 1.0);
    let (trans, emit) = em.clone().into_parts();
    let got = marginal_gradient(&em, &y, k)?;
    let n_trans = trans.as_slice().len();
    let mut flat = trans.as_slice().to_vec();
    flat.extend_from_slice(emit.as_slice());
    let f = |x: &[f64]| {
        let t = Matrix::from_vec(trans.rows(), 2, x[..n_trans].to_vec()).unwrap();
        let e = Matrix::from_vec(emit.rows(), emit.cols(), x[n_trans..].to_vec()).unwrap();
        log_likelihood(&EmissionTable::from_scores(t, e).unwrap(), &y, k).unwrap()
    };
    let num = finite_diff_gradient(f, &flat, FD_STEP);
    let mut analytic = got.log_trans.as_slice().to_vec();
    analytic.extend_from_slice(got.log_emit.as_slice());
    Ok(max_relative_error(&analytic, &num))
}

fn small_spec(rng: &mut impl Rng) -> ModelSpec {
    ModelSpec {
        vocab: rng.random_range(2..5),
        embed_dim: rng.random_range(1..4),
        hidden_dim: rng.random_range(1..5),
        frame_dim: rng.random_range(1..4),
        code_dim: rng.random_range(1..4),
        grouping: rng.random_range(1..3),
        codebook_size: rng.random_range(2..5),
    }
}

fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
    m.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

fn model_point(rng: &mut impl Rng, which: usize) -> Result<f64> {
    let spec = small_spec(rng);
    let p = ModelParams::init(spec, rng.random())?;
    let u = rng.random_range(1..5);
    let tokens: Vec<usize> = (0..u).map(|_| rng.random_range(0..spec.vocab)).collect();
    let err = match which {
        0 | 1 => {
            let kind = if which == 0 { LatentKind::Phi } else { LatentKind::Psi };
            let codes = random_matrix(rng, u, spec.code_dim, 1.0);
            let xbar = random_matrix(rng, u, spec.frame_dim, 1.0);
            let w = random_matrix(rng, u, spec.code_dim, 1.0);
            let x = (kind == LatentKind::Psi).then_some(&xbar);
            finite_diff_check(
                |v| {
                    let q = p.with_values(v.to_vec()).unwrap();
                    let trace = run_latent(&q, kind, &tokens, &codes, x).unwrap();
                    let mut g = vec![0.0; v.len()];
                    backprop_latent(&q, &trace, &w, &mut g).unwrap();
                    (weighted_sum(&trace.output, &w), g)
                },
                p.values(),
                FD_STEP,
            )
        }
        2 => {
            let frames = random_matrix(rng, u, spec.frame_dim, 1.0);
            let codes = random_matrix(rng, u, spec.code_dim, 1.0);
            let w = random_matrix(rng, u, spec.frame_dim, 1.0);
            finite_diff_check(
                |v| {
                    let q = p.with_values(v.to_vec()).unwrap();
                    let trace = run_decoder(&q, &frames, &codes, &tokens).unwrap();
                    let mut g = vec![0.0; v.len()];
                    backprop_decoder(&q, &trace, &w, &mut g).unwrap();
                    (weighted_sum(&trace.mu, &w), g)
                },
                p.values(),
                FD_STEP,
            )
        }
        _ => {
            let k = spec.codebook_size;
            let frames = rng.random_range(u..=u * k);
            let y = TokenSequence::new(tokens.clone(), spec.vocab)?;
            let supers = random_matrix(rng, frames, spec.grouping * spec.frame_dim, 1.5);
            finite_diff_check(
                |v| {
                    let q = p.with_values(v.to_vec()).unwrap();
                    let trace = acoustic_encoder(&q, &supers).unwrap();
                    let mg = marginal_gradient(&trace.table, &y, k).unwrap();
                    let mut g = vec![0.0; v.len()];
                    backprop_encoder(&q, &trace, &mg.log_trans, &mg.log_emit, &mut g).unwrap();
                    (mg.log_marginal, g)
                },
                p.values(),
                FD_STEP,
            )
        }
    };
    Ok(err)
}

/// Every analytic gradient against central differences at `points` random
/// points each.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<GradReport> = Vec::new();
    let mut run = |name: &'static str, tol: f64, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>| -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max(f(&mut rng)?);
        }
        reports.push(GradReport { name, worst, tol });
        Ok(())
    };
    run("sg_sqdist (1, 0)", 1e-5, &mut |r| sg_points(r, (1.0, 0.0)))?;
    run("sg_sqdist (0, 1)", 1e-5, &mut |r| sg_points(r, (0.0, 1.0)))?;
    run("sg_sqdist (2, 1)", 1e-5, &mut |r| sg_points(r, (2.0, 1.0)))?;
    run("decoder_nll", 1e-5, &mut decoder_nll_point)?;
    run("prior_kl", 1e-5, &mut |r| codebook_term_point(r, false))?;
    run("vq_kl", 1e-5, &mut |r| codebook_term_point(r, true))?;
    run("marginal_gradient", 1e-5, &mut marginal_gradient_point)?;
    run("latentnet_phi", 1e-5, &mut |r| model_point(r, 0))?;
    run("latentnet_psi", 1e-5, &mut |r| model_point(r, 1))?;
    run("decoder", 1e-5, &mut |r| model_point(r, 2))?;
    run("encoder through log-marginal", 1e-4, &mut |r| model_point(r, 3))?;
    Ok(reports
        .into_iter()
        .map(|g| {
            result(
                g.name,
                g.worst <= g.tol,
                format!("{points} points, max rel err {:.2e} (tol {:.0e})", g.worst, g.tol),
            )
        })
        .collect())
}

/// Closed-form identities of the objective terms.
pub fn closed_form_identities(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (mut worst_prior, mut worst_norm) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (u, k, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let c = random_matrix(&mut rng, u, d, 2.0);
        let cb = Codebook::new(random_matrix(&mut rng, k, d, 2.0))?;
        let l = DurationSequence::new((0..u).map(|_| rng.random_range(1..=k)).collect());
        let value = prior_kl(&c, &cb, &l, SgCoeffs::new(1.0, 0.0)?)?.value;
        let mut direct = 0.0;
        for (row, target) in l.iter().enumerate() {
            let logits = prior_logits(c.row(row), &cb)?;
            worst_norm = worst_norm.max(log_sum_exp(&logits).abs());
            direct -= logits[target - 1];
        }
        worst_prior = worst_prior.max((value - direct).abs());
    }
    out.push(result(
        "prior_kl = -sum log prior",
        worst_prior <= 1e-10,
        format!("max abs err {worst_prior:.2e}"),
    ));
    out.push(result(
        "prior_logits normalize",
        worst_norm <= 1e-12,
        format!("max |logsumexp| {worst_norm:.2e}"),
    ));

    let cb = Codebook::new(Matrix::from_rows(&[[0.0]])?)?;
    let d = Matrix::from_rows(&[[1.0]])?;
    let one = DurationSequence::new(vec![1]);
    let multiplier = vq_kl(&d, &cb, &one, 0.4, SgCoeffs::new(2.0, 1.0)?)?.value;
    out.push(result(
        "vq_kl multiplier at sigma 0.4",
        multiplier == 3.125,
        format!("{multiplier}"),
    ));

    let c = random_matrix(&mut rng, 3, 2, 3.0);
    let cb = Codebook::new(random_matrix(&mut rng, 1, 2, 3.0))?;
    let ones = DurationSequence::new(vec![1; 3]);
    let prior_one = prior_kl(&c, &cb, &ones, SgCoeffs::new(1.0, 0.0)?)?.value;
    let alt_one = vq_kl_alt(&c, &cb, &ones, 0.4)?;
    out.push(result(
        "single-codeword terms vanish",
        prior_one == 0.0 && alt_one == 0.0,
        format!("prior_kl {prior_one}, vq_kl_alt {alt_one}"),
    ));
    Ok(out)
}

/// Beam outputs satisfy the duration constraints, and random alignments
/// survive the duration round trip.
pub fn constraint_suite(count: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad_beam = 0;
    let mut produced = 0;
    while produced < count {
        let (em, y, k) = random_instance(&mut rng, 12, 5, 5, 2.0);
        let width = rng.random_range(1..6);
        for h in nbest_beam(&em, &y, k, width)? {
            produced += 1;
            if validate_duration(&h.durations, y.len(), em.frames(), k).is_err() {
                bad_beam += 1;
            }
        }
    }
    let mut bad_trip = 0;
    for _ in 0..count {
        let k = rng.random_range(1..6);
        let u = rng.random_range(1..7);
        let l = DurationSequence::new((0..u).map(|_| rng.random_range(1..=k)).collect());
        let a = duration_to_alignment(&l)?;
        let back = alignment_to_duration(&a)?;
        if back != l || duration_to_alignment(&back)? != a {
            bad_trip += 1;
        }
    }
    Ok(vec![
        result(
            "beam outputs valid",
            bad_beam == 0,
            format!("{produced} hypotheses, {bad_beam} invalid"),
        ),
        result(
            "alignment round trip",
            bad_trip == 0,
            format!("{count} alignments, {bad_trip} mismatches"),
        ),
    ])
}

/// The whole suite with wall-clock timings folded into the details.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let start = Instant::now();
    let mut oracle = oracle_equivalence(200, seed)?;
    oracle.detail += &format!(", {:.2?}", start.elapsed());
    out.push(oracle);
    out.extend(gradient_suite(20, seed.wrapping_add(1))?);
    out.extend(closed_form_identities(seed.wrapping_add(2))?);
    out.extend(constraint_suite(1000, seed.wrapping_add(3))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_all(7).unwrap();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 1 + 11 + 4 + 2);
    }

    #[test]
    fn random_instances_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (em, y, k) = random_instance(&mut rng, 8, 4, 4, 2.0);
            assert!(y.len() <= em.frames() && em.frames() <= y.len() * k);
        }
    }
}
