//! Closed-form objective terms with analytic gradients.
//!
//! Every squared distance between a network output and a codeword goes
//! through [`sg_sqdist`]. Reported values are the plain squared distances; the
//! stop-gradient coefficients only scale the gradients that reach each side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, squared_distance};
use crate::types::{Codebook, DurationSequence, LossBreakdown, Matrix};

/// Weights of `alpha * ||a - sg[b]||^2 + beta * ||sg[a] - b||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgCoeffs {
    alpha: f64,
    beta: f64,
}

impl SgCoeffs {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(alpha) && ok(beta) && alpha + beta > 0.0) {
            return Err(Error::InvalidValue(format!(
                "stop-gradient coefficients must be >= 0 with a positive sum, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(SgCoeffs { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SqDist {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// `||a - b||^2` with gradients `2 alpha (a - b)` and `2 beta (b - a)`.
pub fn sg_sqdist(a: &[f64], b: &[f64], c: SgCoeffs) -> Result<SqDist> {
    if a.len() != b.len() {
        return Err(Error::shape("sg_sqdist operands", a.len(), b.len()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(SqDist {
        value: diff.iter().map(|d| d * d).sum(),
        grad_a: diff.iter().map(|d| 2.0 * c.alpha * d).collect(),
        grad_b: diff.iter().map(|d| -2.0 * c.beta * d).collect(),
    })
}

/// Accumulates `weight * d/da, weight * d/db` of an sg-decomposed distance.
fn accumulate_sqdist(a: &[f64], b: &[f64], c: SgCoeffs, weight: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    for ((x, y), (ga, gb)) in a.iter().zip(b).zip(grad_a.iter_mut().zip(grad_b.iter_mut())) {
        let d = x - y;
        *ga += weight * 2.0 * c.alpha * d;
        *gb -= weight * 2.0 * c.beta * d;
    }
}

/// Gaussian negative log-likelihood of frames under means `mu` and isotropic
/// std `sigma_d`, normalization constant included. Returns the value and
/// `d/d mu`.
pub fn decoder_nll(x: &Matrix, mu: &Matrix, sigma_d: f64) -> Result<(f64, Matrix)> {
    if !(sigma_d.is_finite() && sigma_d > 0.0) {
        return Err(Error::InvalidValue(format!("sigma_d must be positive, got {sigma_d}")));
    }
    if x.shape() != mu.shape() {
        return Err(Error::shape(
            "decoder_nll",
            format!("{:?}", x.shape()),
            format!("{:?}", mu.shape()),
        ));
    }
    let var = sigma_d * sigma_d;
    let (frames, dim) = x.shape();
    let log_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let sq: f64 = squared_distance(x.as_slice(), mu.as_slice());
    let value = sq / (2.0 * var) + frames as f64 * log_norm;
    let grad: Vec<f64> = mu.as_slice().iter().zip(x.as_slice()).map(|(m, v)| (m - v) / var).collect();
    Ok((value, Matrix::from_vec(frames, dim, grad)?))
}

/// Prior log-probabilities `-||c - e_k||^2 - logsumexp_j(-||c - e_j||^2)`.
pub fn prior_logits(c: &[f64], cb: &Codebook) -> Result<Vec<f64>> {
    if c.len() != cb.dim() {
        return Err(Error::shape("prior_logits activation", cb.dim(), c.len()));
    }
    let mut scores: Vec<f64> = (1..=cb.size()).map(|k| -squared_distance(c, cb.codeword(k))).collect();
    let lse = log_sum_exp(&scores);
    scores.iter_mut().for_each(|s| *s -= lse);
    Ok(scores)
}

/// Value and gradients of a token-level codebook term.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookTerm {
    pub value: f64,
    /// Gradient with respect to the per-token network outputs (`U x D`).
    pub grad_input: Matrix,
    /// Gradient with respect to the codewords (`K x D`).
    pub grad_codebook: Matrix,
}

fn check_token_inputs(name: &'static str, seq: &Matrix, cb: &Codebook, l: &DurationSequence) -> Result<()> {
    if seq.cols() != cb.dim() {
        return Err(Error::shape(name, format!("{} columns", cb.dim()), seq.cols()));
    }
    if seq.rows() != l.len() {
        return Err(Error::shape(name, format!("{} rows", l.len()), seq.rows()));
    }
    if let Some((index, value)) = l.iter().enumerate().find(|(_, d)| *d < 1 || *d > cb.size()) {
        return Err(crate::types::DurationViolation::OutOfRange {
            index,
            value,
            max: cb.size(),
        }
        .into());
    }
    Ok(())
}

/// Negative prior log-likelihood of the posterior codewords:
/// `sum_u ||c_u - e_{l_u}||^2 + logsumexp_k(-||c_u - e_k||^2)`.
///
/// Every distance, including those inside the log-sum-exp, is differentiated
/// through the stop-gradient decomposition with coefficients `sg`.
pub fn prior_kl(c_seq: &Matrix, cb: &Codebook, l: &DurationSequence, sg: SgCoeffs) -> Result<CodebookTerm> {
    check_token_inputs("prior_kl", c_seq, cb, l)?;
    let mut value = 0.0;
    let mut grad_input = Matrix::zeros(c_seq.rows(), c_seq.cols());
    let mut grad_codebook = Matrix::zeros(cb.size(), cb.dim());
    for (u, target) in l.iter().enumerate() {
        let c = c_seq.row(u);
        let log_p = prior_logits(c, cb)?;
        value -= log_p[target - 1];
        // d value / d dist_k = [k = target] - P_k
        for k in 1..=cb.size() {
            let weight = if k == target { 1.0 } else { 0.0 } - log_p[k - 1].exp();
            let (gi, gc) = (grad_input.row_mut(u), grad_codebook.row_mut(k - 1));
            accumulate_sqdist(c, cb.codeword(k), sg, weight, gi, gc);
        }
    }
    Ok(CodebookTerm {
        value,
        grad_input,
        grad_codebook,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("sigma must be positive, got {sigma}")))
    }
}

/// `1 / (2 sigma^2)`, evaluated as `(1 / sigma)^2 / 2`, which keeps the
/// familiar `sigma = 0.4` case at exactly 3.125.
pub fn quantization_scale(sigma: f64) -> f64 {
    let inv = 1.0 / sigma;
    0.5 * inv * inv
}

/// Closed-form KL between `N(d_u, sigma^2 I)` and `N(e_{l_u}, sigma^2 I)`
/// summed over tokens: `sum_u ||d_u - e_{l_u}||^2 / (2 sigma^2)`.
pub fn vq_kl(d_seq: &Matrix, cb: &Codebook, l: &DurationSequence, sigma: f64, sg: SgCoeffs) -> Result<CodebookTerm> {
    check_sigma(sigma)?;
    check_token_inputs("vq_kl", d_seq, cb, l)?;
    let scale = quantization_scale(sigma);
    let mut value = 0.0;
    let mut grad_input = Matrix::zeros(d_seq.rows(), d_seq.cols());
    let mut grad_codebook = Matrix::zeros(cb.size(), cb.dim());
    for (u, target) in l.iter().enumerate() {
        let (d, e) = (d_seq.row(u), cb.codeword(target));
        value += scale * squared_distance(d, e);
        accumulate_sqdist(d, e, sg, scale, grad_input.row_mut(u), grad_codebook.row_mut(target - 1));
    }
    Ok(CodebookTerm {
        value,
        grad_input,
        grad_codebook,
    })
}

/// Quantization KL against a codebook-mixture prior, with the mixture KL
/// replaced by its variational approximation and the normalizer dropped:
/// `sum_u ||d_u - e_{l_u}||^2 / (2 sigma^2) + logsumexp_k(-||d_u - e_k||^2 / (2 sigma^2))`.
pub fn vq_kl_alt(d_seq: &Matrix, cb: &Codebook, l: &DurationSequence, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_token_inputs("vq_kl_alt", d_seq, cb, l)?;
    let scale = quantization_scale(sigma);
    let mut value = 0.0;
    for (u, target) in l.iter().enumerate() {
        let d = d_seq.row(u);
        let scores: Vec<f64> = (1..=cb.size()).map(|k| -scale * squared_distance(d, cb.codeword(k))).collect();
        value += -scores[target - 1] + log_sum_exp(&scores);
    }
    Ok(value)
}

/// `total = decoder_nll + prior_kl + vq_kl + gamma * ctc_nll`.
pub fn total_objective(decoder_nll: f64, prior_kl: f64, vq_kl: f64, ctc_nll: f64, gamma: f64) -> Result<LossBreakdown> {
    let parts = [
        ("decoder_nll", decoder_nll),
        ("prior_kl", prior_kl),
        ("vq_kl", vq_kl),
        ("ctc_nll", ctc_nll),
        ("gamma", gamma),
    ];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidValue(format!("{name} is not finite: {v}")));
    }
    Ok(LossBreakdown {
        decoder_nll,
        prior_kl,
        vq_kl,
        ctc_nll,
        total: decoder_nll + prior_kl + vq_kl + gamma * ctc_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sg(a: f64, b: f64) -> SgCoeffs {
        SgCoeffs::new(a, b).unwrap()
    }

    fn cb(rows: &[&[f64]]) -> Codebook {
        Codebook::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sg_sqdist_examples() {
        let r = sg_sqdist(&[0.5, -1.0], &[0.5, -1.0], sg(1.0, 1.0)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_a.iter().chain(&r.grad_b).all(|&g| g == 0.0));

        let r = sg_sqdist(&[1.0, 2.0], &[3.0, -1.0], sg(1.0, 0.0)).unwrap();
        assert!(r.grad_b.iter().all(|&g| g == 0.0));

        let r = sg_sqdist(&[1.0, 0.0], &[0.0, 0.0], sg(2.0, 1.0)).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad_a, vec![4.0, 0.0]);
        assert_eq!(r.grad_b, vec![-2.0, 0.0]);

        assert!(sg_sqdist(&[1.0], &[1.0, 2.0], sg(1.0, 1.0)).is_err());
    }

    #[test]
    fn sg_coeffs_validation() {
        assert!(SgCoeffs::new(0.0, 0.0).is_err());
        assert!(SgCoeffs::new(-1.0, 2.0).is_err());
        assert!(SgCoeffs::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn decoder_nll_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (v, g) = decoder_nll(&x, &x, 3.0).unwrap();
        let expected = 2.0 * (2.0 / 2.0) * (2.0 * std::f64::consts::PI * 9.0).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        // single frame, O=1, x - mu = 3, sigma_d = 3
        let x = Matrix::from_rows(&[[3.0]]).unwrap();
        let mu = Matrix::from_rows(&[[0.0]]).unwrap();
        let (v, g) = decoder_nll(&x, &mu, 3.0).unwrap();
        assert!((v - (0.5 + 0.5 * (18.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((g.get(0, 0) + 1.0 / 3.0).abs() < 1e-15);

        assert!(decoder_nll(&x, &mu, 0.0).is_err());
        assert!(decoder_nll(&x, &Matrix::zeros(1, 2), 1.0).is_err());
    }

    #[test]
    fn prior_logits_examples() {
        let book = cb(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let p = prior_logits(&[0.0, 0.0], &book).unwrap();
        assert!(p.iter().all(|&lp| (lp.exp() - 0.25).abs() < 1e-15));

        let book = cb(&[&[0.0], &[1.0]]);
        let p = prior_logits(&[0.0], &book).unwrap();
        let expected = 1.0 / (1.0 + (-1f64).exp());
        assert!((p[0].exp() - expected).abs() < 1e-15);
        assert!((p[0].exp() - 0.7311).abs() < 1e-4);
        assert!(prior_logits(&[0.0, 1.0], &book).is_err());
    }

    #[test]
    fn prior_kl_single_codeword_is_zero() {
        let book = cb(&[&[0.3, -0.7]]);
        let c = Matrix::from_rows(&[[1.0, 2.0], [-4.0, 0.5]]).unwrap();
        let term = prior_kl(&c, &book, &DurationSequence::new(vec![1, 1]), sg(1.0, 0.0)).unwrap();
        assert_eq!(term.value, 0.0);
    }

    #[test]
    fn prior_kl_symmetric_case_is_log2_per_token() {
        let book = cb(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let c = Matrix::from_rows(&[[0.0, 0.5], [0.0, -2.0], [0.0, 0.0]]).unwrap();
        let l = DurationSequence::new(vec![1, 2, 1]);
        let term = prior_kl(&c, &book, &l, sg(1.0, 0.0)).unwrap();
        assert!((term.value - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_sg_beta_zero_gives_no_codebook_gradient() {
        let book = cb(&[&[1.0, 0.0], &[-1.0, 0.5], &[0.2, 0.2]]);
        let c = Matrix::from_rows(&[[0.1, 0.5], [0.4, -2.0]]).unwrap();
        let term = prior_kl(&c, &book, &DurationSequence::new(vec![3, 1]), sg(1.0, 0.0)).unwrap();
        assert!(term.grad_codebook.as_slice().iter().all(|&g| g == 0.0));
        assert!(term.grad_input.as_slice().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn prior_kl_rejects_bad_index() {
        let book = cb(&[&[1.0], &[2.0]]);
        let c = Matrix::from_rows(&[[0.0]]).unwrap();
        assert!(prior_kl(&c, &book, &DurationSequence::new(vec![3]), sg(1.0, 0.0)).is_err());
        assert!(prior_kl(&c, &book, &DurationSequence::new(vec![1, 1]), sg(1.0, 0.0)).is_err());
    }

    #[test]
    fn vq_kl_examples() {
        let book = cb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = DurationSequence::new(vec![1, 2]);
        assert_eq!(vq_kl(&d, &book, &l, 0.4, sg(2.0, 1.0)).unwrap().value, 0.0);

        // unit-norm residual, sigma = 0.4: multiplier 1 / (2 * 0.16) = 3.125
        let d = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let term = vq_kl(&d, &book, &DurationSequence::new(vec![1]), 0.4, sg(2.0, 1.0)).unwrap();
        assert_eq!(term.value, 3.125);
        assert!((term.grad_input.get(0, 1) - 2.0 * 2.0 * 3.125).abs() < 1e-12);
        assert!((term.grad_codebook.get(0, 1) + 2.0 * 3.125).abs() < 1e-12);
        assert!(term.grad_codebook.row(1).iter().all(|&g| g == 0.0));

        assert!(vq_kl(&d, &book, &DurationSequence::new(vec![1]), 0.0, sg(2.0, 1.0)).is_err());
    }

    #[test]
    fn vq_kl_alt_examples() {
        let single = cb(&[&[0.5, 0.5]]);
        let d = Matrix::from_rows(&[[3.0, -1.0], [0.0, 9.0]]).unwrap();
        let l = DurationSequence::new(vec![1, 1]);
        assert_eq!(vq_kl_alt(&d, &single, &l, 0.4).unwrap(), 0.0);

        let book = cb(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let d = Matrix::from_rows(&[[0.0, 0.3], [0.0, -1.0]]).unwrap();
        let l = DurationSequence::new(vec![2, 1]);
        let v = vq_kl_alt(&d, &book, &l, 0.4).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);

        // the plain KL plus the log-sum-exp correction, token by token
        let d = Matrix::from_rows(&[[0.2, 0.9]]).unwrap();
        let l = DurationSequence::new(vec![1]);
        let scale = 1.0 / (2.0 * 0.16);
        let lse = log_sum_exp(&[
            -scale * squared_distance(d.row(0), book.codeword(1)),
            -scale * squared_distance(d.row(0), book.codeword(2)),
        ]);
        let plain = vq_kl(&d, &book, &l, 0.4, sg(2.0, 1.0)).unwrap().value;
        assert!((vq_kl_alt(&d, &book, &l, 0.4).unwrap() - (plain + lse)).abs() < 1e-12);
    }

    #[test]
    fn total_objective_examples() {
        assert_eq!(total_objective(0.0, 0.0, 0.0, 0.0, 0.5).unwrap().total, 0.0);
        assert_eq!(total_objective(1.0, 2.0, 3.0, 4.0, 0.5).unwrap().total, 8.0);
        assert!(total_objective(f64::NAN, 0.0, 0.0, 0.0, 0.5).is_err());
        assert!(total_objective(0.0, 0.0, 0.0, f64::INFINITY, 0.5).is_err());
    }
}
