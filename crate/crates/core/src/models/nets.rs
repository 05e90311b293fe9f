//! Forward passes with recorded traces, and matching backward passes that
//! accumulate into a gradient vector laid out like the parameters.
//!
//! Codewords that enter a network as inputs (the fed-back previous code and
//! the decoder's upsampled code) are constants here: the codebook only
//! receives gradients from the prior and quantization terms.

use super::linalg::{add_assign, matvec_add, matvec_t_add, outer_add};
use super::{ModelParams, RecurrentSlots};
use crate::error::{Error, Result};
use crate::numeric::log_softmax_in_place;
use crate::trellis::EmissionTable;
use crate::types::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    /// Prior net: input `[emb(y_u); z_prev]`.
    Phi,
    /// Posterior net: input `[emb(y_u); z_prev; xbar_u]`.
    Psi,
}

impl LatentKind {
    fn slots(self, p: &ModelParams) -> RecurrentSlots {
        match self {
            LatentKind::Phi => p.layout.phi,
            LatentKind::Psi => p.layout.psi,
        }
    }
}

/// Output and new hidden state of one recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStep {
    pub output: Vec<f64>,
    pub hidden: Vec<f64>,
}

fn check_len(context: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::shape(context, n, v.len()))
    }
}

fn latent_input(p: &ModelParams, kind: LatentKind, z_prev: &[f64], xbar: Option<&[f64]>, token: usize) -> Result<Vec<f64>> {
    let spec = p.spec();
    check_len("latent net z_prev", z_prev, spec.code_dim)?;
    let mut input = Vec::with_capacity(spec.embed_dim + spec.code_dim + spec.frame_dim);
    input.extend_from_slice(p.embedding(token)?);
    input.extend_from_slice(z_prev);
    match (kind, xbar) {
        (LatentKind::Psi, Some(x)) => {
            check_len("latent net xbar", x, spec.frame_dim)?;
            input.extend_from_slice(x);
        }
        (LatentKind::Phi, None) => {}
        (LatentKind::Psi, None) => return Err(Error::InvalidValue("posterior net needs xbar".into())),
        (LatentKind::Phi, Some(_)) => return Err(Error::InvalidValue("prior net takes no xbar".into())),
    }
    Ok(input)
}

fn latent_step(p: &ModelParams, kind: LatentKind, h_prev: &[f64], input: &[f64]) -> Result<LatentStep> {
    let s = kind.slots(p);
    check_len("latent net hidden state", h_prev, s.w_rec.cols)?;
    let v = p.values();
    let mut pre = s.b.of(v).to_vec();
    matvec_add(s.w_in.of(v), s.w_in.cols, input, &mut pre);
    matvec_add(s.w_rec.of(v), s.w_rec.cols, h_prev, &mut pre);
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let mut output = s.b_out.of(v).to_vec();
    matvec_add(s.w_out.of(v), s.w_out.cols, &hidden, &mut output);
    Ok(LatentStep { output, hidden })
}

/// One step of the prior net: `c_u` from the previous hidden state, the
/// previous code and the current token.
pub fn latentnet_phi(p: &ModelParams, h_prev: &[f64], z_prev: &[f64], token: usize) -> Result<LatentStep> {
    let input = latent_input(p, LatentKind::Phi, z_prev, None, token)?;
    latent_step(p, LatentKind::Phi, h_prev, &input)
}

/// One step of the posterior net: `d_u` additionally sees the token's
/// aggregated frames.
pub fn latentnet_psi(p: &ModelParams, h_prev: &[f64], z_prev: &[f64], xbar: &[f64], token: usize) -> Result<LatentStep> {
    let input = latent_input(p, LatentKind::Psi, z_prev, Some(xbar), token)?;
    latent_step(p, LatentKind::Psi, h_prev, &input)
}

/// Teacher-forced run of a latent net over a token sequence.
#[derive(Clone, Debug)]
pub struct LatentTrace {
    kind: LatentKind,
    tokens: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    /// `hidden[u + 1]` is `h_u`; `hidden[0]` is the zero initial state.
    hidden: Vec<Vec<f64>>,
    pub output: Matrix,
}

/// Runs `kind` over `tokens`. Row `u` of `codes` is the codeword selected
/// for token `u`; it is fed back as `z_prev` at `u + 1`, and the net's learned
/// start code is used at `u = 0`.
pub fn run_latent(
    p: &ModelParams,
    kind: LatentKind,
    tokens: &[usize],
    codes: &Matrix,
    xbar: Option<&Matrix>,
) -> Result<LatentTrace> {
    let spec = p.spec();
    if codes.rows() != tokens.len() || codes.cols() != spec.code_dim {
        return Err(Error::shape(
            "latent net codes",
            format!("{}x{}", tokens.len(), spec.code_dim),
            format!("{}x{}", codes.rows(), codes.cols()),
        ));
    }
    if let Some(x) = xbar {
        if x.rows() != tokens.len() {
            return Err(Error::shape("latent net xbar rows", tokens.len(), x.rows()));
        }
    }
    let s = kind.slots(p);
    let mut inputs = Vec::with_capacity(tokens.len());
    let mut hidden = vec![vec![0.0; spec.hidden_dim]];
    let mut out = Vec::with_capacity(tokens.len() * spec.code_dim);
    for (u, &token) in tokens.iter().enumerate() {
        let z_prev = if u == 0 { s.start.of(p.values()) } else { codes.row(u - 1) };
        let input = latent_input(p, kind, z_prev, xbar.map(|x| x.row(u)), token)?;
        let step = latent_step(p, kind, &hidden[u], &input)?;
        out.extend_from_slice(&step.output);
        inputs.push(input);
        hidden.push(step.hidden);
    }
    Ok(LatentTrace {
        kind,
        tokens: tokens.to_vec(),
        inputs,
        hidden,
        output: Matrix::from_vec(tokens.len(), spec.code_dim, out)?,
    })
}

/// Backpropagation through time for [`run_latent`]; `grad_out` is `U x D`.
pub fn backprop_latent(p: &ModelParams, trace: &LatentTrace, grad_out: &Matrix, grads: &mut [f64]) -> Result<()> {
    if grad_out.shape() != trace.output.shape() {
        return Err(Error::shape(
            "latent net output gradient",
            format!("{:?}", trace.output.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let s = trace.kind.slots(p);
    let spec = p.spec();
    let v = p.values();
    let h = spec.hidden_dim;
    let (e, d) = (spec.embed_dim, spec.code_dim);
    let mut dh_next = vec![0.0; h];
    for u in (0..trace.tokens.len()).rev() {
        let h_u = &trace.hidden[u + 1];
        let h_prev = &trace.hidden[u];
        let g = grad_out.row(u);
        outer_add(s.w_out.of_mut(grads), g, h_u);
        add_assign(s.b_out.of_mut(grads), g);
        let mut dh = dh_next.clone();
        matvec_t_add(s.w_out.of(v), s.w_out.cols, g, &mut dh);
        let da: Vec<f64> = dh.iter().zip(h_u).map(|(dh, hv)| dh * (1.0 - hv * hv)).collect();
        outer_add(s.w_in.of_mut(grads), &da, &trace.inputs[u]);
        outer_add(s.w_rec.of_mut(grads), &da, h_prev);
        add_assign(s.b.of_mut(grads), &da);
        let mut d_in = vec![0.0; s.w_in.cols];
        matvec_t_add(s.w_in.of(v), s.w_in.cols, &da, &mut d_in);
        add_assign(p.layout.embed.row_mut(grads, trace.tokens[u]), &d_in[..e]);
        if u == 0 {
            add_assign(s.start.of_mut(grads), &d_in[e..e + d]);
        }
        dh_next = vec![0.0; h];
        matvec_t_add(s.w_rec.of(v), s.w_rec.cols, &da, &mut dh_next);
    }
    Ok(())
}

fn decoder_forward(p: &ModelParams, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s = p.layout.theta;
    let v = p.values();
    let mut pre = s.b.of(v).to_vec();
    matvec_add(s.w_in.of(v), s.w_in.cols, input, &mut pre);
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let mut mu = s.b_out.of(v).to_vec();
    matvec_add(s.w_out.of(v), s.w_out.cols, &hidden, &mut mu);
    (hidden, mu)
}

fn decoder_input(p: &ModelParams, x_prev: &[f64], z_hat: &[f64], token: usize) -> Result<Vec<f64>> {
    let spec = p.spec();
    check_len("decoder x_prev", x_prev, spec.frame_dim)?;
    check_len("decoder z_hat", z_hat, spec.code_dim)?;
    let mut input = Vec::with_capacity(spec.frame_dim + spec.code_dim + spec.embed_dim);
    input.extend_from_slice(x_prev);
    input.extend_from_slice(z_hat);
    input.extend_from_slice(p.embedding(token)?);
    Ok(input)
}

/// Mean of the next frame given the previous frame, the upsampled code and
/// the upsampled token.
pub fn decoder_step(p: &ModelParams, x_prev: &[f64], z_hat: &[f64], token: usize) -> Result<Vec<f64>> {
    let input = decoder_input(p, x_prev, z_hat, token)?;
    Ok(decoder_forward(p, &input).1)
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    tokens: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    pub mu: Matrix,
}

/// Teacher-forced decoder over frame-rate codes and tokens: the previous
/// frame is the ground-truth `frames[t - 1]`, and a zero go-frame at `t = 0`.
pub fn run_decoder(p: &ModelParams, frames: &Matrix, codes: &Matrix, tokens: &[usize]) -> Result<DecoderTrace> {
    let n = frames.rows();
    if codes.rows() != n || tokens.len() != n {
        return Err(Error::shape(
            "decoder inputs",
            format!("{n} frames"),
            format!("{} codes, {} tokens", codes.rows(), tokens.len()),
        ));
    }
    let go = vec![0.0; p.spec().frame_dim];
    let mut inputs = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n * p.spec().frame_dim);
    for t in 0..n {
        let x_prev = if t == 0 { &go[..] } else { frames.row(t - 1) };
        let input = decoder_input(p, x_prev, codes.row(t), tokens[t])?;
        let (h, m) = decoder_forward(p, &input);
        mu.extend_from_slice(&m);
        inputs.push(input);
        hidden.push(h);
    }
    Ok(DecoderTrace {
        tokens: tokens.to_vec(),
        inputs,
        hidden,
        mu: Matrix::from_vec(n, p.spec().frame_dim, mu)?,
    })
}

pub fn backprop_decoder(p: &ModelParams, trace: &DecoderTrace, grad_mu: &Matrix, grads: &mut [f64]) -> Result<()> {
    if grad_mu.shape() != trace.mu.shape() {
        return Err(Error::shape(
            "decoder output gradient",
            format!("{:?}", trace.mu.shape()),
            format!("{:?}", grad_mu.shape()),
        ));
    }
    let s = p.layout.theta;
    let v = p.values();
    let spec = p.spec();
    let emb_at = spec.frame_dim + spec.code_dim;
    for (t, &token) in trace.tokens.iter().enumerate() {
        let g = grad_mu.row(t);
        let h = &trace.hidden[t];
        outer_add(s.w_out.of_mut(grads), g, h);
        add_assign(s.b_out.of_mut(grads), g);
        let mut dh = vec![0.0; h.len()];
        matvec_t_add(s.w_out.of(v), s.w_out.cols, g, &mut dh);
        let da: Vec<f64> = dh.iter().zip(h).map(|(dh, hv)| dh * (1.0 - hv * hv)).collect();
        outer_add(s.w_in.of_mut(grads), &da, &trace.inputs[t]);
        add_assign(s.b.of_mut(grads), &da);
        let mut d_in = vec![0.0; s.w_in.cols];
        matvec_t_add(s.w_in.of(v), s.w_in.cols, &da, &mut d_in);
        add_assign(p.layout.embed.row_mut(grads, token), &d_in[emb_at..]);
    }
    Ok(())
}

/// Free-running synthesis from the zero go-frame: each predicted mean is fed
/// back as the next previous frame. No sampling.
pub fn generate_frames(p: &ModelParams, codes: &Matrix, tokens: &[usize]) -> Result<Matrix> {
    if codes.rows() != tokens.len() {
        return Err(Error::shape("decoder inputs", tokens.len(), codes.rows()));
    }
    let mut x_prev = vec![0.0; p.spec().frame_dim];
    let mut out = Vec::with_capacity(tokens.len() * p.spec().frame_dim);
    for (t, &token) in tokens.iter().enumerate() {
        let mu = decoder_step(p, &x_prev, codes.row(t), token)?;
        out.extend_from_slice(&mu);
        x_prev = mu;
    }
    Matrix::from_vec(tokens.len(), p.spec().frame_dim, out)
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    pub table: EmissionTable,
}

/// Per-super-frame transition and token log-probabilities, each conditioned
/// on its own super-frame only.
pub fn acoustic_encoder(p: &ModelParams, super_frames: &Matrix) -> Result<EncoderTrace> {
    let spec = p.spec();
    let width = spec.grouping * spec.frame_dim;
    if super_frames.cols() != width {
        return Err(Error::shape("acoustic encoder input width", width, super_frames.cols()));
    }
    let s = p.layout.lambda;
    let v = p.values();
    let n = super_frames.rows();
    let mut inputs = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    let mut log_trans = Matrix::zeros(n, 2);
    let mut log_emit = Matrix::zeros(n, spec.vocab);
    for t in 0..n {
        let input = super_frames.row(t).to_vec();
        let mut pre = s.b.of(v).to_vec();
        matvec_add(s.w_in.of(v), s.w_in.cols, &input, &mut pre);
        let h: Vec<f64> = pre.into_iter().map(f64::tanh).collect();

        let trans = log_trans.row_mut(t);
        trans.copy_from_slice(s.b_trans.of(v));
        matvec_add(s.w_trans.of(v), s.w_trans.cols, &h, trans);
        log_softmax_in_place(trans);

        let emit = log_emit.row_mut(t);
        emit.copy_from_slice(s.b_emit.of(v));
        matvec_add(s.w_emit.of(v), s.w_emit.cols, &h, emit);
        log_softmax_in_place(emit);

        inputs.push(input);
        hidden.push(h);
    }
    Ok(EncoderTrace {
        inputs,
        hidden,
        table: EmissionTable::new(log_trans, log_emit)?,
    })
}

/// Gradient of a log-softmax row: `dz = dy - softmax * sum(dy)`.
fn log_softmax_backward(log_p: &[f64], dy: &[f64]) -> Vec<f64> {
    let total: f64 = dy.iter().sum();
    log_p.iter().zip(dy).map(|(lp, g)| g - lp.exp() * total).collect()
}

/// Backpropagates gradients with respect to the emission table's
/// log-probabilities into the encoder parameters.
pub fn backprop_encoder(
    p: &ModelParams,
    trace: &EncoderTrace,
    d_log_trans: &Matrix,
    d_log_emit: &Matrix,
    grads: &mut [f64],
) -> Result<()> {
    let table = &trace.table;
    if d_log_trans.shape() != table.log_trans().shape() || d_log_emit.shape() != table.log_emit().shape() {
        return Err(Error::shape(
            "emission table gradient",
            format!("{:?} and {:?}", table.log_trans().shape(), table.log_emit().shape()),
            format!("{:?} and {:?}", d_log_trans.shape(), d_log_emit.shape()),
        ));
    }
    let s = p.layout.lambda;
    let v = p.values();
    for t in 0..table.frames() {
        let h = &trace.hidden[t];
        let dz_trans = log_softmax_backward(table.log_trans().row(t), d_log_trans.row(t));
        let dz_emit = log_softmax_backward(table.log_emit().row(t), d_log_emit.row(t));
        outer_add(s.w_trans.of_mut(grads), &dz_trans, h);
        add_assign(s.b_trans.of_mut(grads), &dz_trans);
        outer_add(s.w_emit.of_mut(grads), &dz_emit, h);
        add_assign(s.b_emit.of_mut(grads), &dz_emit);
        let mut dh = vec![0.0; h.len()];
        matvec_t_add(s.w_trans.of(v), s.w_trans.cols, &dz_trans, &mut dh);
        matvec_t_add(s.w_emit.of(v), s.w_emit.cols, &dz_emit, &mut dh);
        let da: Vec<f64> = dh.iter().zip(h).map(|(dh, hv)| dh * (1.0 - hv * hv)).collect();
        outer_add(s.w_in.of_mut(grads), &da, &trace.inputs[t]);
        add_assign(s.b.of_mut(grads), &da);
    }
    Ok(())
}
