//! Toy differentiable networks and their flat parameter vector.
//!
//! All parameters (decoder, both latent nets, the shared token embedding, the
//! acoustic encoder and the codebook) live in one `Vec<f64>`. [`Layout`] names
//! the slices; gradients use the same layout.

mod gradcheck;
mod linalg;
mod nets;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_diff_check, finite_diff_gradient, max_relative_error};
pub use nets::{
    acoustic_encoder, backprop_decoder, backprop_encoder, backprop_latent, decoder_step, generate_frames,
    latentnet_phi, latentnet_psi, run_decoder, run_latent, DecoderTrace, EncoderTrace, LatentKind, LatentStep,
    LatentTrace,
};

use crate::error::{Error, Result};
use crate::types::{Codebook, Matrix, TrainConfig};

/// Sizes of the toy networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "E")]
    pub embed_dim: usize,
    #[serde(rename = "H")]
    pub hidden_dim: usize,
    #[serde(rename = "O")]
    pub frame_dim: usize,
    #[serde(rename = "D")]
    pub code_dim: usize,
    #[serde(rename = "g")]
    pub grouping: usize,
    #[serde(rename = "K")]
    pub codebook_size: usize,
}

impl ModelSpec {
    pub fn from_config(c: &TrainConfig) -> Self {
        ModelSpec {
            vocab: c.vocab,
            embed_dim: c.embed_dim,
            hidden_dim: c.hidden_dim,
            frame_dim: c.frame_dim,
            code_dim: c.code_dim,
            grouping: c.grouping,
            codebook_size: c.max_duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab,
            self.embed_dim,
            self.hidden_dim,
            self.frame_dim,
            self.code_dim,
            self.grouping,
            self.codebook_size,
        ];
        if fields.contains(&0) {
            return Err(Error::InvalidValue(format!("model sizes must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Parameter group, one per jointly trained component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Decoder.
    Theta,
    /// Posterior latent net.
    Psi,
    /// Prior latent net and the shared token embedding.
    Phi,
    /// Acoustic encoder of the aligner.
    Lambda,
    Codebook,
}

/// A named `rows x cols` row-major block of the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn of<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.range()]
    }

    pub fn of_mut<'a>(&self, values: &'a mut [f64]) -> &'a mut [f64] {
        &mut values[self.range()]
    }

    pub fn row<'a>(&self, values: &'a [f64], i: usize) -> &'a [f64] {
        let start = self.offset + i * self.cols;
        &values[start..start + self.cols]
    }

    pub fn row_mut<'a>(&self, values: &'a mut [f64], i: usize) -> &'a mut [f64] {
        let start = self.offset + i * self.cols;
        &mut values[start..start + self.cols]
    }
}

/// `h_u = tanh(W_in [input] + W_rec h_{u-1} + b)`, `out = W_out h_u + b_out`;
/// `start` stands in for the previous code at `u = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecurrentSlots {
    pub w_in: Slot,
    pub w_rec: Slot,
    pub b: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
    pub start: Slot,
}

/// `h = tanh(W_in [x_prev; z; emb(y)] + b)`, `mu = W_out h + b_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderSlots {
    pub w_in: Slot,
    pub b: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
}

/// `h = tanh(W_in [s_t; s_{t-1}] + b)` with transition and token heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSlots {
    pub w_in: Slot,
    pub b: Slot,
    pub w_trans: Slot,
    pub b_trans: Slot,
    pub w_emit: Slot,
    pub b_emit: Slot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embed: Slot,
    pub phi: RecurrentSlots,
    pub psi: RecurrentSlots,
    pub theta: DecoderSlots,
    pub lambda: EncoderSlots,
    pub codebook: Slot,
    entries: Vec<(&'static str, ParamGroup, Slot)>,
    total: usize,
}

struct Builder {
    offset: usize,
    entries: Vec<(&'static str, ParamGroup, Slot)>,
}

impl Builder {
    fn slot(&mut self, name: &'static str, group: ParamGroup, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += slot.len();
        self.entries.push((name, group, slot));
        slot
    }
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let ModelSpec {
            vocab: v,
            embed_dim: e,
            hidden_dim: h,
            frame_dim: o,
            code_dim: d,
            grouping: g,
            codebook_size: k,
        } = *spec;
        let mut b = Builder {
            offset: 0,
            entries: Vec::new(),
        };
        use ParamGroup::*;
        let embed = b.slot("phi.embed", Phi, v, e);
        let phi = RecurrentSlots {
            w_in: b.slot("phi.w_in", Phi, h, e + d),
            w_rec: b.slot("phi.w_rec", Phi, h, h),
            b: b.slot("phi.b", Phi, h, 1),
            w_out: b.slot("phi.w_out", Phi, d, h),
            b_out: b.slot("phi.b_out", Phi, d, 1),
            start: b.slot("phi.start", Phi, d, 1),
        };
        let psi = RecurrentSlots {
            w_in: b.slot("psi.w_in", Psi, h, e + d + o),
            w_rec: b.slot("psi.w_rec", Psi, h, h),
            b: b.slot("psi.b", Psi, h, 1),
            w_out: b.slot("psi.w_out", Psi, d, h),
            b_out: b.slot("psi.b_out", Psi, d, 1),
            start: b.slot("psi.start", Psi, d, 1),
        };
        let theta = DecoderSlots {
            w_in: b.slot("theta.w_in", Theta, h, o + d + e),
            b: b.slot("theta.b", Theta, h, 1),
            w_out: b.slot("theta.w_out", Theta, o, h),
            b_out: b.slot("theta.b_out", Theta, o, 1),
        };
        let lambda = EncoderSlots {
            w_in: b.slot("lambda.w_in", Lambda, h, g * o),
            b: b.slot("lambda.b", Lambda, h, 1),
            w_trans: b.slot("lambda.w_trans", Lambda, 2, h),
            b_trans: b.slot("lambda.b_trans", Lambda, 2, 1),
            w_emit: b.slot("lambda.w_emit", Lambda, v, h),
            b_emit: b.slot("lambda.b_emit", Lambda, v, 1),
        };
        let codebook = b.slot("codebook", Codebook, k, d);
        Layout {
            embed,
            phi,
            psi,
            theta,
            lambda,
            codebook,
            total: b.offset,
            entries: b.entries,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(name, group, slot)` in storage order.
    pub fn entries(&self) -> &[(&'static str, ParamGroup, Slot)] {
        &self.entries
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|(n, _, _)| *n == name).map(|(_, _, s)| *s)
    }

    /// Contiguous index range of a group.
    pub fn group_range(&self, group: ParamGroup) -> Range<usize> {
        let mut slots = self.entries.iter().filter(|(_, g, _)| *g == group).map(|(_, _, s)| s);
        let first = slots.next().expect("every group has a slot");
        let end = slots.last().unwrap_or(first).range().end;
        first.offset..end
    }
}

/// Flat parameter vector plus the spec that fixes its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    spec: ModelSpec,
    layout: Layout,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ModelParams::from_values(raw.spec, raw.values)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams {
            spec: p.spec,
            values: p.values,
        }
    }
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let values = vec![0.0; layout.total()];
        Ok(ModelParams { spec, layout, values })
    }

    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if values.len() != layout.total() {
            return Err(Error::shape("parameter vector", layout.total(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("parameters contain non-finite values".into()));
        }
        Ok(ModelParams { spec, layout, values })
    }

    /// Seeded initialization: weights `N(0, 1/fan_in)`, embeddings and
    /// codewords `N(0, 1)`, start codes `N(0, 1/D)`, biases zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = p.layout.entries.clone();
        for (name, _, slot) in entries {
            let is_bias = name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('b'));
            let std = if is_bias {
                0.0
            } else if name == "phi.embed" || name == "codebook" {
                1.0
            } else if name.ends_with(".start") {
                1.0 / (spec.code_dim as f64).sqrt()
            } else {
                1.0 / (slot.cols as f64).sqrt()
            };
            if std == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in slot.of_mut(&mut p.values) {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with a different value vector of the same layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::shape("parameter vector", self.values.len(), values.len()));
        }
        Ok(ModelParams {
            spec: self.spec,
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let s = self.layout.codebook;
        Codebook::new(Matrix::from_vec(s.rows, s.cols, s.of(&self.values).to_vec())?)
    }

    pub fn embedding(&self, token: usize) -> Result<&[f64]> {
        if token >= self.spec.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.spec.vocab,
            });
        }
        Ok(self.layout.embed.row(&self.values, token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> ModelSpec {
        ModelSpec {
            vocab: 3,
            embed_dim: 2,
            hidden_dim: 4,
            frame_dim: 2,
            code_dim: 3,
            grouping: 1,
            codebook_size: 3,
        }
    }

    #[test]
    fn layout_is_contiguous_and_grouped() {
        let layout = Layout::new(&small_spec());
        let mut offset = 0;
        for (_, _, s) in layout.entries() {
            assert_eq!(s.offset, offset);
            offset += s.len();
        }
        assert_eq!(offset, layout.total());
        let mut ranges: Vec<_> = [
            ParamGroup::Phi,
            ParamGroup::Psi,
            ParamGroup::Theta,
            ParamGroup::Lambda,
            ParamGroup::Codebook,
        ]
        .iter()
        .map(|&g| layout.group_range(g))
        .collect();
        ranges.sort_by_key(|r| r.start);
        assert_eq!(ranges.first().unwrap().start, 0);
        assert_eq!(ranges.last().unwrap().end, layout.total());
        for w in ranges.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        assert_eq!(layout.slot("codebook"), Some(layout.codebook));
    }

    #[test]
    fn layout_is_deterministic() {
        let a = Layout::new(&small_spec());
        let b = Layout::new(&small_spec());
        assert_eq!(a, b);
        // V*E + phi + psi + theta + lambda + K*D
        let (v, e, h, o, d, g, k) = (3, 2, 4, 2, 3, 1, 3);
        let expected = v * e
            + (h * (e + d) + h * h + h + d * h + d + d)
            + (h * (e + d + o) + h * h + h + d * h + d + d)
            + (h * (o + d + e) + h + o * h + o)
            + (h * g * o + h + 2 * h + 2 + v * h + v)
            + k * d;
        assert_eq!(a.total(), expected);
    }

    #[test]
    fn params_json_round_trip_is_bitwise() {
        let p = ModelParams::init(small_spec(), 7).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        assert!(back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn params_reject_wrong_length() {
        let spec = small_spec();
        assert!(ModelParams::from_values(spec, vec![0.0; 3]).is_err());
        let json = r#"{"spec":{"V":3,"E":2,"H":4,"O":2,"D":3,"g":1,"K":3},"values":[1.0]}"#;
        assert!(serde_json::from_str::<ModelParams>(json).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(small_spec(), 1).unwrap();
        let b = ModelParams::init(small_spec(), 1).unwrap();
        let c = ModelParams::init(small_spec(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let l = a.layout();
        assert!(l.phi.b.of(a.values()).iter().all(|&v| v == 0.0));
        assert!(l.lambda.b_emit.of(a.values()).iter().all(|&v| v == 0.0));
        assert!(l.codebook.of(a.values()).iter().any(|&v| v != 0.0));
    }
}
