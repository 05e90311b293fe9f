use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Trellis;
use crate::numeric::NEG_INF;

/// A log value that serializes `-inf` as the string `"-inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogValue(pub f64);

impl Serialize for LogValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == NEG_INF {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for LogValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LogValue(v)),
            Raw::Str(s) if s == "-inf" => Ok(LogValue(NEG_INF)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"-inf\", got {s:?}"))),
        }
    }
}

/// JSON export of a trellis. Tables are row-major over `(t, u, r)` with `r`
/// varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrellisDump {
    pub frames: usize,
    pub tokens: usize,
    pub max_duration: usize,
    pub log_marginal: LogValue,
    pub log_alpha: Vec<LogValue>,
    pub log_beta: Vec<LogValue>,
}

impl From<&Trellis> for TrellisDump {
    fn from(t: &Trellis) -> Self {
        let d = t.dims();
        let wrap = |v: &[f64]| v.iter().copied().map(LogValue).collect();
        TrellisDump {
            frames: d.frames,
            tokens: d.tokens,
            max_duration: d.max_duration,
            log_marginal: LogValue(t.log_marginal()),
            log_alpha: wrap(t.alpha().as_slice()),
            log_beta: wrap(t.beta().as_slice()),
        }
    }
}
