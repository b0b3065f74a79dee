//! Deterministic JSON persistence.
//!
//! Every artifact is written with sorted object keys and floats printed with
//! 17 significant digits, so equal values always produce identical bytes and
//! parse back to the same `f64`.

use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::error::{Error, Result};
use crate::model::{RewardSupport, Rmmdp};

pub const MODEL_FORMAT: &str = "rmmdp/1";

struct CanonicalFormatter;

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` canonically (sorted keys, 17 significant digits).
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // round-tripping through `Value` sorts object keys
    let tree = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter);
    tree.serialize(&mut ser)?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// On-disk layout of a model. Arrays are flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub contexts: usize,
    pub support: Vec<f64>,
    pub transition: Vec<f64>,
    pub init: Vec<f64>,
    pub weights: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl From<&Rmmdp> for ModelFile {
    fn from(m: &Rmmdp) -> Self {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            states: m.num_states(),
            actions: m.num_actions(),
            horizon: m.horizon(),
            contexts: m.num_contexts(),
            support: m.support().values().to_vec(),
            transition: m.transitions_flat().to_vec(),
            init: m.init().to_vec(),
            weights: m.weights().to_vec(),
            rewards: m.rewards_flat().to_vec(),
        }
    }
}

impl ModelFile {
    /// Checks the format tag and simplex invariants; rows within tolerance
    /// are renormalized.
    pub fn into_model(self) -> Result<Rmmdp> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "expected format {MODEL_FORMAT:?}, found {:?}",
                self.format
            )));
        }
        if self.weights.len() != self.contexts {
            return Err(Error::Dimension(format!(
                "contexts = {} but {} weights given",
                self.contexts,
                self.weights.len()
            )));
        }
        Rmmdp::validated(
            self.states,
            self.actions,
            self.horizon,
            RewardSupport::new(self.support)?,
            self.transition,
            self.init,
            self.weights,
            self.rewards,
        )
    }

    /// Dimension checks only; used by `validate` to report violations as data.
    pub fn into_unchecked_model(self) -> Result<Rmmdp> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!(
                "expected format {MODEL_FORMAT:?}, found {:?}",
                self.format
            )));
        }
        Rmmdp::from_parts(
            self.states,
            self.actions,
            self.horizon,
            RewardSupport::new(self.support)?,
            self.transition,
            self.init,
            self.weights,
            self.rewards,
        )
    }
}

pub fn model_to_json(model: &Rmmdp) -> Result<String> {
    to_canonical_json(&ModelFile::from(model))
}

pub fn model_from_json(text: &str) -> Result<Rmmdp> {
    serde_json::from_str::<ModelFile>(text)?.into_model()
}

pub fn save_model(path: impl AsRef<Path>, model: &Rmmdp) -> Result<()> {
    write_json(path, &ModelFile::from(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Rmmdp> {
    read_json::<ModelFile>(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{example_e1, random_model, RandomSpec};
    use crate::rng::seeded;

    #[test]
    fn keys_are_sorted_and_floats_have_17_digits() {
        let text = model_to_json(&example_e1(2)).unwrap();
        let actions = text.find("\"actions\"").unwrap();
        let weights = text.find("\"weights\"").unwrap();
        assert!(actions < weights);
        assert!(text.contains("5.0000000000000000e-1"));
        assert!(text.contains("\"format\":\"rmmdp/1\""));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = seeded(11);
        let m = random_model(
            RandomSpec { states: 3, actions: 2, support: 3, horizon: 4, contexts: 2 },
            &mut rng,
        );
        let text = model_to_json(&m).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(model_to_json(&back).unwrap(), text);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let text = model_to_json(&example_e1(1)).unwrap().replace("rmmdp/1", "rmmdp/9");
        assert!(matches!(model_from_json(&text), Err(Error::Format(_))));
    }
}
