//! Sequence encoders behind one interface: a tiny trainable transformer, a
//! parameter-free hashing baseline, and a declared-but-unbundled hook for
//! plugging in an externally pretrained encoder.

pub mod hash;
pub mod params;
pub mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hash::HashEncoder;
pub use params::{CheckpointError, TensorMap};
pub use transformer::{Cache, TinyTransformer};

use crate::vocab;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds encoder max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("the external encoder profile is an integration hook; no backend is bundled")]
    ExternalUnavailable,
    #[error("encoder profile '{0}' has no trainable parameters")]
    NotTrainable(String),
    #[error("unknown encoder profile '{0}' (expected tiny, hash, or external)")]
    UnknownProfile(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Hyperparameters shared by every backend (the hash backend only reads
/// `d_model`, `vocab_size`, and `max_len`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale trainable profile.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 160,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::Config(msg));
        if self.vocab_size < vocab::SPECIALS.len() {
            return fail(format!(
                "vocab_size {} cannot cover the {} reserved special tokens",
                self.vocab_size,
                vocab::SPECIALS.len()
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return fail("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must divide evenly into {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.max_len < 8 {
            return fail(format!("max_len {} is below the minimum of 8", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<(), EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if ids.len() > self.max_len {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len(),
                max_len: self.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderProfile {
    Tiny,
    Hash,
    External,
}

impl fmt::Display for EncoderProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderProfile::Tiny => "tiny",
            EncoderProfile::Hash => "hash",
            EncoderProfile::External => "external",
        })
    }
}

impl FromStr for EncoderProfile {
    type Err = EncoderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(EncoderProfile::Tiny),
            "hash" => Ok(EncoderProfile::Hash),
            "external" => Ok(EncoderProfile::External),
            other => Err(EncoderError::UnknownProfile(other.to_string())),
        }
    }
}

/// A ready-to-use encoder backend.
#[derive(Debug, Clone)]
pub enum Encoder {
    Tiny(TinyTransformer),
    Hash {
        config: EncoderConfig,
        backend: HashEncoder,
    },
}

impl Encoder {
    /// Builds the requested backend. The `external` profile reserves the
    /// config surface for a pretrained encoder but ships no implementation.
    pub fn build(
        profile: EncoderProfile,
        config: EncoderConfig,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        match profile {
            EncoderProfile::Tiny => Ok(Encoder::Tiny(TinyTransformer::new(config, seed)?)),
            EncoderProfile::Hash => Ok(Encoder::Hash {
                backend: HashEncoder::new(config.d_model, seed),
                config,
            }),
            EncoderProfile::External => Err(EncoderError::ExternalUnavailable),
        }
    }

    pub fn profile(&self) -> EncoderProfile {
        match self {
            Encoder::Tiny(_) => EncoderProfile::Tiny,
            Encoder::Hash { .. } => EncoderProfile::Hash,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        match self {
            Encoder::Tiny(t) => &t.config,
            Encoder::Hash { config, .. } => config,
        }
    }

    /// Deterministic eval-mode encoding.
    pub fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        match self {
            Encoder::Tiny(t) => t.encode(ids),
            Encoder::Hash { config, backend } => {
                config.check_ids(ids)?;
                Ok(backend.encode(ids))
            }
        }
    }

    pub fn as_tiny(&self) -> Option<&TinyTransformer> {
        match self {
            Encoder::Tiny(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_tiny_mut(&mut self) -> Option<&mut TinyTransformer> {
        match self {
            Encoder::Tiny(t) => Some(t),
            _ => None,
        }
    }

    /// The trainable backend, or `NotTrainable` for parameter-free profiles.
    pub fn trainable_mut(&mut self) -> Result<&mut TinyTransformer, EncoderError> {
        let profile = self.profile();
        self.as_tiny_mut()
            .ok_or_else(|| EncoderError::NotTrainable(profile.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        match self {
            Encoder::Tiny(t) => Ok(t.params.save(path, &t.config)?),
            other => Err(EncoderError::NotTrainable(other.profile().to_string())),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let (params, config) = TensorMap::load(path)?;
        Ok(Encoder::Tiny(TinyTransformer::from_parts(config, params)?))
    }
}
