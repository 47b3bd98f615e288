//! Desk-scale laboratory for low-shot relation extraction.
//!
//! An instance's candidate relations are written into a multi-choice prompt;
//! a sequence encoder reads prompt and instance together; the matching head
//! compares the instance representation against one representation per
//! choice by Euclidean distance. The crate covers the full loop: corpus and
//! episode handling, prompt assembly, a tiny trainable encoder, paraphrase
//! pre-training from rule-extracted triplets, episodic meta-training,
//! snapshot-adapt-restore few-shot inference, and evaluation.

/// Library version, surfaced in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod encoder;
pub mod episode;
pub mod eval;
pub mod matching;
pub mod pipeline;
pub mod prompt;
pub mod pseudo;
pub mod seeds;
pub mod selftest;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use data::{LabeledCorpus, RelId, RelationInstance, RelationType, Span, Split};
pub use encoder::{Encoder, EncoderConfig, EncoderProfile};
pub use episode::Episode;
pub use matching::{EntityPooling, MatchResult};
pub use pipeline::TaskCodec;
pub use prompt::ModelInput;
pub use vocab::Vocabulary;
