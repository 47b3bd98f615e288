//! Shared forward path used by training, adaptation, and evaluation:
//! choices + instance → assembled input → encoder → matching head.

use ndarray::ArrayView2;
use rand::RngCore;
use thiserror::Error;

use crate::data::{RelationInstance, RelationType};
use crate::encoder::{Encoder, EncoderError, TensorMap, TinyTransformer};
use crate::matching::{self, EntityPooling, MatchResult};
use crate::prompt::{self, CodecError, ModelInput};
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("instance labeled {relation:?} has no matching prompt choice")]
    MissingGold { relation: Option<String> },
    #[error("batch is empty")]
    EmptyBatch,
}

/// Fixed per-run assembly settings.
#[derive(Debug, Clone, Copy)]
pub struct TaskCodec<'v> {
    pub vocab: &'v Vocabulary,
    pub pooling: EntityPooling,
    pub max_len: usize,
}

impl<'v> TaskCodec<'v> {
    pub fn new(vocab: &'v Vocabulary, pooling: EntityPooling, max_len: usize) -> Self {
        Self {
            vocab,
            pooling,
            max_len,
        }
    }

    /// Builds the full encoder input for one instance under one choice list.
    pub fn assemble(
        &self,
        choices: &[RelationType],
        inst: &RelationInstance,
    ) -> Result<ModelInput, CodecError> {
        let (prompt_tokens, _) = prompt::build_choice_prompt(choices)?;
        let wrapped = prompt::wrap_instance(inst)?;
        prompt::assemble_input(&prompt_tokens, &wrapped, self.vocab, self.max_len)
    }
}

/// Index of the instance's labeled relation within the choice list.
pub fn gold_index(choices: &[RelationType], inst: &RelationInstance) -> Option<usize> {
    let rel = inst.relation.as_ref()?;
    choices.iter().position(|c| &c.id == rel)
}

/// Eval-mode scoring of one instance. The result carries a loss whenever the
/// instance's label appears among the choices.
pub fn score_instance(
    encoder: &Encoder,
    codec: &TaskCodec,
    choices: &[RelationType],
    inst: &RelationInstance,
) -> Result<MatchResult, PipelineError> {
    let input = codec.assemble(choices, inst)?;
    let encoded = encoder.encode(&input.ids)?;
    Ok(matching::match_encoded(
        encoded.view(),
        &input,
        codec.pooling,
        gold_index(choices, inst),
    ))
}

/// Eval-mode scoring straight against a trainable encoder (no dropout).
pub fn score_with_model(
    model: &TinyTransformer,
    codec: &TaskCodec,
    choices: &[RelationType],
    inst: &RelationInstance,
) -> Result<MatchResult, PipelineError> {
    let input = codec.assemble(choices, inst)?;
    let encoded = model.encode(&input.ids)?;
    Ok(matching::match_encoded(
        encoded.view(),
        &input,
        codec.pooling,
        gold_index(choices, inst),
    ))
}

/// Loss and parameter gradients for one labeled instance. Training mode when
/// an RNG is supplied (dropout on), deterministic otherwise.
pub fn loss_and_grads(
    model: &TinyTransformer,
    codec: &TaskCodec,
    choices: &[RelationType],
    inst: &RelationInstance,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(MatchResult, TensorMap), PipelineError> {
    loss_and_grads_inner(model, codec, choices, inst, &mut rng)
}

fn loss_and_grads_inner(
    model: &TinyTransformer,
    codec: &TaskCodec,
    choices: &[RelationType],
    inst: &RelationInstance,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<(MatchResult, TensorMap), PipelineError> {
    let gold = gold_index(choices, inst).ok_or_else(|| PipelineError::MissingGold {
        relation: inst.relation.as_ref().map(|r| r.0.clone()),
    })?;
    let input = codec.assemble(choices, inst)?;
    // Rebuild the option so the trait object's lifetime can shorten to this
    // call; passing `as_deref_mut()` straight through trips invariance.
    let step_rng = rng.as_deref_mut().map(|r| r as &mut dyn RngCore);
    let (encoded, cache) = model.forward(&input.ids, step_rng)?;
    let (result, d_encoded) = matching::match_with_grad(encoded.view(), &input, codec.pooling, gold);
    let grads = model.backward(&cache, ArrayView2::from(&d_encoded));
    Ok((result, grads))
}

/// Mean loss and mean gradients over a full batch sharing one choice list.
pub fn batch_loss_and_grads(
    model: &TinyTransformer,
    codec: &TaskCodec,
    choices: &[RelationType],
    items: &[&RelationInstance],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(f64, TensorMap), PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    let scale = 1.0 / items.len() as f64;
    let mut total_loss = 0.0;
    let mut total_grads = model.params.zeros_like();
    for inst in items {
        let (result, grads) = loss_and_grads_inner(model, codec, choices, inst, &mut rng)?;
        total_loss += result.loss.expect("gold was resolved") * scale;
        total_grads.add_scaled(&grads, scale);
    }
    Ok((total_loss, total_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RelId, Span};
    use crate::encoder::{EncoderConfig, EncoderProfile};

    fn choices() -> Vec<RelationType> {
        vec![
            RelationType::new(RelId::new("r0"), vec!["alpha".into(), "beta".into()]).unwrap(),
            RelationType::new(RelId::new("r1"), vec!["gamma".into()]).unwrap(),
        ]
    }

    fn instance(rel: &str) -> RelationInstance {
        RelationInstance::new(
            vec!["alpha".into(), "x".into(), "beta".into(), "y".into()],
            Span::new(0, 0),
            Span::new(2, 2),
            Some(RelId::new(rel)),
        )
        .unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["alpha", "beta", "gamma", "x", "y"])
    }

    fn config(vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 48,
            dropout: 0.0,
        }
    }

    #[test]
    fn gold_index_resolves_by_relation_id() {
        let cs = choices();
        assert_eq!(gold_index(&cs, &instance("r0")), Some(0));
        assert_eq!(gold_index(&cs, &instance("r1")), Some(1));
        assert_eq!(gold_index(&cs, &instance("zz")), None);
        let mut unlabeled = instance("r0");
        unlabeled.relation = None;
        assert_eq!(gold_index(&cs, &unlabeled), None);
    }

    #[test]
    fn score_matches_manual_composition() {
        let v = vocab();
        let codec = TaskCodec::new(&v, EntityPooling::OpenMarkers, 48);
        let enc = Encoder::build(EncoderProfile::Tiny, config(&v), 5).unwrap();
        let cs = choices();
        let inst = instance("r1");
        let scored = score_instance(&enc, &codec, &cs, &inst).unwrap();

        let input = codec.assemble(&cs, &inst).unwrap();
        input.validate().unwrap();
        let encoded = enc.encode(&input.ids).unwrap();
        let manual = crate::matching::match_encoded(
            encoded.view(),
            &input,
            EntityPooling::OpenMarkers,
            Some(1),
        );
        assert_eq!(scored.distances, manual.distances);
        assert_eq!(scored.predicted, manual.predicted);
        assert_eq!(scored.loss, manual.loss);
    }

    #[test]
    fn training_requires_a_resolvable_gold() {
        let v = vocab();
        let codec = TaskCodec::new(&v, EntityPooling::OpenMarkers, 48);
        let enc = Encoder::build(EncoderProfile::Tiny, config(&v), 5).unwrap();
        let model = enc.as_tiny().unwrap();
        let err = loss_and_grads(model, &codec, &choices(), &instance("zz"), None).unwrap_err();
        assert!(matches!(err, PipelineError::MissingGold { .. }));
    }

    #[test]
    fn batch_gradients_are_the_mean_of_singles() {
        let v = vocab();
        let codec = TaskCodec::new(&v, EntityPooling::OpenMarkers, 48);
        let enc = Encoder::build(EncoderProfile::Tiny, config(&v), 5).unwrap();
        let model = enc.as_tiny().unwrap();
        let cs = choices();
        let a = instance("r0");
        let b = instance("r1");
        let (loss, grads) = batch_loss_and_grads(model, &codec, &cs, &[&a, &b], None).unwrap();

        let (ra, ga) = loss_and_grads(model, &codec, &cs, &a, None).unwrap();
        let (rb, gb) = loss_and_grads(model, &codec, &cs, &b, None).unwrap();
        let expected = 0.5 * (ra.loss.unwrap() + rb.loss.unwrap());
        assert!((loss - expected).abs() < 1e-12);
        let mut mean = ga.zeros_like();
        mean.add_scaled(&ga, 0.5);
        mean.add_scaled(&gb, 0.5);
        for (name, t) in &grads.tensors {
            let m = mean.get(name);
            for (x, y) in t.iter().zip(m.iter()) {
                assert!((x - y).abs() < 1e-12, "{name}");
            }
        }
        assert!(matches!(
            batch_loss_and_grads(model, &codec, &cs, &[], None),
            Err(PipelineError::EmptyBatch)
        ));
    }
}
