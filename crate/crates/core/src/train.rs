//! The three training periods: paraphrase pre-training over pseudo-labeled
//! batches, episodic meta-training over a labeled corpus, and online
//! adaptation at prediction time that fine-tunes on an episode's support set
//! and then restores the original parameters bit-exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LabeledCorpus, RelationInstance, RelationType, Split};
use crate::encoder::params::TensorMap;
use crate::encoder::transformer::TinyTransformer;
use crate::encoder::EncoderError;
use crate::episode::{sample_episode, Episode, SampleError};
use crate::matching::{EntityPooling, MatchResult};
use crate::pipeline::{self, PipelineError, TaskCodec};
use crate::pseudo::PseudoBatch;
use crate::seeds;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step}: {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("parameters after restore differ from the snapshot ({before} vs {after})")]
    RestoreMismatch { before: String, after: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Hyperparameters for the gradient-trained periods.
///
/// The zero learning rate is legal: it is the documented no-update control
/// (a frozen run whose loss trace equals forward-only evaluation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate.
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Overrides the encoder's dropout for this period when set.
    pub dropout: Option<f64>,
    /// Multiplicative learning-rate factor applied per epoch, in (0, 1].
    pub lr_decay: f64,
    /// Pre-training epochs over the batch list.
    pub epochs: usize,
    /// Meta-training iterations (one fresh episode each).
    pub steps: usize,
    /// Instances per pre-training batch; recorded for manifests — actual
    /// batch composition is fixed when the pseudo corpus is assembled.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: None,
            lr_decay: 1.0,
            epochs: 3,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("dropout must lie in [0,1), got {d}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0,1], got {}", self.lr_decay));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad(format!("clip must be > 0, got {}", self.clip));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".to_string());
        }
        Ok(())
    }
}

/// Online-adaptation settings: `n` full-batch gradient descent epochs on the
/// support set at rate `lr`, restoring the pre-adaptation parameters
/// afterwards unless `restore` is disabled for ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub n: usize,
    pub lr: f64,
    pub restore: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            n: 2,
            lr: 1e-3,
            restore: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "adaptation lr must be finite and ≥ 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Loss trace of one training period.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Mean loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for row in &self.rows {
            if row.epoch >= sums.len() {
                sums.resize(row.epoch + 1, (0.0, 0));
            }
            sums[row.epoch].0 += row.loss;
            sums[row.epoch].1 += 1;
        }
        sums.iter()
            .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
            .collect()
    }

    /// "step,loss,lr" CSV with one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }
}

/// Adam with decoupled weight decay; moments live beside the parameters in
/// name-aligned tensor maps.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: TensorMap,
    v: TensorMap,
}

impl AdamW {
    pub fn new(params: &TensorMap, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with the rate scaled by `lr_scale` (the epoch schedule).
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap, lr_scale: f64) {
        self.t += 1;
        let lr_now = self.lr * lr_scale;
        let bias1 = 1.0 - self.beta1.powi(self.t);
        let bias2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads.tensors.iter() {
            let m = self.m.tensors.get_mut(name).expect("moment tensors align");
            let v = self.v.tensors.get_mut(name).expect("moment tensors align");
            let p = params.tensors.get_mut(name).expect("parameter tensors align");
            for ((pv, (mv, vv)), gv) in p
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.iter())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr_now * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}

/// Scales gradients down to `clip` when their global norm exceeds it.
/// Returns the pre-clip norm.
fn clip_gradients(grads: &mut TensorMap, clip: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > clip {
        grads.scale_all(clip / norm);
    }
    norm
}

fn check_finite(step: usize, loss: f64, grad_norm: f64) -> Result<(), TrainError> {
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(TrainError::Divergence { step, loss });
    }
    Ok(())
}

/// Pre-trains on pseudo-labeled batches: per batch, the batch's predicates
/// become the choice prompt, each paraphrase is a labeled instance whose
/// gold choice is its own predicate, and one optimizer step follows.
pub fn pretrain(
    model: &mut TinyTransformer,
    batches: &[PseudoBatch],
    vocab: &Vocabulary,
    pooling: EntityPooling,
    cfg: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    if let Some(d) = cfg.dropout {
        model.config.dropout = d;
    }
    let codec = TaskCodec::new(vocab, pooling, model.config.max_len);
    // Materialize instances and choices once; they are constant across epochs.
    let mut prepared: Vec<(Vec<RelationType>, Vec<RelationInstance>)> =
        Vec::with_capacity(batches.len());
    for batch in batches {
        let choices = batch.choice_types();
        let instances: Result<Vec<RelationInstance>, DataError> =
            batch.items.iter().map(|i| i.to_instance()).collect();
        prepared.push((choices, instances?));
    }

    let mut optimizer = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr_scale = cfg.lr_decay.powi(epoch as i32);
        for (choices, instances) in &prepared {
            let refs: Vec<&RelationInstance> = instances.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, "pretrain-dropout", step as u64));
            let rng_opt: Option<&mut dyn RngCore> = if model.config.dropout > 0.0 {
                Some(&mut rng)
            } else {
                None
            };
            let (loss, mut grads) =
                pipeline::batch_loss_and_grads(model, &codec, choices, &refs, rng_opt)?;
            let grad_norm = clip_gradients(&mut grads, cfg.clip);
            check_finite(step, loss, grad_norm)?;
            optimizer.step(&mut model.params, &grads, lr_scale);
            trace.rows.push(TraceRow {
                step,
                epoch,
                loss,
                lr: cfg.lr * lr_scale,
            });
            step += 1;
        }
    }
    Ok(trace)
}

/// Per-episode setting ranges for meta-training (inclusive bounds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRanges {
    pub n_way: (usize, usize),
    pub k_shot: (usize, usize),
    pub queries: (usize, usize),
    /// Per-episode none-of-the-above rate, drawn uniformly from this list.
    pub nota_rates: Vec<f64>,
}

impl Default for EpisodeRanges {
    fn default() -> Self {
        // Varying N alone is hard to learn from scratch at this scale: with
        // nothing forcing content-based features early, training can settle
        // into the equal-distance saddle. Mixing in none-of-the-above
        // episodes breaks that symmetry, so the default keeps them.
        Self {
            n_way: (2, 5),
            k_shot: (1, 2),
            queries: (2, 4),
            nota_rates: vec![0.0, 0.15, 0.5],
        }
    }
}

impl EpisodeRanges {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.n_way.0 < 1 || self.n_way.0 > self.n_way.1 {
            return bad(format!("n_way range invalid: {:?}", self.n_way));
        }
        if self.k_shot.0 > self.k_shot.1 {
            return bad(format!("k_shot range invalid: {:?}", self.k_shot));
        }
        if self.queries.0 < 1 || self.queries.0 > self.queries.1 {
            return bad(format!("queries range invalid: {:?}", self.queries));
        }
        if self.nota_rates.is_empty() {
            return bad("nota_rates must list at least one rate".to_string());
        }
        for &r in &self.nota_rates {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("nota rate must lie in [0,1), got {r}"));
            }
        }
        Ok(())
    }

    /// The concrete setting for one meta-training step.
    fn draw(&self, seed: u64, step: usize) -> (usize, usize, usize, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(seed, "episode-spec", step as u64));
        let n = rng.gen_range(self.n_way.0..=self.n_way.1);
        let k = rng.gen_range(self.k_shot.0..=self.k_shot.1);
        let q = rng.gen_range(self.queries.0..=self.queries.1);
        let nota = self.nota_rates[rng.gen_range(0..self.nota_rates.len())];
        (n, k, q, nota)
    }
}

/// Shuffled copy of an episode's choices for one training step; the
/// none-of-the-above entry, when present, stays in last position.
fn shuffled_choices(choices: &[RelationType], seed: u64, step: usize) -> Vec<RelationType> {
    let mut shuffled: Vec<RelationType> = choices.to_vec();
    let nota = if shuffled.last().is_some_and(|c| c.is_nota) {
        shuffled.pop()
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(seed, "choice-shuffle", step as u64));
    shuffled.shuffle(&mut rng);
    if let Some(n) = nota {
        shuffled.push(n);
    }
    shuffled
}

/// Episodic meta-training: each step samples a fresh episode from the train
/// split, shuffles its choice order, computes the mean matching loss over
/// support ∪ query instances against the episode's own choices, and applies
/// one optimizer step. No global relation set is ever materialized.
///
/// The trace records one row per step (epoch is always 0; meta-training has
/// no epoch structure).
pub fn meta_train(
    model: &mut TinyTransformer,
    corpus: &LabeledCorpus,
    ranges: &EpisodeRanges,
    vocab: &Vocabulary,
    pooling: EntityPooling,
    cfg: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    ranges.validate()?;
    if let Some(d) = cfg.dropout {
        model.config.dropout = d;
    }
    let codec = TaskCodec::new(vocab, pooling, model.config.max_len);
    let mut optimizer = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let (n, k, q, nota_rate) = ranges.draw(cfg.seed, step);
        let episode = sample_episode(
            corpus,
            Split::Train,
            n,
            k,
            q,
            nota_rate,
            seeds::mix(cfg.seed, "episode", step as u64),
        )?;
        let choices = shuffled_choices(&episode.choices, cfg.seed, step);
        let mut items: Vec<&RelationInstance> = Vec::new();
        for (_, sup) in &episode.support {
            items.extend(sup.iter());
        }
        items.extend(episode.queries.iter());

        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, "meta-dropout", step as u64));
        let rng_opt: Option<&mut dyn RngCore> = if model.config.dropout > 0.0 {
            Some(&mut rng)
        } else {
            None
        };
        let (loss, mut grads) =
            pipeline::batch_loss_and_grads(model, &codec, &choices, &items, rng_opt)?;
        let grad_norm = clip_gradients(&mut grads, cfg.clip);
        check_finite(step, loss, grad_norm)?;
        optimizer.step(&mut model.params, &grads, 1.0);
        trace.rows.push(TraceRow {
            step,
            epoch: 0,
            loss,
            lr: cfg.lr,
        });
    }
    Ok(trace)
}

/// What one adapted prediction pass produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptOutcome {
    /// Predicted choice index per query, in episode order.
    pub predictions: Vec<usize>,
    /// Gold choice index per query (None when a query's label is not among
    /// the episode's choices).
    pub golds: Vec<Option<usize>>,
    /// Full matching output per query.
    pub results: Vec<MatchResult>,
    /// Mean support loss before each adaptation epoch, plus one final value
    /// after the last update; empty when no adaptation ran.
    pub support_losses: Vec<f64>,
    pub digest_before: String,
    pub digest_after: String,
    /// True when at least one adaptation epoch ran (n ≥ 1 and support
    /// nonempty).
    pub adapted: bool,
}

/// Online adaptation: snapshot the parameters, run `n` full-batch gradient
/// descent epochs on the mean support loss, predict every query with the
/// adapted parameters, then restore the snapshot bit-exactly. Episodes with
/// an empty support set (zero-shot) skip the adaptation loop entirely.
pub fn adapt_and_predict(
    model: &mut TinyTransformer,
    episode: &Episode,
    vocab: &Vocabulary,
    pooling: EntityPooling,
    adapt: &AdaptConfig,
) -> Result<AdaptOutcome, TrainError> {
    adapt.validate()?;
    let codec = TaskCodec::new(vocab, pooling, model.config.max_len);
    let digest_before = model.params.digest();
    let snapshot = model.params.clone();

    let support: Vec<&RelationInstance> = episode
        .support
        .iter()
        .flat_map(|(_, insts)| insts.iter())
        .collect();
    let adapted = adapt.n > 0 && !support.is_empty();
    let mut support_losses = Vec::new();
    if adapted {
        for epoch in 0..adapt.n {
            let (loss, grads) =
                pipeline::batch_loss_and_grads(model, &codec, &episode.choices, &support, None)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step: epoch, loss });
            }
            support_losses.push(loss);
            model.params.add_scaled(&grads, -adapt.lr);
        }
        // Post-update support loss, so callers can see the full descent.
        let mut total = 0.0;
        for inst in &support {
            let result = pipeline::score_with_model(model, &codec, &episode.choices, inst)?;
            total += result.loss.ok_or_else(|| {
                TrainError::InvalidConfig("support instance lost its gold label".to_string())
            })?;
        }
        support_losses.push(total / support.len() as f64);
    }

    let mut predictions = Vec::with_capacity(episode.queries.len());
    let mut golds = Vec::with_capacity(episode.queries.len());
    let mut results = Vec::with_capacity(episode.queries.len());
    for query in &episode.queries {
        let result = pipeline::score_with_model(model, &codec, &episode.choices, query)?;
        predictions.push(result.predicted);
        golds.push(pipeline::gold_index(&episode.choices, query));
        results.push(result);
    }

    let digest_after = if adapt.restore {
        model.params = snapshot;
        let after = model.params.digest();
        if after != digest_before {
            return Err(TrainError::RestoreMismatch {
                before: digest_before,
                after,
            });
        }
        after
    } else {
        model.params.digest()
    };

    Ok(AdaptOutcome {
        predictions,
        golds,
        results,
        support_losses,
        digest_before,
        digest_after,
        adapted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::pseudo::{build_pretraining_corpus, PseudoConfig};
    use crate::synthetic::{self, SyntheticConfig};

    fn fixture() -> (LabeledCorpus, Vec<Vec<String>>, Vocabulary) {
        let cfg = SyntheticConfig {
            seed: 3,
            relations: 8,
            train_relations: 6,
            instances_per_relation: 8,
            predicates: 6,
            sentences_per_predicate: 4,
        };
        let corpus = synthetic::relation_corpus(&cfg);
        let sentences = synthetic::raw_sentences(&cfg);
        let vocab = synthetic::fixture_vocabulary(&corpus, &sentences);
        (corpus, sentences, vocab)
    }

    fn tiny_model(vocab: &Vocabulary, seed: u64) -> TinyTransformer {
        let mut config = EncoderConfig::tiny(vocab.len());
        config.dropout = 0.0;
        TinyTransformer::new(config, seed).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for patch in [
            |c: &mut TrainConfig| c.lr = -1.0,
            |c: &mut TrainConfig| c.lr = f64::NAN,
            |c: &mut TrainConfig| c.weight_decay = -0.1,
            |c: &mut TrainConfig| c.dropout = Some(1.0),
            |c: &mut TrainConfig| c.lr_decay = 0.0,
            |c: &mut TrainConfig| c.lr_decay = 1.5,
            |c: &mut TrainConfig| c.clip = 0.0,
            |c: &mut TrainConfig| c.batch_size = 0,
        ] {
            let mut bad = TrainConfig::default();
            patch(&mut bad);
            assert!(bad.validate().is_err());
        }
        assert!(AdaptConfig {
            lr: f64::INFINITY,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_choice_batches_train_at_exactly_zero_loss() {
        let (_, sentences, vocab) = fixture();
        let batches = build_pretraining_corpus(
            &sentences,
            &PseudoConfig {
                batch_size: 1,
                seed: 0,
            },
        )
        .unwrap();
        let mut model = tiny_model(&vocab, 1);
        let cfg = TrainConfig {
            epochs: 1,
            dropout: Some(0.0),
            ..TrainConfig::default()
        };
        let trace = pretrain(&mut model, &batches[..6], &vocab, EntityPooling::default(), &cfg)
            .unwrap();
        assert_eq!(trace.rows.len(), 6);
        for row in &trace.rows {
            assert_eq!(row.loss, 0.0, "single-choice loss must be identically zero");
        }
    }

    #[test]
    fn zero_learning_rate_is_a_forward_only_control() {
        let (_, sentences, vocab) = fixture();
        let batches = build_pretraining_corpus(
            &sentences,
            &PseudoConfig {
                batch_size: 3,
                seed: 0,
            },
        )
        .unwrap();
        let batches = &batches[..4];
        let mut model = tiny_model(&vocab, 2);
        let digest_start = model.params.digest();

        // forward-only reference losses
        let codec = TaskCodec::new(&vocab, EntityPooling::default(), model.config.max_len);
        let mut reference = Vec::new();
        for b in batches {
            let choices = b.choice_types();
            let scale = 1.0 / b.items.len() as f64;
            let mut total = 0.0;
            for item in &b.items {
                let inst = item.to_instance().unwrap();
                let r = pipeline::score_with_model(&model, &codec, &choices, &inst).unwrap();
                // scale each term exactly as the batched path does, so the
                // comparison below can be bitwise
                total += r.loss.unwrap() * scale;
            }
            reference.push(total);
        }

        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            dropout: Some(0.0),
            epochs: 2,
            ..TrainConfig::default()
        };
        let trace = pretrain(&mut model, batches, &vocab, EntityPooling::default(), &cfg).unwrap();
        assert_eq!(model.params.digest(), digest_start, "α=0 must not move parameters");
        assert_eq!(trace.rows.len(), reference.len() * 2);
        for (i, row) in trace.rows.iter().enumerate() {
            assert_eq!(row.loss, reference[i % reference.len()]);
        }
    }

    #[test]
    fn pretraining_reduces_epoch_loss_on_the_synthetic_corpus() {
        // 200-instance pseudo corpus: 10 predicates × 20 sentences.
        let syn = SyntheticConfig {
            seed: 5,
            predicates: 10,
            sentences_per_predicate: 20,
            ..SyntheticConfig::default()
        };
        let sentences = synthetic::raw_sentences(&syn);
        assert_eq!(sentences.len(), 200);
        let corpus = synthetic::relation_corpus(&SyntheticConfig {
            relations: 2,
            train_relations: 1,
            instances_per_relation: 1,
            ..syn.clone()
        });
        let vocab = synthetic::fixture_vocabulary(&corpus, &sentences);
        let batches = build_pretraining_corpus(
            &sentences,
            &PseudoConfig {
                batch_size: 5,
                seed: 1,
            },
        )
        .unwrap();
        let mut model = tiny_model(&vocab, 7);

        // untrained mean loss as the baseline epoch
        let codec = TaskCodec::new(&vocab, EntityPooling::default(), model.config.max_len);
        let mut initial = 0.0;
        for b in &batches {
            let choices = b.choice_types();
            for item in &b.items {
                let inst = item.to_instance().unwrap();
                initial += pipeline::score_with_model(&model, &codec, &choices, &inst)
                    .unwrap()
                    .loss
                    .unwrap();
            }
        }
        initial /= (batches.len() * batches[0].items.len()) as f64;

        let cfg = TrainConfig {
            dropout: Some(0.0),
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let trace = pretrain(&mut model, &batches, &vocab, EntityPooling::default(), &cfg).unwrap();
        let mut levels = vec![initial];
        levels.extend(trace.epoch_means());
        assert_eq!(levels.len(), 4);
        let decreasing = levels
            .windows(2)
            .filter(|w| w[1] < w[0])
            .count();
        assert!(
            decreasing >= 2,
            "expected ≥2 of 3 epoch transitions to decrease, got {decreasing} in {levels:?}"
        );
    }

    #[test]
    fn one_way_meta_training_has_identically_zero_loss() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 3);
        let ranges = EpisodeRanges {
            n_way: (1, 1),
            k_shot: (1, 1),
            queries: (1, 1),
            nota_rates: vec![0.0],
        };
        let cfg = TrainConfig {
            steps: 5,
            dropout: Some(0.0),
            ..TrainConfig::default()
        };
        let trace = meta_train(
            &mut model,
            &corpus,
            &ranges,
            &vocab,
            EntityPooling::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(trace.rows.len(), 5);
        for row in &trace.rows {
            assert_eq!(row.loss, 0.0);
        }
    }

    #[test]
    fn equal_seeds_give_identical_meta_training_runs() {
        let (corpus, _, vocab) = fixture();
        let ranges = EpisodeRanges {
            n_way: (2, 3),
            k_shot: (1, 1),
            queries: (1, 2),
            nota_rates: vec![0.0, 0.3],
        };
        let cfg = TrainConfig {
            steps: 6,
            dropout: Some(0.1),
            ..TrainConfig::default()
        };
        let run = |seed_model: u64| {
            let mut model = tiny_model(&vocab, seed_model);
            model.config.dropout = 0.1;
            let trace = meta_train(
                &mut model,
                &corpus,
                &ranges,
                &vocab,
                EntityPooling::default(),
                &cfg,
            )
            .unwrap();
            (trace, model.params.digest())
        };
        let (trace_a, digest_a) = run(11);
        let (trace_b, digest_b) = run(11);
        assert_eq!(trace_a, trace_b);
        assert_eq!(digest_a, digest_b);
    }

    #[test]
    fn deleting_an_unsampled_relation_leaves_the_run_byte_identical() {
        let (corpus, _, vocab) = fixture();
        let ranges = EpisodeRanges {
            n_way: (2, 2),
            k_shot: (1, 1),
            queries: (2, 2),
            nota_rates: vec![0.0],
        };
        let cfg = TrainConfig {
            steps: 3,
            dropout: Some(0.1),
            seed: 21,
            ..TrainConfig::default()
        };
        // Find a train relation that none of the sampled episodes touches.
        let mut used = std::collections::BTreeSet::new();
        for step in 0..cfg.steps {
            let (n, k, q, nota) = ranges.draw(cfg.seed, step);
            let ep = sample_episode(
                &corpus,
                Split::Train,
                n,
                k,
                q,
                nota,
                seeds::mix(cfg.seed, "episode", step as u64),
            )
            .unwrap();
            for c in &ep.choices {
                used.insert(c.id.clone());
            }
        }
        let unused = corpus
            .relations_in_split(Split::Train)
            .into_iter()
            .find(|id| !used.contains(*id))
            .expect("fixture leaves at least one relation unsampled")
            .clone();
        let pruned = corpus.without_relation(&unused).unwrap();

        let run = |c: &LabeledCorpus| {
            let mut model = tiny_model(&vocab, 13);
            model.config.dropout = 0.1;
            let trace = meta_train(
                &mut model,
                c,
                &ranges,
                &vocab,
                EntityPooling::default(),
                &cfg,
            )
            .unwrap();
            (trace, model.params.digest())
        };
        let (trace_full, digest_full) = run(&corpus);
        let (trace_pruned, digest_pruned) = run(&pruned);
        assert_eq!(trace_full, trace_pruned);
        assert_eq!(digest_full, digest_pruned);
    }

    fn sample_test_episode(corpus: &LabeledCorpus, k: usize, seed: u64) -> Episode {
        sample_episode(corpus, Split::Test, 2, k, 2, 0.0, seed).unwrap()
    }

    #[test]
    fn zero_epoch_adaptation_equals_direct_prediction() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 17);
        let episode = sample_test_episode(&corpus, 1, 5);
        let outcome = adapt_and_predict(
            &mut model,
            &episode,
            &vocab,
            EntityPooling::default(),
            &AdaptConfig {
                n: 0,
                ..AdaptConfig::default()
            },
        )
        .unwrap();
        assert!(!outcome.adapted);
        assert!(outcome.support_losses.is_empty());
        assert_eq!(outcome.digest_before, outcome.digest_after);

        let codec = TaskCodec::new(&vocab, EntityPooling::default(), model.config.max_len);
        for (query, &pred) in episode.queries.iter().zip(&outcome.predictions) {
            let direct = pipeline::score_with_model(&model, &codec, &episode.choices, query)
                .unwrap()
                .predicted;
            assert_eq!(pred, direct);
        }
    }

    #[test]
    fn adaptation_restores_parameters_bit_exactly_for_any_epoch_count() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 19);
        let before_all = model.params.digest();
        for (i, n) in [0usize, 1, 2, 5].into_iter().enumerate() {
            let episode = sample_test_episode(&corpus, 1, 100 + i as u64);
            let outcome = adapt_and_predict(
                &mut model,
                &episode,
                &vocab,
                EntityPooling::default(),
                &AdaptConfig {
                    n,
                    ..AdaptConfig::default()
                },
            )
            .unwrap();
            assert_eq!(outcome.digest_before, outcome.digest_after, "n={n}");
            assert_eq!(outcome.digest_after, before_all, "n={n}");
            assert_eq!(outcome.adapted, n > 0);
        }
        assert_eq!(model.params.digest(), before_all);
    }

    #[test]
    fn disabling_restore_keeps_the_adapted_parameters() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 23);
        let before = model.params.digest();
        let episode = sample_test_episode(&corpus, 1, 42);
        let outcome = adapt_and_predict(
            &mut model,
            &episode,
            &vocab,
            EntityPooling::default(),
            &AdaptConfig {
                n: 1,
                lr: 1e-3,
                restore: false,
            },
        )
        .unwrap();
        assert_ne!(outcome.digest_after, before);
        assert_eq!(model.params.digest(), outcome.digest_after);
    }

    #[test]
    fn two_adaptation_epochs_do_not_increase_support_loss() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 29);
        let episode = sample_test_episode(&corpus, 2, 7);
        let outcome = adapt_and_predict(
            &mut model,
            &episode,
            &vocab,
            EntityPooling::default(),
            &AdaptConfig {
                n: 2,
                lr: 1e-3,
                restore: true,
            },
        )
        .unwrap();
        assert_eq!(outcome.support_losses.len(), 3);
        assert!(
            outcome.support_losses[2] <= outcome.support_losses[0],
            "support loss rose: {:?}",
            outcome.support_losses
        );
    }

    #[test]
    fn meta_training_rejects_unsatisfiable_ranges() {
        let (corpus, _, vocab) = fixture();
        let mut model = tiny_model(&vocab, 31);
        let ranges = EpisodeRanges {
            n_way: (40, 40),
            k_shot: (1, 1),
            queries: (1, 1),
            nota_rates: vec![0.0],
        };
        let cfg = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        let err = meta_train(
            &mut model,
            &corpus,
            &ranges,
            &vocab,
            EntityPooling::default(),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Sample(_)));
    }
}
