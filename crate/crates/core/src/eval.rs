//! Episode-suite evaluation: run every episode through adapted prediction,
//! score accuracy per episode, and aggregate with a mean, sample standard
//! deviation, and 95% normal-approximation confidence interval.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Encoder;
use crate::episode::Episode;
use crate::matching::{EntityPooling, MatchResult};
use crate::pipeline::{self, TaskCodec};
use crate::train::{adapt_and_predict, AdaptConfig, TrainError};
use crate::vocab::Vocabulary;

pub const CI_FORMULA: &str = "ci95=1.96*std/sqrt(T)";

/// The interval is a normal approximation; whether the reference toolkit
/// used normal or bootstrap intervals is not recoverable, so outputs carry
/// this flag.
pub const CI_BASIS: &str = "normal-approximation";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty accuracy list")]
    Empty,
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: TrainError,
    },
    #[error("episode {episode} query {query}: gold label is not among the episode's choices")]
    MissingGold { episode: usize, query: usize },
    #[error("episode {episode}: adaptation (n={n}) requires a trainable encoder")]
    NotTrainable { episode: usize, n: usize },
}

/// Mean, 95% half-width, and sample standard deviation of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci: f64,
    pub std: f64,
    /// True when only one accuracy was aggregated: the (n−1) formulas are
    /// undefined, and ci/std are reported as zero.
    pub degenerate: bool,
}

/// mean = arithmetic mean; std = sample (n−1) standard deviation;
/// ci = 1.96 × std / √T. A single value yields zeros with the degenerate
/// flag set.
pub fn aggregate(accuracies: &[f64]) -> Result<Aggregate, EvalError> {
    let t = accuracies.len();
    if t == 0 {
        return Err(EvalError::Empty);
    }
    let mean = accuracies.iter().sum::<f64>() / t as f64;
    if t == 1 {
        return Ok(Aggregate {
            mean,
            ci: 0.0,
            std: 0.0,
            degenerate: true,
        });
    }
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    let std = var.sqrt();
    let ci = 1.96 * std / (t as f64).sqrt();
    Ok(Aggregate {
        mean,
        ci,
        std,
        degenerate: false,
    })
}

/// Everything one episode produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub golds: Vec<usize>,
    pub results: Vec<MatchResult>,
    pub adapted: bool,
}

/// Aggregate for one (N, K, nota_rate) setting within a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingSummary {
    pub n_way: usize,
    pub k_shot: usize,
    pub nota_rate: f64,
    /// Episode count in this setting.
    pub t: usize,
    pub mean: f64,
    pub ci: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// Suite-level report. Per-query outcomes and the wall-clock time stay out
/// of the serialized result (runtime belongs to the run manifest).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    /// Episode count.
    pub t: usize,
    pub mean: f64,
    pub ci: f64,
    pub std: f64,
    pub degenerate: bool,
    pub formula: String,
    pub ci_basis: String,
    pub settings: Vec<SettingSummary>,
    pub per_episode: Vec<f64>,
    #[serde(skip)]
    pub outcomes: Vec<EpisodeOutcome>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

fn run_episode(
    encoder: &Encoder,
    idx: usize,
    episode: &Episode,
    vocab: &Vocabulary,
    pooling: EntityPooling,
    adapt: &AdaptConfig,
) -> Result<EpisodeOutcome, EvalError> {
    let (predictions, golds, results, adapted) = if let Some(tiny) = encoder.as_tiny() {
        // private clone per episode: adaptation never touches shared state
        let mut clone = tiny.clone();
        let outcome = adapt_and_predict(&mut clone, episode, vocab, pooling, adapt)
            .map_err(|source| EvalError::Episode { episode: idx, source })?;
        (
            outcome.predictions,
            outcome.golds,
            outcome.results,
            outcome.adapted,
        )
    } else {
        if adapt.n > 0 && episode.k_shot() > 0 {
            return Err(EvalError::NotTrainable {
                episode: idx,
                n: adapt.n,
            });
        }
        let codec = TaskCodec::new(vocab, pooling, encoder.config().max_len);
        let mut predictions = Vec::with_capacity(episode.queries.len());
        let mut golds = Vec::with_capacity(episode.queries.len());
        let mut results = Vec::with_capacity(episode.queries.len());
        for query in &episode.queries {
            let result = pipeline::score_instance(encoder, &codec, &episode.choices, query)
                .map_err(|e| EvalError::Episode {
                    episode: idx,
                    source: TrainError::Pipeline(e),
                })?;
            predictions.push(result.predicted);
            golds.push(pipeline::gold_index(&episode.choices, query));
            results.push(result);
        }
        (predictions, golds, results, false)
    };

    let mut resolved = Vec::with_capacity(golds.len());
    for (q, gold) in golds.iter().enumerate() {
        resolved.push(gold.ok_or(EvalError::MissingGold { episode: idx, query: q })?);
    }
    let correct = predictions
        .iter()
        .zip(&resolved)
        .filter(|(p, g)| p == g)
        .count();
    let accuracy = correct as f64 / resolved.len().max(1) as f64;
    Ok(EpisodeOutcome {
        accuracy,
        predictions,
        golds: resolved,
        results,
        adapted,
    })
}

/// Evaluates a suite of episodes. Episodes run in parallel, each adapting a
/// private parameter clone; outcome order matches episode order.
pub fn evaluate(
    encoder: &Encoder,
    episodes: &[Episode],
    vocab: &Vocabulary,
    pooling: EntityPooling,
    adapt: &AdaptConfig,
) -> Result<SuiteResult, EvalError> {
    let started = Instant::now();
    let outcomes: Vec<EpisodeOutcome> = episodes
        .par_iter()
        .enumerate()
        .map(|(idx, ep)| run_episode(encoder, idx, ep, vocab, pooling, adapt))
        .collect::<Result<_, _>>()?;

    let per_episode: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let overall = aggregate(&per_episode)?;

    // breakdown keyed by the episode's declared setting
    let mut by_setting: BTreeMap<(usize, usize, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for (ep, acc) in episodes.iter().zip(&per_episode) {
        let key = (
            ep.n_way(),
            ep.k_shot(),
            (ep.nota_rate * 1e6).round() as u64,
        );
        by_setting
            .entry(key)
            .or_insert_with(|| (ep.nota_rate, Vec::new()))
            .1
            .push(*acc);
    }
    let mut settings = Vec::with_capacity(by_setting.len());
    for ((n_way, k_shot, _), (nota_rate, accs)) in by_setting {
        let agg = aggregate(&accs)?;
        settings.push(SettingSummary {
            n_way,
            k_shot,
            nota_rate,
            t: accs.len(),
            mean: agg.mean,
            ci: agg.ci,
            std: agg.std,
            degenerate: agg.degenerate,
        });
    }

    Ok(SuiteResult {
        t: per_episode.len(),
        mean: overall.mean,
        ci: overall.ci,
        std: overall.std,
        degenerate: overall.degenerate,
        formula: CI_FORMULA.to_string(),
        ci_basis: CI_BASIS.to_string(),
        settings,
        per_episode,
        outcomes,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}
