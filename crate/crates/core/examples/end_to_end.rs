//! Full-loop demonstration on the synthetic fixtures: pre-train on
//! rule-extracted paraphrases, meta-train episodically, then evaluate
//! held-out relations zero-shot and few-shot, with two controls (an
//! untrained encoder and a parameter-free lexical-overlap scorer).
//!
//!     cargo run -p lowshot --example end_to_end --release -- \
//!         [mode=all|meta|pre|hash] [meta-steps] [eval-episodes] [lr] [dropout] [pretrain-epochs]

use lowshot::data::Split;
use lowshot::encoder::transformer::TinyTransformer;
use lowshot::encoder::{Encoder, EncoderConfig};
use lowshot::episode::sample_episode;
use lowshot::eval::evaluate;
use lowshot::matching::EntityPooling;
use lowshot::pseudo::{build_pretraining_corpus, PseudoConfig};
use lowshot::seeds;
use lowshot::synthetic::{self, SyntheticConfig};
use lowshot::train::{meta_train, pretrain, AdaptConfig, EpisodeRanges, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).cloned().unwrap_or_else(|| "all".to_string());
    let meta_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let eval_episodes: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dropout: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let pretrain_epochs: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3);

    let syn = SyntheticConfig::default();
    let corpus = synthetic::relation_corpus(&syn);
    let sentences = synthetic::raw_sentences(&syn);
    let vocab = synthetic::fixture_vocabulary(&corpus, &sentences);
    println!(
        "fixtures: {} relations / {} instances, {} raw sentences, vocab {}",
        corpus.relations().len(),
        corpus.instances().len(),
        sentences.len(),
        vocab.len()
    );

    let pooling = EntityPooling::default();
    let config = EncoderConfig::tiny(vocab.len());
    let t0 = std::time::Instant::now();

    // episode suites over held-out relations
    let few_shot_suite: Vec<_> = (0..eval_episodes)
        .map(|i| {
            sample_episode(&corpus, Split::Test, 5, 1, 5, 0.0, seeds::mix(999, "fewshot", i as u64))
                .unwrap()
        })
        .collect();
    let zero_shot_suite: Vec<_> = (0..eval_episodes)
        .map(|i| {
            sample_episode(&corpus, Split::Test, 5, 0, 5, 0.0, seeds::mix(998, "zeroshot", i as u64))
                .unwrap()
        })
        .collect();
    let adapt = AdaptConfig::default();
    let no_adapt = AdaptConfig { n: 0, ..AdaptConfig::default() };

    if mode == "all" {
        // untrained control
        let untrained = TinyTransformer::new(config.clone(), 42).unwrap();
        let enc_untrained = Encoder::Tiny(untrained);
        let r = evaluate(&enc_untrained, &few_shot_suite, &vocab, pooling, &adapt).unwrap();
        println!(
            "untrained few-shot: mean {:.4} ± {:.4} ({:.1}s)",
            r.mean, r.ci, r.runtime_seconds
        );
    }

    if mode == "all" || mode == "hash" {
        // parameter-free control: nearest choice by bag-of-words distance
        // over fixed pseudorandom token vectors
        let hash = lowshot::encoder::hash::HashEncoder::new(64, 5);
        let bag = |tokens: &[String]| {
            let mut acc = ndarray::Array1::<f64>::zeros(64);
            for t in tokens {
                acc += &hash.token_vector(vocab.id(t));
            }
            acc / tokens.len() as f64
        };
        let accuracies: Vec<f64> = few_shot_suite
            .iter()
            .map(|ep| {
                let choice_bags: Vec<_> =
                    ep.choices.iter().map(|c| bag(&c.description)).collect();
                let correct = ep
                    .queries
                    .iter()
                    .filter(|q| {
                        let qb = bag(&q.tokens);
                        let best = choice_bags
                            .iter()
                            .enumerate()
                            .min_by(|(_, a), (_, b)| {
                                let da = (&qb - *a).mapv(|x| x * x).sum();
                                let db = (&qb - *b).mapv(|x| x * x).sum();
                                da.partial_cmp(&db).unwrap()
                            })
                            .map(|(i, _)| i)
                            .unwrap();
                        Some(&ep.choices[best].id) == q.relation.as_ref()
                    })
                    .count();
                correct as f64 / ep.queries.len() as f64
            })
            .collect();
        let agg = lowshot::eval::aggregate(&accuracies).unwrap();
        println!("lexical-overlap few-shot: mean {:.4} ± {:.4}", agg.mean, agg.ci);
    }

    if mode == "all" || mode == "pre" {
        // pre-training on the disjoint-family paraphrase corpus
        let batches =
            build_pretraining_corpus(&sentences, &PseudoConfig { batch_size: 5, seed: 1 }).unwrap();
        println!("pseudo corpus: {} batches of 5", batches.len());
        let mut model = TinyTransformer::new(config.clone(), 42).unwrap();
        let cfg = TrainConfig {
            lr,
            epochs: pretrain_epochs,
            dropout: Some(dropout),
            seed: 7,
            ..TrainConfig::default()
        };
        let t1 = std::time::Instant::now();
        let trace = pretrain(&mut model, &batches, &vocab, pooling, &cfg).unwrap();
        let means = trace.epoch_means();
        println!(
            "pretrain epoch means: {:?} ({:.1}s)",
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            t1.elapsed().as_secs_f64()
        );
        let enc = Encoder::Tiny(model);
        let r = evaluate(&enc, &zero_shot_suite, &vocab, pooling, &no_adapt).unwrap();
        println!(
            "pretrained zero-shot: mean {:.4} ± {:.4} ({:.1}s)",
            r.mean, r.ci, r.runtime_seconds
        );
    }

    if mode == "all" || mode == "meta" {
        // episodic meta-training from scratch
        let mut model = TinyTransformer::new(config.clone(), 42).unwrap();
        let ranges = EpisodeRanges {
            n_way: (5, 5),
            k_shot: (1, 2),
            queries: (2, 4),
            nota_rates: vec![0.0],
        };
        let cfg = TrainConfig {
            lr,
            steps: meta_steps,
            dropout: Some(dropout),
            seed: 13,
            ..TrainConfig::default()
        };
        let t1 = std::time::Instant::now();
        let trace = meta_train(&mut model, &corpus, &ranges, &vocab, pooling, &cfg).unwrap();
        let losses = trace.losses();
        let window = 100.min(losses.len());
        for chunk_start in (0..losses.len()).step_by((losses.len() / 8).max(1)) {
            let end = (chunk_start + window).min(losses.len());
            let mean: f64 = losses[chunk_start..end].iter().sum::<f64>() / (end - chunk_start) as f64;
            println!("  steps {chunk_start}..{end}: mean loss {mean:.4}");
        }
        println!(
            "meta-train {} steps done ({:.1}s)",
            losses.len(),
            t1.elapsed().as_secs_f64()
        );

        let enc = Encoder::Tiny(model);
        let r = evaluate(&enc, &few_shot_suite, &vocab, pooling, &adapt).unwrap();
        println!(
            "meta-trained few-shot: mean {:.4} ± {:.4} ({:.1}s)",
            r.mean, r.ci, r.runtime_seconds
        );
        let r = evaluate(&enc, &zero_shot_suite, &vocab, pooling, &no_adapt).unwrap();
        println!(
            "meta-trained zero-shot: mean {:.4} ± {:.4} ({:.1}s)",
            r.mean, r.ci, r.runtime_seconds
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
