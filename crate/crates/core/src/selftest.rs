//! Built-in invariant suite: cheap, deterministic checks that recompute the
//! library's numeric contracts from direct formulas and compare against the
//! shipped implementations. Every check is self-contained — fixed seeds, no
//! filesystem state beyond a scratch directory — so a clean build either
//! passes the whole suite or names exactly which contract broke.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RelId, RelationInstance, RelationType, Span, Split};
use crate::encoder::{Encoder, EncoderConfig, EncoderProfile};
use crate::episode::{round_half_away, sample_episode};
use crate::eval::aggregate;
use crate::matching::{match_encoded, EntityPooling};
use crate::pipeline::{self, TaskCodec};
use crate::prompt::ModelInput;
use crate::pseudo;
use crate::seeds;
use crate::synthetic::{self, SyntheticConfig};
use crate::train::{adapt_and_predict, AdaptConfig};
use crate::vocab::Vocabulary;

/// One named check with its verdict and a short human-readable detail line.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Results of the full suite, in execution order.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every check. Deterministic; finishes in a few seconds.
pub fn run_selftest() -> SelftestReport {
    let checks = vec![
        outcome("matching-oracle", check_matching_oracle()),
        outcome("gradient-fd", check_gradient_fd()),
        outcome("adaptation-restore", check_adaptation_restore()),
        outcome("episode-invariants", check_episode_invariants()),
        outcome("pipeline-fidelity", check_pipeline_fidelity()),
        outcome("aggregate-arithmetic", check_aggregate_arithmetic()),
        outcome("checkpoint-roundtrip", check_checkpoint_roundtrip()),
    ];
    SelftestReport { checks }
}

fn outcome(name: &'static str, result: Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

// ---------------------------------------------------------------------------
// 1. Matching head vs. direct formulas on random encodings.

/// Direct-formula reference for the whole matching head, written against the
/// definitions rather than the library's vectorized code: mean the marker
/// rows, take plain Euclidean distances, softmax the negated distances with
/// a min-shift, argmax with lowest-index ties, and the loss
/// `D_gold − m + ln Σ_j exp(m − D_j)` with `m = min_j D_j`.
fn reference_match(
    encoded: &Array2<f64>,
    input: &ModelInput,
    pooling: EntityPooling,
    gold: usize,
) -> (Vec<f64>, Vec<f64>, usize, f64) {
    let d = encoded.ncols();
    let mut inst = Array1::<f64>::zeros(d);
    let marker_rows: Vec<usize> = match pooling {
        EntityPooling::OpenMarkers => vec![input.e1_open, input.e2_open],
        EntityPooling::OpenAndCloseMarkers => vec![
            input.e1_open,
            input.e1_close,
            input.e2_open,
            input.e2_close,
        ],
    };
    for &r in &marker_rows {
        inst = inst + encoded.row(r);
    }
    inst /= marker_rows.len() as f64;

    let mut distances = Vec::new();
    for &c in &input.choice_markers {
        let mut sq = 0.0;
        for k in 0..d {
            let diff = inst[k] - encoded[(c, k)];
            sq += diff * diff;
        }
        distances.push(sq.sqrt());
    }
    let m = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|&x| (m - x).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut predicted = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[predicted] {
            predicted = i;
        }
    }
    let loss = distances[gold] - m + z.ln();
    (distances, probabilities, predicted, loss)
}

fn check_matching_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(101, "selftest", 0));
    let cases = 200;
    for case in 0..cases {
        let d = rng.gen_range(2..10usize);
        // at least n + 6 distinct positions must fit: choices plus four
        // entity markers plus two separators
        let len = rng.gen_range(12..48usize);
        let n = rng.gen_range(1..6usize);
        let encoded = Array2::from_shape_fn((len, d), |_| rng.gen_range(-2.0..2.0));
        // distinct marker positions for choices and the four entity markers
        let mut positions: Vec<usize> = (0..len).collect();
        for i in (1..positions.len()).rev() {
            let j = rng.gen_range(0..=i);
            positions.swap(i, j);
        }
        let input = ModelInput {
            ids: vec![0; len],
            choice_markers: positions[..n].to_vec(),
            e1_open: positions[n],
            e1_close: positions[n + 1],
            e2_open: positions[n + 2],
            e2_close: positions[n + 3],
            sep_positions: [positions[n + 4], positions[n + 5]],
        };
        let gold = rng.gen_range(0..n);
        let pooling = if case % 2 == 0 {
            EntityPooling::OpenMarkers
        } else {
            EntityPooling::OpenAndCloseMarkers
        };
        let got = match_encoded(encoded.view(), &input, pooling, Some(gold));
        let (dist, prob, pred, loss) = reference_match(&encoded, &input, pooling, gold);
        for (a, b) in got.distances.iter().zip(&dist) {
            if (a - b).abs() > 1e-9 {
                return Err(format!("case {case}: distance {a} vs reference {b}"));
            }
        }
        for (a, b) in got.probabilities.iter().zip(&prob) {
            if (a - b).abs() > 1e-6 {
                return Err(format!("case {case}: probability {a} vs reference {b}"));
            }
        }
        if got.predicted != pred {
            return Err(format!(
                "case {case}: predicted {} vs reference {pred}",
                got.predicted
            ));
        }
        let got_loss = got.loss.ok_or_else(|| format!("case {case}: loss missing"))?;
        if (got_loss - loss).abs() > 1e-6 {
            return Err(format!("case {case}: loss {got_loss} vs reference {loss}"));
        }
    }
    Ok(format!("{cases} random cases match direct formulas"))
}

// ---------------------------------------------------------------------------
// 2. End-to-end gradients vs. central finite differences on a pocket model.

fn fd_task() -> (Vocabulary, Vec<RelationType>, RelationInstance) {
    let vocab = Vocabulary::build(["alpha", "beta", "gamma", "delta"]);
    let choices = vec![
        RelationType::new(RelId::new("r0"), vec!["alpha".into()]).unwrap(),
        RelationType::new(RelId::new("r1"), vec!["beta".into(), "gamma".into()]).unwrap(),
    ];
    let inst = RelationInstance::new(
        vec!["alpha".into(), "delta".into(), "gamma".into()],
        Span::new(0, 0),
        Span::new(2, 2),
        Some(RelId::new("r0")),
    )
    .unwrap();
    (vocab, choices, inst)
}

fn check_gradient_fd() -> Result<String, String> {
    let (vocab, choices, inst) = fd_task();
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_len: 16,
        dropout: 0.0,
    };
    let mut model = crate::encoder::TinyTransformer::new(config, 5).map_err(|e| e.to_string())?;
    let codec = TaskCodec::new(&vocab, EntityPooling::OpenMarkers, 16);
    let (_, grads) = pipeline::loss_and_grads(&model, &codec, &choices, &inst, None)
        .map_err(|e| e.to_string())?;

    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(101, "selftest", 2));
    let mut checked = 0;
    for _ in 0..24 {
        let name = &names[rng.gen_range(0..names.len())];
        let flat = rng.gen_range(0..model.params.get(name).len());
        let original = model.params.tensors[name].as_slice().unwrap()[flat];
        let eps = 1e-5 * original.abs().max(1.0);
        let mut loss_at = |theta: f64| -> Result<f64, String> {
            model.params.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[flat] = theta;
            let (r, _) = pipeline::loss_and_grads(&model, &codec, &choices, &inst, None)
                .map_err(|e| e.to_string())?;
            r.loss.ok_or_else(|| "loss missing".to_string())
        };
        let plus = loss_at(original + eps)?;
        let minus = loss_at(original - eps)?;
        loss_at(original)?;
        let fd = (plus - minus) / (2.0 * eps);
        let an = grads.get(name).as_slice().unwrap()[flat];
        let tol = 1e-3 * fd.abs().max(an.abs()).max(1e-3);
        if (fd - an).abs() > tol {
            return Err(format!(
                "{name}[{flat}]: finite difference {fd:.3e} vs analytic {an:.3e}"
            ));
        }
        checked += 1;
    }
    Ok(format!("{checked} sampled coordinates agree with central differences"))
}

// ---------------------------------------------------------------------------
// 3. Adaptation snapshot/restore and the n=0 identity.

fn pocket_corpus() -> crate::data::LabeledCorpus {
    synthetic::relation_corpus(&SyntheticConfig {
        seed: 29,
        relations: 8,
        train_relations: 5,
        instances_per_relation: 8,
        predicates: 4,
        sentences_per_predicate: 2,
    })
}

fn check_adaptation_restore() -> Result<String, String> {
    let corpus = pocket_corpus();
    let sentences = synthetic::raw_sentences(&SyntheticConfig {
        seed: 29,
        relations: 8,
        train_relations: 5,
        instances_per_relation: 8,
        predicates: 4,
        sentences_per_predicate: 2,
    });
    let vocab = synthetic::fixture_vocabulary(&corpus, &sentences);
    let config = EncoderConfig {
        max_len: 96,
        dropout: 0.0,
        ..EncoderConfig::tiny(vocab.len())
    };
    let pooling = EntityPooling::OpenMarkers;
    for (i, n) in [(0usize, 0usize), (1, 1), (2, 2), (3, 5)] {
        let mut model =
            crate::encoder::TinyTransformer::new(config.clone(), 7).map_err(|e| e.to_string())?;
        let episode = sample_episode(
            &corpus,
            Split::Train,
            3,
            2,
            2,
            0.0,
            seeds::mix(101, "selftest-episode", i as u64),
        )
        .map_err(|e| e.to_string())?;
        let before = model.params.digest();
        let adapt = AdaptConfig {
            n,
            ..AdaptConfig::default()
        };
        let out = adapt_and_predict(&mut model, &episode, &vocab, pooling, &adapt)
            .map_err(|e| e.to_string())?;
        let after = model.params.digest();
        if before != after || out.digest_before != before || out.digest_after != after {
            return Err(format!("n={n}: parameter digest changed across adaptation"));
        }
        if n == 0 {
            // no-adaptation predictions must equal direct scoring exactly
            let codec = TaskCodec::new(&vocab, pooling, config.max_len);
            for (q, query) in episode.queries.iter().enumerate() {
                let direct = pipeline::score_with_model(&model, &codec, &episode.choices, query)
                    .map_err(|e| e.to_string())?;
                if direct.predicted != out.predictions[q] {
                    return Err(format!("n=0 query {q}: adapted path diverged from direct"));
                }
            }
        }
    }
    Ok("digests restored for n in {0,1,2,5}; n=0 equals direct scoring".to_string())
}

// ---------------------------------------------------------------------------
// 4. Episode construction invariants and exact none-of-the-above counts.

fn check_episode_invariants() -> Result<String, String> {
    let corpus = pocket_corpus();
    let mut count = 0;
    for (i, &rate) in [0.0, 0.15, 0.5].iter().cycle().take(300).enumerate() {
        let seed = seeds::mix(101, "selftest-nota", i as u64);
        let q = 2 + i % 4;
        let episode = sample_episode(&corpus, Split::Train, 3, 1, q, rate, seed)
            .map_err(|e| e.to_string())?;
        episode.validate().map_err(|e| e.to_string())?;
        let nota_queries = episode
            .queries
            .iter()
            .filter(|inst| inst.relation.as_ref().is_some_and(RelId::is_nota))
            .count();
        let expected = round_half_away(rate * q as f64);
        if nota_queries != expected {
            return Err(format!(
                "episode {i}: {nota_queries} none-of-the-above queries, expected {expected}"
            ));
        }
        count += 1;
    }
    Ok(format!("{count} episodes validated with exact out-of-set counts"))
}

// ---------------------------------------------------------------------------
// 5. Extract → wrap → paraphrase fidelity on the reference sentence.

fn check_pipeline_fidelity() -> Result<String, String> {
    let sentence: Vec<String> =
        "The service traces its history to an online service known as PlayNET ."
            .split_whitespace()
            .map(String::from)
            .collect();
    let triplets = pseudo::extract_triplets(&sentence);
    let rendered: Vec<String> = triplets
        .iter()
        .map(|t| {
            format!(
                "({}, {}, {})",
                t.subject.join(" "),
                t.predicate.join(" "),
                t.object.join(" ")
            )
        })
        .collect();
    let expected = [
        "(The service, traces, its history)",
        "(an online service, known as, PlayNET)",
    ];
    if rendered != expected {
        return Err(format!("triplets {rendered:?}, expected {expected:?}"));
    }
    let wrapped = pseudo::wrap_triplet(&triplets[1]);
    let expected_wrap = "[H] an online service [R] known as [T] PlayNET";
    if wrapped.join(" ") != expected_wrap {
        return Err(format!("wrapped {:?}", wrapped.join(" ")));
    }
    let (subj, pred, obj) = pseudo::unwrap_triplet(&wrapped).map_err(|e| e.to_string())?;
    if subj != triplets[1].subject || pred != triplets[1].predicate || obj != triplets[1].object {
        return Err("unwrap did not invert wrap".to_string());
    }
    let p0 = pseudo::generate_paraphrase(&wrapped, 0).map_err(|e| e.to_string())?;
    p0.validate().map_err(|e| e.to_string())?;
    if p0.paraphrase.join(" ") != "as for playnet , an online service known as ." {
        return Err(format!("template 0 produced {:?}", p0.paraphrase.join(" ")));
    }
    Ok("reference sentence reproduces byte-exact triplets, wrap, and paraphrase".to_string())
}

// ---------------------------------------------------------------------------
// 6. Accuracy aggregation arithmetic.

fn check_aggregate_arithmetic() -> Result<String, String> {
    let agg = aggregate(&[1.0, 0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    let std = (1.0f64 / 3.0).sqrt(); // sample variance of two 1s and two 0s
    let ci = 1.96 * std / 2.0;
    if (agg.mean - 0.5).abs() > 1e-12 || (agg.std - std).abs() > 1e-12 || (agg.ci - ci).abs() > 1e-12
    {
        return Err(format!(
            "aggregate([1,0,1,0]) = ({}, {}, {})",
            agg.mean, agg.ci, agg.std
        ));
    }
    // constant-variance suite: quadrupling the episode count halves the ci
    let pattern: Vec<f64> = [1.0, 0.0].iter().cycle().take(40).cloned().collect();
    let small = aggregate(&pattern[..10]).map_err(|e| e.to_string())?;
    let large = aggregate(&pattern).map_err(|e| e.to_string())?;
    let ratio = large.ci / small.ci;
    if (ratio - 0.5).abs() > 0.05 {
        return Err(format!("ci ratio under 4x episodes: {ratio}"));
    }
    let degenerate = aggregate(&[1.0]).map_err(|e| e.to_string())?;
    if !degenerate.degenerate || degenerate.ci != 0.0 || degenerate.std != 0.0 {
        return Err("single-episode aggregate is not flagged degenerate".to_string());
    }
    Ok("closed-form mean/std/ci and the 1/\u{221a}T law hold".to_string())
}

// ---------------------------------------------------------------------------
// 7. Checkpoint save/load round trip.

fn check_checkpoint_roundtrip() -> Result<String, String> {
    let dir = std::env::temp_dir().join(format!("lowshot-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.ckpt");
    let config = EncoderConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 24,
        dropout: 0.0,
    };
    let enc = Encoder::build(EncoderProfile::Tiny, config, 31).map_err(|e| e.to_string())?;
    enc.save(&path).map_err(|e| e.to_string())?;
    let loaded = Encoder::load(&path).map_err(|e| e.to_string())?;
    std::fs::remove_file(&path).ok();
    std::fs::remove_dir(&dir).ok();
    if loaded.config() != enc.config() {
        return Err("config did not round-trip".to_string());
    }
    let ids = [1u32, 5, 9, 13];
    let a = enc.encode(&ids).map_err(|e| e.to_string())?;
    let b = loaded.encode(&ids).map_err(|e| e.to_string())?;
    let worst = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-5 {
        return Err(format!("outputs drifted {worst:.2e} across f32 storage"));
    }
    Ok(format!("encodings agree within {worst:.1e} after f32 round trip"))
}
