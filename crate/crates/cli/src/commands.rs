//! Command implementations. Every command resolves its configuration, runs,
//! and leaves three kinds of trace behind in its run directory:
//! `manifest.json` (command, config hash, seed, versions, timestamps,
//! runtime), the artifacts themselves (corpus, checkpoint, trace CSV,
//! results JSON), and — for artifacts whose format cannot carry metadata
//! inline (checkpoints, JSONL corpora) — a `<name>.meta.json` sidecar naming
//! the producing command and config hash.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::json;

use lowshot::data::{read_corpus, LabeledCorpus};
use lowshot::encoder::{Encoder, EncoderProfile, TinyTransformer};
use lowshot::episode::{sample_episode, Episode};
use lowshot::eval::{evaluate, SuiteResult};
use lowshot::matching::EntityPooling;
use lowshot::pseudo::{
    build_pretraining_corpus, read_pseudo_corpus, tokenize_lines, write_pseudo_corpus,
    PseudoConfig,
};
use lowshot::seeds;
use lowshot::train::{meta_train, pretrain, AdaptConfig, TrainTrace};
use lowshot::vocab::Vocabulary;

use crate::config::RunConfig;
use crate::CliError;

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Shared run bookkeeping: the run directory is `<results>/<command>-<hash8>`
/// — deterministic, so repeating a run overwrites its own artifacts rather
/// than accumulating copies.
struct Run {
    command: &'static str,
    hash: String,
    dir: PathBuf,
    started: Instant,
    started_unix: f64,
}

impl Run {
    fn start(command: &'static str, cfg: &RunConfig) -> Result<Self, CliError> {
        let hash = cfg.hash();
        let dir = PathBuf::from(cfg.string("results.dir")).join(format!(
            "{command}-{}",
            &hash[..8]
        ));
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        Ok(Self {
            command,
            hash,
            dir,
            started: Instant::now(),
            started_unix: unix_now(),
        })
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The `<name>.meta.json` sidecar for formats without room for inline
    /// metadata.
    fn write_sidecar(&self, artifact: &Path) -> Result<(), CliError> {
        let meta = json!({
            "command": self.command,
            "config_hash": self.hash,
        });
        let mut name = artifact
            .file_name()
            .expect("artifact has a file name")
            .to_owned();
        name.push(".meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(runtime)?;
        std::fs::write(artifact.with_file_name(name), text + "\n").map_err(runtime)?;
        Ok(())
    }

    fn finish(
        self,
        cfg: &RunConfig,
        artifacts: &[&Path],
        extra: serde_json::Value,
    ) -> Result<(), CliError> {
        let seed = cfg.global_seed()?;
        let manifest = json!({
            "command": self.command,
            "config_hash": self.hash,
            "seed": seed,
            "versions": {
                "core": lowshot::VERSION,
                "cli": env!("CARGO_PKG_VERSION"),
            },
            "settings": cfg.settings,
            "artifacts": artifacts
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>(),
            "started_unix_seconds": self.started_unix,
            "finished_unix_seconds": unix_now(),
            "runtime_seconds": self.started.elapsed().as_secs_f64(),
            "summary": extra,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
        std::fs::write(self.artifact("manifest.json"), text + "\n").map_err(runtime)?;
        Ok(())
    }
}

fn write_trace(run: &Run, trace: &TrainTrace) -> Result<PathBuf, CliError> {
    let path = run.artifact("trace.csv");
    let body = format!(
        "# command={} config_hash={}\n{}",
        run.command,
        run.hash,
        trace.to_csv()
    );
    std::fs::write(&path, body).map_err(runtime)?;
    Ok(path)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    Vocabulary::read(&cfg.existing_path("paths.vocab")?).map_err(runtime)
}

fn load_corpus(cfg: &RunConfig) -> Result<LabeledCorpus, CliError> {
    read_corpus(
        &cfg.existing_path("paths.labeled_instances")?,
        &cfg.existing_path("paths.labeled_catalog")?,
    )
    .map_err(runtime)
}

fn require_tiny(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.profile()? {
        EncoderProfile::Tiny => Ok(()),
        other => Err(CliError::Config(format!(
            "encoder.profile = {other} has no trainable parameters; training needs tiny"
        ))),
    }
}

/// Fresh or checkpoint-initialized trainable encoder.
fn trainable_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<TinyTransformer, CliError> {
    match cfg.optional_path("paths.checkpoint") {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "paths.checkpoint = {} does not exist",
                    path.display()
                )));
            }
            match Encoder::load(&path).map_err(runtime)? {
                Encoder::Tiny(model) => Ok(model),
                other => Err(CliError::Config(format!(
                    "checkpoint {} holds a non-trainable {} encoder",
                    path.display(),
                    other.profile()
                ))),
            }
        }
        None => {
            let config = cfg.encoder_config(vocab.len())?;
            let seed = seeds::mix(cfg.global_seed()?, "encoder-init", 0);
            TinyTransformer::new(config, seed).map_err(runtime)
        }
    }
}

// ---------------------------------------------------------------------------

/// forge-data: raw sentences → triplets → paraphrases → batched pseudo
/// corpus JSONL in the run directory.
pub fn forge_data(cfg: &RunConfig) -> Result<(), CliError> {
    let run = Run::start("forge-data", cfg)?;
    let raw_path = cfg.existing_path("paths.raw_sentences")?;
    let text = std::fs::read_to_string(&raw_path).map_err(runtime)?;
    let sentences = tokenize_lines(&text);
    let pseudo_cfg = PseudoConfig {
        batch_size: cfg.usize("pseudo.batch_size")?,
        seed: seeds::mix(cfg.global_seed()?, "pseudo", 0),
    };
    let batches = build_pretraining_corpus(&sentences, &pseudo_cfg).map_err(runtime)?;
    let out = run.artifact("pseudo_corpus.jsonl");
    write_pseudo_corpus(&out, &batches).map_err(runtime)?;
    run.write_sidecar(&out)?;
    let instances: usize = batches.iter().map(|b| b.items.len()).sum();
    println!(
        "forged {} batches ({} instances) from {} sentences -> {}",
        batches.len(),
        instances,
        sentences.len(),
        out.display()
    );
    run.finish(
        cfg,
        &[&out],
        json!({
            "sentences": sentences.len(),
            "batches": batches.len(),
            "instances": instances,
        }),
    )
}

/// pretrain: paraphrase-vs-predicate matching over a pseudo corpus.
pub fn run_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    require_tiny(cfg)?;
    let run = Run::start("pretrain", cfg)?;
    let vocab = load_vocab(cfg)?;
    let batches =
        read_pseudo_corpus(&cfg.existing_path("paths.pseudo_corpus")?).map_err(runtime)?;
    let config = cfg.encoder_config(vocab.len())?;
    let seed = seeds::mix(cfg.global_seed()?, "encoder-init", 0);
    let mut model = TinyTransformer::new(config, seed).map_err(runtime)?;
    let train_cfg = cfg.train_config("pretrain")?;
    let trace = pretrain(
        &mut model,
        &batches,
        &vocab,
        EntityPooling::default(),
        &train_cfg,
    )
    .map_err(runtime)?;

    let ckpt = run.artifact("encoder.ckpt");
    Encoder::Tiny(model).save(&ckpt).map_err(runtime)?;
    run.write_sidecar(&ckpt)?;
    let trace_path = write_trace(&run, &trace)?;
    let epoch_means = trace.epoch_means();
    println!(
        "pretrained {} epochs over {} batches; epoch mean losses {:?} -> {}",
        train_cfg.epochs,
        batches.len(),
        epoch_means
            .iter()
            .map(|m| (m * 1e4).round() / 1e4)
            .collect::<Vec<_>>(),
        ckpt.display()
    );
    run.finish(
        cfg,
        &[&ckpt, &trace_path],
        json!({
            "batches": batches.len(),
            "epoch_loss_means": epoch_means,
        }),
    )
}

/// meta-train: one fresh episode per step on the labeled train split,
/// optionally starting from a checkpoint.
pub fn run_meta_train(cfg: &RunConfig) -> Result<(), CliError> {
    require_tiny(cfg)?;
    let run = Run::start("meta-train", cfg)?;
    let vocab = load_vocab(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mut model = trainable_model(cfg, &vocab)?;
    let ranges = cfg.episode_ranges()?;
    let train_cfg = cfg.train_config("meta")?;
    let trace = meta_train(
        &mut model,
        &corpus,
        &ranges,
        &vocab,
        EntityPooling::default(),
        &train_cfg,
    )
    .map_err(runtime)?;

    let ckpt = run.artifact("encoder.ckpt");
    Encoder::Tiny(model).save(&ckpt).map_err(runtime)?;
    run.write_sidecar(&ckpt)?;
    let trace_path = write_trace(&run, &trace)?;
    let losses = trace.losses();
    let tail_mean = if losses.len() >= 100 {
        losses[losses.len() - 100..].iter().sum::<f64>() / 100.0
    } else {
        losses.iter().sum::<f64>() / losses.len().max(1) as f64
    };
    println!(
        "meta-trained {} episodes; mean loss over final window {:.4} -> {}",
        losses.len(),
        tail_mean,
        ckpt.display()
    );
    run.finish(
        cfg,
        &[&ckpt, &trace_path],
        json!({
            "episodes": losses.len(),
            "final_window_mean_loss": tail_mean,
        }),
    )
}

// ---------------------------------------------------------------------------

fn eval_encoder(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Encoder, CliError> {
    match cfg.profile()? {
        EncoderProfile::Tiny => {
            // an unset checkpoint evaluates a fresh random model — the
            // untrained control
            Ok(Encoder::Tiny(trainable_model(cfg, vocab)?))
        }
        EncoderProfile::Hash => Encoder::build(
            EncoderProfile::Hash,
            cfg.encoder_config(vocab.len())?,
            seeds::mix(cfg.global_seed()?, "encoder-init", 0),
        )
        .map_err(runtime),
        EncoderProfile::External => Err(CliError::Config(
            "encoder.profile = external is an integration hook; no backend is bundled".into(),
        )),
    }
}

fn sample_suite(
    cfg: &RunConfig,
    corpus: &LabeledCorpus,
    k_shot: usize,
) -> Result<Vec<Episode>, CliError> {
    let split = cfg.split("episodes.split")?;
    let n = cfg.usize("episodes.N")?;
    let q = cfg.usize("episodes.Q")?;
    let nota_rate = cfg.f64("episodes.nota_rate")?;
    let count = cfg.usize("episodes.count")?;
    let seed = cfg.global_seed()?;
    (0..count)
        .map(|i| {
            sample_episode(
                corpus,
                split,
                n,
                k_shot,
                q,
                nota_rate,
                seeds::mix(seed, "episodes", i as u64),
            )
            .map_err(runtime)
        })
        .collect()
}

fn write_results(
    run: &Run,
    cfg: &RunConfig,
    result: &SuiteResult,
) -> Result<PathBuf, CliError> {
    let path = run.artifact("results.json");
    let body = json!({
        "command": run.command,
        "config_hash": run.hash,
        "settings": cfg.settings,
        "result": result,
    });
    let text = serde_json::to_string_pretty(&body).map_err(runtime)?;
    std::fs::write(&path, text + "\n").map_err(runtime)?;
    Ok(path)
}

/// eval: K-shot episodes with online adaptation; zero-shot-eval: K=0 and no
/// adaptation, everything else shared.
pub fn run_eval(cfg: &RunConfig, zero_shot: bool) -> Result<(), CliError> {
    let command: &'static str = if zero_shot { "zero-shot-eval" } else { "eval" };
    let run = Run::start(command, cfg)?;
    let vocab = load_vocab(cfg)?;
    let corpus = load_corpus(cfg)?;
    let encoder = eval_encoder(cfg, &vocab)?;
    let k_shot = if zero_shot { 0 } else { cfg.usize("episodes.K")? };
    let adapt = if zero_shot {
        AdaptConfig {
            n: 0,
            ..AdaptConfig::default()
        }
    } else {
        cfg.adapt_config()?
    };
    let episodes = sample_suite(cfg, &corpus, k_shot)?;
    let result = evaluate(&encoder, &episodes, &vocab, EntityPooling::default(), &adapt)
        .map_err(runtime)?;
    let results_path = write_results(&run, cfg, &result)?;
    println!(
        "{command}: accuracy {:.4} ± {:.4} over {} episodes ({}-way {}-shot, nota {}) -> {}",
        result.mean,
        result.ci,
        result.t,
        cfg.usize("episodes.N")?,
        k_shot,
        cfg.f64("episodes.nota_rate")?,
        results_path.display()
    );
    run.finish(
        cfg,
        &[&results_path],
        json!({
            "mean": result.mean,
            "ci": result.ci,
            "episodes": result.t,
        }),
    )
}

/// selftest: the built-in invariant suite; one line per check.
pub fn run_selftest() -> Result<(), CliError> {
    let report = lowshot::selftest::run_selftest();
    for check in &report.checks {
        let verdict = if check.passed { "ok" } else { "FAIL" };
        println!("{verdict:4} {} — {}", check.name, check.detail);
    }
    if report.passed() {
        println!("selftest: all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Runtime(anyhow::anyhow!(
            "selftest: {failed} of {} checks failed",
            report.checks.len()
        )))
    }
}
