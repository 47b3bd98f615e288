//! Run configuration: a flat `key = value` file plus dotted-path `--set`
//! overrides, resolved against a registry of known keys with defaults. The
//! resolved map (every known key, defaults filled in) is what gets hashed,
//! so two runs share a config hash exactly when every effective setting
//! matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use lowshot::encoder::{EncoderConfig, EncoderProfile};
use lowshot::data::Split;
use lowshot::train::{AdaptConfig, EpisodeRanges, TrainConfig};

use crate::CliError;

/// Every key the config file and `--set` accept, with its default. Paths are
/// interpreted relative to the working directory. `results.dir` falls back
/// to the `LOWSHOT_RESULTS` environment variable, then to `runs`.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "11"),
    ("encoder.profile", "tiny"),
    ("encoder.d_model", "64"),
    ("encoder.n_layers", "2"),
    ("encoder.n_heads", "4"),
    ("encoder.d_ff", "128"),
    ("encoder.max_len", "160"),
    ("encoder.dropout", "0.0"),
    ("paths.labeled_instances", "fixtures/labeled/instances.jsonl"),
    ("paths.labeled_catalog", "fixtures/labeled/catalog.json"),
    ("paths.raw_sentences", "fixtures/raw_sentences.txt"),
    ("paths.vocab", "fixtures/vocab.txt"),
    ("paths.pseudo_corpus", "fixtures/pseudo/corpus.jsonl"),
    // Checkpoint to load (eval) or to initialize from (meta-train); empty
    // means fresh random initialization from the run seed.
    ("paths.checkpoint", ""),
    ("results.dir", ""),
    ("pseudo.batch_size", "5"),
    ("pretrain.lr", "1e-3"),
    ("pretrain.epochs", "12"),
    ("pretrain.weight_decay", "1e-4"),
    ("pretrain.lr_decay", "1.0"),
    ("pretrain.clip", "1.0"),
    ("pretrain.dropout", "0.0"),
    ("meta.lr", "1e-3"),
    ("meta.steps", "3000"),
    ("meta.weight_decay", "1e-4"),
    ("meta.lr_decay", "1.0"),
    ("meta.clip", "1.0"),
    ("meta.dropout", "0.0"),
    ("meta.n_way", "2,5"),
    ("meta.k_shot", "1,2"),
    ("meta.queries", "2,4"),
    ("meta.nota_rates", "0.0,0.15,0.5"),
    ("adapt.n", "2"),
    ("adapt.lr", "1e-3"),
    ("adapt.restore", "true"),
    ("episodes.split", "test"),
    ("episodes.N", "5"),
    ("episodes.K", "1"),
    ("episodes.Q", "5"),
    ("episodes.nota_rate", "0.0"),
    ("episodes.count", "200"),
];

/// The resolved settings map: every known key present, file and overrides
/// applied on top of defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub settings: BTreeMap<String, String>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `key = value` lines; `#` starts a comment line, blanks are
/// skipped.
fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_err(format!(
                "{}:{}: expected `key = value`, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    /// Resolves defaults, then the config file (optional), then `--set`
    /// overrides. Rejects unknown keys so typos cannot silently revert a
    /// setting to its default.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut settings: BTreeMap<String, String> = KNOWN_KEYS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut apply = |source: BTreeMap<String, String>, origin: &str| -> Result<(), CliError> {
            for (key, value) in source {
                if !settings.contains_key(&key) {
                    return Err(config_err(format!("unknown setting {key:?} (from {origin})")));
                }
                settings.insert(key, value);
            }
            Ok(())
        };
        if let Some(path) = path {
            apply(parse_file(path)?, "config file")?;
        }
        apply(
            overrides.iter().cloned().collect(),
            "--set override",
        )?;
        if settings.get("results.dir").is_none_or(String::is_empty) {
            let root = std::env::var("LOWSHOT_RESULTS").unwrap_or_else(|_| "runs".to_string());
            settings.insert("results.dir".to_string(), root);
        }
        Ok(Self { settings })
    }

    /// SHA-256 over the canonical `key=value` listing of the resolved map.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.settings {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let mut out = String::new();
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn raw(&self, key: &str) -> &str {
        self.settings
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key:?} missing from resolved settings"))
    }

    pub fn string(&self, key: &str) -> String {
        self.raw(key).to_string()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(config_err(format!("{key} is not set")));
        }
        Ok(PathBuf::from(v))
    }

    /// Like `path`, but empty means "not configured".
    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// A path that must already exist on disk (read inputs).
    pub fn existing_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let p = self.path(key)?;
        if !p.exists() {
            return Err(config_err(format!("{key} = {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| config_err(format!("{key} = {:?} is not {what}", self.raw(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parse(key, "an integer")
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key, "an integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parse(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key, "true or false")
    }

    /// "lo,hi" inclusive range.
    pub fn range(&self, key: &str) -> Result<(usize, usize), CliError> {
        let v = self.raw(key);
        let (lo, hi) = v
            .split_once(',')
            .ok_or_else(|| config_err(format!("{key} = {v:?} is not a `lo,hi` range")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| config_err(format!("{key} = {v:?} is not a `lo,hi` range")))
        };
        Ok((parse(lo)?, parse(hi)?))
    }

    /// Comma-separated list of rates.
    pub fn rates(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| config_err(format!("{key} contains a non-number {s:?}")))
            })
            .collect()
    }

    pub fn split(&self, key: &str) -> Result<Split, CliError> {
        match self.raw(key) {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(config_err(format!(
                "{key} = {other:?}; expected train or test"
            ))),
        }
    }

    pub fn profile(&self) -> Result<EncoderProfile, CliError> {
        self.raw("encoder.profile")
            .parse()
            .map_err(|_| config_err(format!("encoder.profile = {:?}", self.raw("encoder.profile"))))
    }

    pub fn global_seed(&self) -> Result<u64, CliError> {
        self.u64("seed")
    }

    /// Encoder hyperparameters over the given vocabulary size.
    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig, CliError> {
        let config = EncoderConfig {
            vocab_size,
            d_model: self.usize("encoder.d_model")?,
            n_layers: self.usize("encoder.n_layers")?,
            n_heads: self.usize("encoder.n_heads")?,
            d_ff: self.usize("encoder.d_ff")?,
            max_len: self.usize("encoder.max_len")?,
            dropout: self.f64("encoder.dropout")?,
        };
        config
            .validate()
            .map_err(|e| config_err(format!("encoder settings rejected: {e}")))?;
        Ok(config)
    }

    /// Training settings for one period (`pretrain` or `meta`), seeded by
    /// derivation from the global seed so every period differs.
    pub fn train_config(&self, period: &str) -> Result<TrainConfig, CliError> {
        let key = |suffix: &str| format!("{period}.{suffix}");
        let mut cfg = TrainConfig {
            lr: self.f64(&key("lr"))?,
            weight_decay: self.f64(&key("weight_decay"))?,
            dropout: Some(self.f64(&key("dropout"))?),
            lr_decay: self.f64(&key("lr_decay"))?,
            clip: self.f64(&key("clip"))?,
            seed: lowshot::seeds::mix(self.global_seed()?, period, 0),
            ..TrainConfig::default()
        };
        match period {
            "pretrain" => cfg.epochs = self.usize(&key("epochs"))?,
            _ => cfg.steps = self.usize(&key("steps"))?,
        }
        cfg.validate()
            .map_err(|e| config_err(format!("{period} settings rejected: {e}")))?;
        Ok(cfg)
    }

    pub fn episode_ranges(&self) -> Result<EpisodeRanges, CliError> {
        let ranges = EpisodeRanges {
            n_way: self.range("meta.n_way")?,
            k_shot: self.range("meta.k_shot")?,
            queries: self.range("meta.queries")?,
            nota_rates: self.rates("meta.nota_rates")?,
        };
        ranges
            .validate()
            .map_err(|e| config_err(format!("meta episode ranges rejected: {e}")))?;
        Ok(ranges)
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, CliError> {
        let cfg = AdaptConfig {
            n: self.usize("adapt.n")?,
            lr: self.f64("adapt.lr")?,
            restore: self.bool("adapt.restore")?,
        };
        cfg.validate()
            .map_err(|e| config_err(format!("adapt settings rejected: {e}")))?;
        Ok(cfg)
    }
}

/// Splits one `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), CliError> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set {arg:?} is not key=value")))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}
