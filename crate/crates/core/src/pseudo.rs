//! Pseudo-labeled pre-training data: extract (subject, predicate, object)
//! triplets from raw sentences with a rule-based shallow chunker, wrap them
//! as "[H] subject [R] predicate [T] object", render deterministic paraphrase
//! templates, and assemble batches whose in-batch predicates are pairwise
//! distinct (the batch's predicates become the multi-choice prompt).
//!
//! The chunker is a desk-scale stand-in for an open information extraction
//! system: noun phrases are determiner-plus-noun runs, predicates are
//! verb-plus-particle runs (auxiliaries are transparent glue), conjunctions
//! and punctuation break clauses, and a triplet is any NP–VP–NP adjacency.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, RelId, RelationInstance, Span};
use crate::seeds;
use crate::vocab;

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "its", "his", "her", "their", "this", "these", "those", "our", "your",
    "my", "some", "each", "every",
];

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "am", "be", "been", "being", "has", "have", "had", "will",
    "would", "shall", "should", "can", "could", "may", "might", "must", "do", "does", "did",
];

const PARTICLES: &[&str] = &[
    "as", "to", "of", "in", "on", "at", "by", "with", "from", "into", "onto", "over", "under",
    "about", "for", "up", "out", "off", "down", "across", "through", "between", "against",
    "during", "without", "within", "toward",
];

/// Clause boundaries: conjunctions and relative/wh words, plus punctuation.
const BREAKS: &[&str] = &[
    "and", "or", "but", "while", "whereas", "because", "although", "that", "which", "who",
    "whom", "whose", "when", "where", "so", "then", "yet", "nor",
];

/// Irregular or suffix-less verbs the suffix rules cannot catch.
const VERB_LEXICON: &[&str] = &[
    "known", "traces", "wrote", "met", "took", "gave", "held", "won", "saw", "built", "sold",
    "became", "kept", "told", "made", "grew", "drew", "sang", "drove", "flew", "threw", "ran",
    "led", "sent", "taught", "brought",
];

/// Longest predicate (verb plus particle run) allowed into a triplet.
const MAX_PREDICATE_TOKENS: usize = 6;

const TEMPLATE_COUNT: usize = 2;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("malformed wrapped triplet: {0}")]
    MalformedWrap(String),
    #[error("corpus has {available} distinct predicates but batches need {needed}")]
    InsufficientDistinctPredicates { available: usize, needed: usize },
    #[error("no pseudo instances could be generated from the input")]
    EmptyStream,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("pseudo io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Det,
    Aux,
    Verb,
    Particle,
    Break,
    Noun,
}

fn classify(token: &str) -> Class {
    if !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation()) {
        return Class::Break;
    }
    let lower = token.to_lowercase();
    let lower = lower.as_str();
    if BREAKS.contains(&lower) {
        Class::Break
    } else if DETERMINERS.contains(&lower) {
        Class::Det
    } else if AUXILIARIES.contains(&lower) {
        Class::Aux
    } else if PARTICLES.contains(&lower) {
        Class::Particle
    } else if VERB_LEXICON.contains(&lower) || verb_suffix(lower) {
        Class::Verb
    } else {
        Class::Noun
    }
}

fn verb_suffix(lower: &str) -> bool {
    (lower.len() >= 4 && lower.ends_with("ed"))
        || (lower.len() >= 5
            && (lower.ends_with("ing")
                || lower.ends_with("ates")
                || lower.ends_with("izes")
                || lower.ends_with("fies")))
}

/// One extracted (subject, predicate, object) with source token spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub subject: Vec<String>,
    pub predicate: Vec<String>,
    pub object: Vec<String>,
    pub subject_span: Span,
    pub predicate_span: Span,
    pub object_span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Np,
    Vp,
    Boundary,
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    kind: Kind,
    start: usize,
    end: usize,
}

fn chunk_sentence(tokens: &[String]) -> Vec<Chunk> {
    let classes: Vec<Class> = tokens.iter().map(|t| classify(t)).collect();
    let n = tokens.len();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < n {
        match classes[i] {
            Class::Break => {
                chunks.push(Chunk {
                    kind: Kind::Boundary,
                    start: i,
                    end: i,
                });
                i += 1;
            }
            // Auxiliaries and stray particles are glue: skipped without
            // breaking NP–VP adjacency.
            Class::Aux | Class::Particle => i += 1,
            Class::Det => {
                let mut j = i + 1;
                while j < n && classes[j] == Class::Noun {
                    j += 1;
                }
                if j > i + 1 {
                    chunks.push(Chunk {
                        kind: Kind::Np,
                        start: i,
                        end: j - 1,
                    });
                    i = j;
                } else {
                    // dangling determiner
                    i += 1;
                }
            }
            Class::Noun => {
                let mut j = i;
                while j < n && classes[j] == Class::Noun {
                    j += 1;
                }
                chunks.push(Chunk {
                    kind: Kind::Np,
                    start: i,
                    end: j - 1,
                });
                i = j;
            }
            Class::Verb => {
                let mut j = i;
                while j < n && classes[j] == Class::Verb {
                    j += 1;
                }
                let mut k = j;
                while k < n && classes[k] == Class::Particle {
                    k += 1;
                }
                chunks.push(Chunk {
                    kind: Kind::Vp,
                    start: i,
                    end: k - 1,
                });
                i = k;
            }
        }
    }
    chunks
}

fn is_reserved_surface(token: &str) -> bool {
    vocab::SPECIALS
        .iter()
        .any(|s| s.eq_ignore_ascii_case(token))
}

/// Every NP–VP–NP adjacency in the chunk stream, in sentence order.
/// Predicates longer than `MAX_PREDICATE_TOKENS` and parts containing
/// reserved marker surfaces are dropped.
pub fn extract_triplets(tokens: &[String]) -> Vec<Triplet> {
    let chunks = chunk_sentence(tokens);
    let mut out = Vec::new();
    for idx in 0..chunks.len() {
        if chunks[idx].kind != Kind::Vp {
            continue;
        }
        if idx == 0 || idx + 1 >= chunks.len() {
            continue;
        }
        let (prev, vp, next) = (chunks[idx - 1], chunks[idx], chunks[idx + 1]);
        if prev.kind != Kind::Np || next.kind != Kind::Np {
            continue;
        }
        if vp.end - vp.start + 1 > MAX_PREDICATE_TOKENS {
            continue;
        }
        let part = |c: Chunk| tokens[c.start..=c.end].to_vec();
        let triplet = Triplet {
            subject: part(prev),
            predicate: part(vp),
            object: part(next),
            subject_span: Span::new(prev.start, prev.end),
            predicate_span: Span::new(vp.start, vp.end),
            object_span: Span::new(next.start, next.end),
        };
        if triplet
            .subject
            .iter()
            .chain(&triplet.predicate)
            .chain(&triplet.object)
            .any(|t| is_reserved_surface(t))
        {
            continue;
        }
        out.push(triplet);
    }
    out
}

/// "[H] subject [R] predicate [T] object", case preserved.
pub fn wrap_triplet(t: &Triplet) -> Vec<String> {
    let mut out = Vec::with_capacity(t.subject.len() + t.predicate.len() + t.object.len() + 3);
    out.push("[H]".to_string());
    out.extend(t.subject.iter().cloned());
    out.push("[R]".to_string());
    out.extend(t.predicate.iter().cloned());
    out.push("[T]".to_string());
    out.extend(t.object.iter().cloned());
    out
}

/// The (subject, predicate, object) token lists of an unwrapped triplet.
pub type TripletParts = (Vec<String>, Vec<String>, Vec<String>);

/// Inverse of `wrap_triplet` on the token parts.
pub fn unwrap_triplet(wrapped: &[String]) -> Result<TripletParts, PseudoError> {
    let malformed = |msg: &str| PseudoError::MalformedWrap(msg.to_string());
    let positions: Vec<(usize, &str)> = wrapped
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t.as_str(), "[H]" | "[R]" | "[T]"))
        .map(|(i, t)| (i, t.as_str()))
        .collect();
    if positions.len() != 3 {
        return Err(malformed("expected exactly one [H], [R], and [T]"));
    }
    let ((h, hm), (r, rm), (t, tm)) = (positions[0], positions[1], positions[2]);
    if hm != "[H]" || rm != "[R]" || tm != "[T]" || h != 0 {
        return Err(malformed("markers must appear as [H] … [R] … [T] from position 0"));
    }
    let subject = wrapped[h + 1..r].to_vec();
    let predicate = wrapped[r + 1..t].to_vec();
    let object = wrapped[t + 1..].to_vec();
    if subject.is_empty() || predicate.is_empty() || object.is_empty() {
        return Err(malformed("subject, predicate, and object must be nonempty"));
    }
    Ok((subject, predicate, object))
}

/// Where a pseudo instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Origin {
    pub sentence: usize,
    pub ordinal: usize,
}

/// A paraphrase sentence labeled with its predicate, ready for entity-marker
/// wrapping at the recorded subject/object spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoInstance {
    pub paraphrase: Vec<String>,
    pub predicate: Vec<String>,
    pub subj_span: Span,
    pub obj_span: Span,
    pub origin: Origin,
}

impl PseudoInstance {
    /// Lowercased, whitespace-collapsed predicate key used for batch
    /// uniqueness and as the pseudo relation id.
    pub fn predicate_key(&self) -> String {
        normalize_predicate(&self.predicate)
    }

    /// Converts to a labeled instance; head/tail follow position order, so
    /// templates that mention the object first put it in the head slot.
    pub fn to_instance(&self) -> Result<RelationInstance, DataError> {
        let (head, tail) = if self.subj_span.start < self.obj_span.start {
            (self.subj_span, self.obj_span)
        } else {
            (self.obj_span, self.subj_span)
        };
        RelationInstance::new(
            self.paraphrase.clone(),
            head,
            tail,
            Some(RelId::new(self.predicate_key())),
        )
    }

    /// Checks that subject and object occur exactly once each, at their
    /// recorded spans.
    pub fn validate(&self) -> Result<(), PseudoError> {
        let subject = span_tokens(&self.paraphrase, self.subj_span)
            .ok_or_else(|| PseudoError::MalformedWrap("subject span out of range".into()))?;
        let object = span_tokens(&self.paraphrase, self.obj_span)
            .ok_or_else(|| PseudoError::MalformedWrap("object span out of range".into()))?;
        for (name, part, span) in [
            ("subject", subject, self.subj_span),
            ("object", object, self.obj_span),
        ] {
            let hits = occurrences(&self.paraphrase, part);
            if hits != vec![span.start] {
                return Err(PseudoError::MalformedWrap(format!(
                    "{name} must occur exactly once at its span; found at {hits:?}"
                )));
            }
        }
        Ok(())
    }
}

fn span_tokens(tokens: &[String], span: Span) -> Option<&[String]> {
    if span.end < tokens.len() && span.start <= span.end {
        Some(&tokens[span.start..=span.end])
    } else {
        None
    }
}

fn occurrences(haystack: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| &haystack[i..i + needle.len()] == needle)
        .collect()
}

pub fn normalize_predicate(tokens: &[String]) -> String {
    tokens
        .iter()
        .flat_map(|t| t.split_whitespace())
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders one of the rotated templates over a wrapped triplet; everything
/// is lowercased. Template 0: "as for ⟨object⟩ , ⟨subject⟩ ⟨predicate⟩ ." —
/// template 1: "there is ⟨subject⟩ that ⟨predicate⟩ ⟨object⟩ ." — indices
/// rotate modulo the template count, so callers can pass a running ordinal.
pub fn generate_paraphrase(
    wrapped: &[String],
    template_index: usize,
) -> Result<PseudoInstance, PseudoError> {
    let (subject, predicate, object) = unwrap_triplet(wrapped)?;
    let lower = |part: &[String]| -> Vec<String> { part.iter().map(|t| t.to_lowercase()).collect() };
    let (subject, predicate, object) = (lower(&subject), lower(&predicate), lower(&object));
    let mut paraphrase = Vec::new();
    let (subj_span, obj_span) = match template_index % TEMPLATE_COUNT {
        0 => {
            paraphrase.extend(["as".to_string(), "for".to_string()]);
            let obj_start = paraphrase.len();
            paraphrase.extend(object.iter().cloned());
            let obj_end = paraphrase.len() - 1;
            paraphrase.push(",".to_string());
            let subj_start = paraphrase.len();
            paraphrase.extend(subject.iter().cloned());
            let subj_end = paraphrase.len() - 1;
            paraphrase.extend(predicate.iter().cloned());
            paraphrase.push(".".to_string());
            (Span::new(subj_start, subj_end), Span::new(obj_start, obj_end))
        }
        _ => {
            paraphrase.extend(["there".to_string(), "is".to_string()]);
            let subj_start = paraphrase.len();
            paraphrase.extend(subject.iter().cloned());
            let subj_end = paraphrase.len() - 1;
            paraphrase.push("that".to_string());
            paraphrase.extend(predicate.iter().cloned());
            let obj_start = paraphrase.len();
            paraphrase.extend(object.iter().cloned());
            let obj_end = paraphrase.len() - 1;
            paraphrase.push(".".to_string());
            (Span::new(subj_start, subj_end), Span::new(obj_start, obj_end))
        }
    };
    let instance = PseudoInstance {
        paraphrase,
        predicate,
        subj_span,
        obj_span,
        origin: Origin::default(),
    };
    Ok(instance)
}

/// Settings for pseudo-corpus assembly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoConfig {
    /// Instances (and therefore prompt choices) per batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seed: 0,
        }
    }
}

/// One pre-training batch: `items[i]`'s predicate is `choices[i]`, so the
/// gold choice index of item i is i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoBatch {
    pub id: usize,
    pub choices: Vec<String>,
    pub items: Vec<PseudoInstance>,
}

impl PseudoBatch {
    /// The batch's predicates as prompt choices (description = predicate
    /// tokens).
    pub fn choice_types(&self) -> Vec<crate::data::RelationType> {
        self.choices
            .iter()
            .map(|p| {
                crate::data::RelationType::new(
                    RelId::new(p.clone()),
                    p.split_whitespace().map(String::from).collect(),
                )
                .expect("predicates are nonempty")
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), PseudoError> {
        let invariant = |msg: String| PseudoError::MalformedWrap(msg);
        if self.items.len() != self.choices.len() {
            return Err(invariant(format!(
                "batch {}: {} items vs {} choices",
                self.id,
                self.items.len(),
                self.choices.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, item) in self.items.iter().enumerate() {
            item.validate()?;
            let key = item.predicate_key();
            if key != self.choices[i] {
                return Err(invariant(format!(
                    "batch {}: item {i} predicate {key:?} does not match choice {:?}",
                    self.id, self.choices[i]
                )));
            }
            if !seen.insert(key.clone()) {
                return Err(invariant(format!(
                    "batch {}: duplicate predicate {key:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Runs extract → wrap → paraphrase over the sentences, shuffles the
/// instance stream (seeded), and greedily packs batches of `batch_size`
/// pairwise-distinct predicates. Instances that cannot complete a final
/// batch are dropped.
pub fn build_pretraining_corpus(
    sentences: &[Vec<String>],
    cfg: &PseudoConfig,
) -> Result<Vec<PseudoBatch>, PseudoError> {
    if cfg.batch_size == 0 {
        return Err(PseudoError::ZeroBatchSize);
    }
    let mut stream = Vec::new();
    let mut ordinal = 0usize;
    for (s, sentence) in sentences.iter().enumerate() {
        for triplet in extract_triplets(sentence) {
            let wrapped = wrap_triplet(&triplet);
            let mut instance = generate_paraphrase(&wrapped, ordinal % TEMPLATE_COUNT)?;
            instance.origin = Origin {
                sentence: s,
                ordinal,
            };
            ordinal += 1;
            if instance.validate().is_ok() {
                stream.push(instance);
            }
        }
    }
    if stream.is_empty() {
        return Err(PseudoError::EmptyStream);
    }
    let distinct: BTreeSet<String> = stream.iter().map(|i| i.predicate_key()).collect();
    if distinct.len() < cfg.batch_size {
        return Err(PseudoError::InsufficientDistinctPredicates {
            available: distinct.len(),
            needed: cfg.batch_size,
        });
    }

    // Seeded shuffle: order by keyed hash of the instance ordinal.
    let mut order: Vec<usize> = (0..stream.len()).collect();
    order.sort_by_key(|&i| {
        (
            seeds::mix(cfg.seed, "pseudo-shuffle", stream[i].origin.ordinal as u64),
            i,
        )
    });

    let mut batches = Vec::new();
    let mut taken = vec![false; stream.len()];
    let mut cursor_done = false;
    while !cursor_done {
        let mut picked: Vec<usize> = Vec::with_capacity(cfg.batch_size);
        let mut keys: BTreeSet<String> = BTreeSet::new();
        for &i in &order {
            if taken[i] {
                continue;
            }
            let key = stream[i].predicate_key();
            if keys.contains(&key) {
                continue;
            }
            keys.insert(key);
            picked.push(i);
            if picked.len() == cfg.batch_size {
                break;
            }
        }
        if picked.len() < cfg.batch_size {
            cursor_done = true;
        } else {
            for &i in &picked {
                taken[i] = true;
            }
            let items: Vec<PseudoInstance> = picked.iter().map(|&i| stream[i].clone()).collect();
            let choices = items.iter().map(|it| it.predicate_key()).collect();
            let batch = PseudoBatch {
                id: batches.len(),
                choices,
                items,
            };
            batch.validate()?;
            batches.push(batch);
        }
    }
    Ok(batches)
}

/// Splits one raw line per sentence into whitespace tokens, skipping blank
/// lines.
pub fn tokenize_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|t: &Vec<String>| !t.is_empty())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoRecord {
    paraphrase: Vec<String>,
    predicate: Vec<String>,
    /// 1-based inclusive, matching the labeled-corpus file convention.
    subj_span: [usize; 2],
    obj_span: [usize; 2],
    batch_id: usize,
    choices: Vec<String>,
}

/// One JSONL line per instance; instances of a batch are contiguous and
/// carry the batch's ordered choice list.
pub fn write_pseudo_corpus(path: &Path, batches: &[PseudoBatch]) -> Result<(), PseudoError> {
    let mut out = BufWriter::new(File::create(path)?);
    for batch in batches {
        for item in &batch.items {
            let record = PseudoRecord {
                paraphrase: item.paraphrase.clone(),
                predicate: item.predicate.clone(),
                subj_span: [item.subj_span.start + 1, item.subj_span.end + 1],
                obj_span: [item.obj_span.start + 1, item.obj_span.end + 1],
                batch_id: batch.id,
                choices: batch.choices.clone(),
            };
            serde_json::to_writer(&mut out, &record)
                .map_err(|e| PseudoError::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: e.to_string(),
                })?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pseudo_corpus(path: &Path) -> Result<Vec<PseudoBatch>, PseudoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut batches: Vec<PseudoBatch> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| PseudoError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let record: PseudoRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let to_span = |pair: [usize; 2], name: &str| -> Result<Span, PseudoError> {
            if pair[0] == 0 || pair[1] == 0 {
                return Err(parse_err(format!("{name} is 1-based; got {pair:?}")));
            }
            Ok(Span::new(pair[0] - 1, pair[1] - 1))
        };
        let item = PseudoInstance {
            paraphrase: record.paraphrase,
            predicate: record.predicate,
            subj_span: to_span(record.subj_span, "subj_span")?,
            obj_span: to_span(record.obj_span, "obj_span")?,
            origin: Origin::default(),
        };
        item.validate()
            .map_err(|e| parse_err(e.to_string()))?;
        if record.batch_id == batches.len() {
            batches.push(PseudoBatch {
                id: record.batch_id,
                choices: record.choices,
                items: vec![item],
            });
        } else if record.batch_id + 1 == batches.len() {
            let batch = batches.last_mut().expect("checked nonempty");
            if batch.choices != record.choices {
                return Err(parse_err("choices differ within one batch".into()));
            }
            batch.items.push(item);
        } else {
            return Err(parse_err(format!(
                "batch ids must be contiguous; got {} after {}",
                record.batch_id,
                batches.len().saturating_sub(1)
            )));
        }
    }
    for batch in &batches {
        batch.validate().map_err(|e| PseudoError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    Ok(batches)
}
