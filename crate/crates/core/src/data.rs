//! Relation instances, relation types, and labeled corpora.
//!
//! An instance is a token sequence with two non-overlapping entity spans,
//! head before tail. Spans are 0-based inclusive in memory and 1-based
//! inclusive in the JSONL file format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved identifier for the none-of-the-above choice.
pub const NOTA_ID: &str = "NOTA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("instance has no tokens")]
    EmptyTokens,
    #[error("head span must end before tail span starts (head ends at {head_end}, tail starts at {tail_start})")]
    SpanOrder { head_end: usize, tail_start: usize },
    #[error("span [{start}, {end}] out of bounds for {len} tokens")]
    SpanBounds { start: usize, end: usize, len: usize },
    #[error("relation description is empty")]
    EmptyDescription,
    #[error("choice set has more than one none-of-the-above entry")]
    DuplicateNota,
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: invalid instance: {source}")]
    Invariant {
        path: String,
        line: usize,
        source: Box<DataError>,
    },
    #[error("instance relation {relation:?} missing from catalog")]
    UnknownRelation { relation: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("catalog {path}: {message}")]
    Catalog { path: String, message: String },
}

/// Inclusive token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive spans always cover at least one token
    }
}

/// Stable relation identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelId(pub String);

impl RelId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn nota() -> Self {
        Self(NOTA_ID.to_string())
    }

    pub fn is_nota(&self) -> bool {
        self.0 == NOTA_ID
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One relation mention: tokens plus head/tail entity spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInstance {
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    /// Gold relation; `None` for unlabeled raw text.
    pub relation: Option<RelId>,
}

impl RelationInstance {
    pub fn new(
        tokens: Vec<String>,
        head: Span,
        tail: Span,
        relation: Option<RelId>,
    ) -> Result<Self, DataError> {
        let inst = Self {
            tokens,
            head,
            tail,
            relation,
        };
        validate_instance(&inst)?;
        Ok(inst)
    }
}

/// Checks all instance invariants and returns the instance untouched.
pub fn validate_instance(inst: &RelationInstance) -> Result<&RelationInstance, DataError> {
    let n = inst.tokens.len();
    if n == 0 {
        return Err(DataError::EmptyTokens);
    }
    for span in [inst.head, inst.tail] {
        if span.end < span.start || span.end >= n {
            return Err(DataError::SpanBounds {
                start: span.start,
                end: span.end,
                len: n,
            });
        }
    }
    if inst.head.end >= inst.tail.start {
        return Err(DataError::SpanOrder {
            head_end: inst.head.end,
            tail_start: inst.tail.start,
        });
    }
    Ok(inst)
}

/// One candidate relation as presented in a choice prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: RelId,
    /// Token sequence used as the choice text.
    pub description: Vec<String>,
    pub is_nota: bool,
}

impl RelationType {
    pub fn new(id: RelId, description: Vec<String>) -> Result<Self, DataError> {
        if description.is_empty() {
            return Err(DataError::EmptyDescription);
        }
        Ok(Self {
            id,
            description,
            is_nota: false,
        })
    }

    /// The extra "others" choice appended after the real candidates.
    pub fn nota() -> Self {
        Self {
            id: RelId::nota(),
            description: vec!["others".to_string()],
            is_nota: true,
        }
    }
}

/// Checks that a choice list has at most one none-of-the-above entry.
pub fn validate_choices(choices: &[RelationType]) -> Result<(), DataError> {
    if choices.iter().filter(|c| c.is_nota).count() > 1 {
        return Err(DataError::DuplicateNota);
    }
    for c in choices {
        if c.description.is_empty() {
            return Err(DataError::EmptyDescription);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Catalog entry: description text plus the split the relation belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMeta {
    pub rel_type: RelationType,
    pub split: Split,
}

/// Labeled instances plus the relation catalog, indexed by relation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    instances: Vec<RelationInstance>,
    relations: BTreeMap<RelId, RelationMeta>,
    by_relation: BTreeMap<RelId, Vec<usize>>,
}

impl LabeledCorpus {
    pub fn new(
        instances: Vec<RelationInstance>,
        relations: BTreeMap<RelId, RelationMeta>,
    ) -> Result<Self, DataError> {
        let mut by_relation: BTreeMap<RelId, Vec<usize>> = BTreeMap::new();
        for (idx, inst) in instances.iter().enumerate() {
            validate_instance(inst)?;
            let rel = inst.relation.as_ref().ok_or(DataError::UnknownRelation {
                relation: "<unlabeled>".to_string(),
            })?;
            if !relations.contains_key(rel) {
                return Err(DataError::UnknownRelation {
                    relation: rel.0.clone(),
                });
            }
            by_relation.entry(rel.clone()).or_default().push(idx);
        }
        Ok(Self {
            instances,
            relations,
            by_relation,
        })
    }

    pub fn instances(&self) -> &[RelationInstance] {
        &self.instances
    }

    pub fn instance(&self, idx: usize) -> &RelationInstance {
        &self.instances[idx]
    }

    pub fn relations(&self) -> &BTreeMap<RelId, RelationMeta> {
        &self.relations
    }

    pub fn meta(&self, id: &RelId) -> Option<&RelationMeta> {
        self.relations.get(id)
    }

    /// Relation ids in a split, in catalog (sorted) order.
    pub fn relations_in_split(&self, split: Split) -> Vec<&RelId> {
        self.relations
            .iter()
            .filter(|(_, meta)| meta.split == split)
            .map(|(id, _)| id)
            .collect()
    }

    /// Corpus indices of the instances labeled with `id`, in file order.
    pub fn instances_of(&self, id: &RelId) -> &[usize] {
        self.by_relation.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every distinct surface token in instance text and descriptions.
    pub fn surface_tokens(&self) -> impl Iterator<Item = &str> {
        let inst_tokens = self
            .instances
            .iter()
            .flat_map(|i| i.tokens.iter().map(String::as_str));
        let desc_tokens = self
            .relations
            .values()
            .flat_map(|m| m.rel_type.description.iter().map(String::as_str));
        inst_tokens.chain(desc_tokens)
    }

    /// Removes one relation and its instances. Used to probe that training
    /// never consults relations outside its sampled episodes.
    pub fn without_relation(&self, id: &RelId) -> Result<Self, DataError> {
        let instances: Vec<RelationInstance> = self
            .instances
            .iter()
            .filter(|i| i.relation.as_ref() != Some(id))
            .cloned()
            .collect();
        let mut relations = self.relations.clone();
        relations.remove(id);
        Self::new(instances, relations)
    }
}

/// On-disk instance record. Spans are 1-based inclusive.
#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    tokens: Vec<String>,
    head: [usize; 2],
    tail: [usize; 2],
    relation: String,
}

#[derive(Serialize, Deserialize)]
struct CatalogRecord {
    description: String,
    split: Split,
}

fn record_to_instance(rec: InstanceRecord) -> Result<RelationInstance, DataError> {
    let to_span = |pair: [usize; 2]| -> Result<Span, DataError> {
        if pair[0] == 0 {
            return Err(DataError::SpanBounds {
                start: pair[0],
                end: pair[1],
                len: 0,
            });
        }
        Ok(Span::new(pair[0] - 1, pair[1].saturating_sub(1)))
    };
    let inst = RelationInstance {
        tokens: rec.tokens,
        head: to_span(rec.head)?,
        tail: to_span(rec.tail)?,
        relation: Some(RelId::new(rec.relation)),
    };
    validate_instance(&inst)?;
    Ok(inst)
}

fn instance_to_record(inst: &RelationInstance) -> InstanceRecord {
    InstanceRecord {
        tokens: inst.tokens.clone(),
        head: [inst.head.start + 1, inst.head.end + 1],
        tail: [inst.tail.start + 1, inst.tail.end + 1],
        relation: inst
            .relation
            .as_ref()
            .map(|r| r.0.clone())
            .unwrap_or_default(),
    }
}

/// Reads a corpus from an instance JSONL file plus a relation catalog JSON.
pub fn read_corpus(instances_path: &Path, catalog_path: &Path) -> Result<LabeledCorpus, DataError> {
    let catalog_text = std::fs::read_to_string(catalog_path)?;
    let raw: BTreeMap<String, CatalogRecord> =
        serde_json::from_str(&catalog_text).map_err(|e| DataError::Catalog {
            path: catalog_path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut relations = BTreeMap::new();
    for (id, rec) in raw {
        let description: Vec<String> =
            rec.description.split_whitespace().map(String::from).collect();
        if description.is_empty() {
            return Err(DataError::Catalog {
                path: catalog_path.display().to_string(),
                message: format!("relation {id:?} has an empty description"),
            });
        }
        let id = RelId::new(id);
        relations.insert(
            id.clone(),
            RelationMeta {
                rel_type: RelationType {
                    id,
                    description,
                    is_nota: false,
                },
                split: rec.split,
            },
        );
    }

    let file = std::fs::File::open(instances_path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: instances_path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        let inst = record_to_instance(rec).map_err(|e| DataError::Invariant {
            path: instances_path.display().to_string(),
            line: lineno + 1,
            source: Box::new(e),
        })?;
        instances.push(inst);
    }
    LabeledCorpus::new(instances, relations)
}

/// Writes a corpus back out with stable field order: write∘read is identity
/// on normalized files.
pub fn write_corpus(
    corpus: &LabeledCorpus,
    instances_path: &Path,
    catalog_path: &Path,
) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(instances_path)?);
    for inst in &corpus.instances {
        let rec = instance_to_record(inst);
        serde_json::to_writer(&mut out, &rec).map_err(|e| DataError::Parse {
            path: instances_path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let catalog: BTreeMap<&str, CatalogRecord> = corpus
        .relations
        .iter()
        .map(|(id, meta)| {
            (
                id.as_str(),
                CatalogRecord {
                    description: meta.rel_type.description.join(" "),
                    split: meta.split,
                },
            )
        })
        .collect();
    let text = serde_json::to_string_pretty(&catalog).map_err(|e| DataError::Catalog {
        path: catalog_path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(catalog_path, text + "\n")?;
    Ok(())
}
