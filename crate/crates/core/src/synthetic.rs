//! Deterministic synthetic fixtures: a labeled relation corpus built from one
//! syllable family and a raw pre-training text built from a second, fully
//! disjoint family. Every relation's description names two keywords, and
//! every instance of that relation states those keywords both in its
//! predicate slot and inside its two marked entities — on the same
//! twelve-token sentence shapes the paraphrase templates produce — so a
//! matcher succeeds exactly by aligning instance content with choice text,
//! never by memorizing labels and never by layout alone.
//!
//! The two corpora share only structural glue ("the", punctuation, template
//! words), which is what lets transfer tests attribute gains to structure
//! rather than token overlap.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledCorpus, RelId, RelationInstance, RelationMeta, RelationType, Span, Split};
use crate::seeds;
use crate::vocab::Vocabulary;

/// Syllables for the labeled-corpus family (keywords in descriptions and
/// instances).
const FAMILY_A: [&str; 10] = ["ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu"];

/// Syllables for the raw pre-training family; disjoint from `FAMILY_A`, so
/// the two corpora share no content words.
const FAMILY_B: [&str; 10] = ["ny", "po", "qa", "ru", "sy", "tu", "vy", "wo", "xy", "zu"];

/// Filler nouns for instance variety. None of these end in verb-suffix
/// shapes (-ed/-ing/-ates/-izes/-fies) or collide with chunker lexicons.
const FILLERS: [&str; 12] = [
    "vessel", "corner", "garden", "window", "bottle", "meadow", "circle", "ribbon", "lantern",
    "marble", "cabin", "harbor",
];

/// Tokens shared between the two corpora by design: determiners, punctuation,
/// and paraphrase-template words. Everything else is a content word.
pub const STRUCTURAL_WORDS: &[&str] = &["the", "a", "an", ".", ",", "as", "for", "there", "is", "that"];

fn family_word(family: &[&str; 10], index: usize) -> String {
    let index = index % 100;
    format!("{}{}", family[index / 10], family[index % 10])
}

/// Sizes and seed for the synthetic fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Total relation count; the first `train_relations` go to the train
    /// split, the rest to test.
    pub relations: usize,
    pub train_relations: usize,
    pub instances_per_relation: usize,
    /// Distinct two-verb predicates in the raw text (at most 50).
    pub predicates: usize,
    pub sentences_per_predicate: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            relations: 50,
            train_relations: 40,
            instances_per_relation: 100,
            predicates: 50,
            sentences_per_predicate: 20,
        }
    }
}

/// The two keywords naming relation `i`.
fn relation_keywords(i: usize) -> (String, String) {
    (
        family_word(&FAMILY_A, 2 * i),
        family_word(&FAMILY_A, 2 * i + 1),
    )
}

/// One labeled instance of relation `i`, shaped exactly like a paraphrase
/// template rendering: two three-token "the ⟨keyword⟩ ⟨filler⟩" entities
/// around the relation's keyword pair in the predicate slot. The subject
/// span carries the first keyword and the object span the second, so the
/// relation is readable both at the marked entities and at the predicate.
/// Even-indexed instances use the "as for ⟨obj⟩ , ⟨subj⟩ ⟨pred⟩ ." layout,
/// odd-indexed ones "there is ⟨subj⟩ that ⟨pred⟩ ⟨obj⟩ .".
fn relation_instance(i: usize, j: usize, rng: &mut ChaCha8Rng) -> RelationInstance {
    let (kw_a, kw_b) = relation_keywords(i);
    let subj = FILLERS[rng.gen_range(0..FILLERS.len())].to_string();
    let obj = loop {
        let c = FILLERS[rng.gen_range(0..FILLERS.len())].to_string();
        if c != subj {
            break c;
        }
    };
    let s = |t: &str| t.to_string();
    let (tokens, head, tail) = if j.is_multiple_of(2) {
        (
            vec![
                s("as"), s("for"), s("the"), kw_b.clone(), obj, s(","), s("the"), kw_a.clone(),
                subj, kw_a, kw_b, s("."),
            ],
            Span::new(2, 4),
            Span::new(6, 8),
        )
    } else {
        (
            vec![
                s("there"), s("is"), s("the"), kw_a.clone(), subj, s("that"), kw_a, kw_b.clone(),
                s("the"), kw_b, obj, s("."),
            ],
            Span::new(2, 4),
            Span::new(8, 10),
        )
    };
    RelationInstance::new(tokens, head, tail, Some(RelId::new(format!("rel{i:02}"))))
        .expect("template spans are in range and ordered")
}

/// Builds the labeled corpus: `relations` relation types, each with a
/// two-keyword description and `instances_per_relation` instances.
pub fn relation_corpus(cfg: &SyntheticConfig) -> LabeledCorpus {
    assert!(
        cfg.train_relations <= cfg.relations && cfg.relations <= 50,
        "keyword bank supports at most 50 relations"
    );
    let mut relations = BTreeMap::new();
    let mut instances = Vec::new();
    for i in 0..cfg.relations {
        let (kw_a, kw_b) = relation_keywords(i);
        let id = RelId::new(format!("rel{i:02}"));
        let rel_type = RelationType::new(id.clone(), vec![kw_a, kw_b])
            .expect("descriptions are nonempty");
        let split = if i < cfg.train_relations {
            Split::Train
        } else {
            Split::Test
        };
        relations.insert(id, RelationMeta { rel_type, split });
        // Instances within a relation must be pairwise distinct: episodes
        // reject any instance that sits in support and queries at once, and
        // duplicates would make that unavoidable. The filler bank bounds the
        // distinct count at 2 · 12 · 11 = 264 per relation.
        assert!(
            cfg.instances_per_relation <= 2 * FILLERS.len() * (FILLERS.len() - 1),
            "filler bank cannot produce that many distinct instances"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, "syn-instance", i as u64));
        let mut seen = BTreeSet::new();
        let mut j = 0;
        while j < cfg.instances_per_relation {
            let candidate = relation_instance(i, j, &mut rng);
            if seen.insert(candidate.tokens.clone()) {
                instances.push(candidate);
                j += 1;
            }
        }
    }
    LabeledCorpus::new(instances, relations).expect("generated corpus is valid")
}

/// Raw pre-training sentences:
/// "The ⟨noun⟩ ⟨noun⟩ ⟨verb⟩ates ⟨verb⟩izes the ⟨noun⟩ ⟨noun⟩ ." per
/// predicate, with four distinct sampled nouns. The chunker extracts exactly
/// one triplet per sentence — three-token noun phrases around a two-token
/// predicate — so the paraphrases land on the same twelve-token layouts as
/// the labeled instances and the predicates match the two-token relation
/// descriptions in shape.
pub fn raw_sentences(cfg: &SyntheticConfig) -> Vec<Vec<String>> {
    assert!(cfg.predicates <= 50, "verb bank supports at most 50 predicates");
    let mut sentences = Vec::new();
    for p in 0..cfg.predicates {
        let verb_a = format!("{}ates", family_word(&FAMILY_B, 2 * p));
        let verb_b = format!("{}izes", family_word(&FAMILY_B, 2 * p + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(cfg.seed, "syn-raw", p as u64));
        for _ in 0..cfg.sentences_per_predicate {
            let mut nouns: Vec<usize> = Vec::new();
            while nouns.len() < 4 {
                let c = rng.gen_range(0..100usize);
                if !nouns.contains(&c) {
                    nouns.push(c);
                }
            }
            sentences.push(vec![
                "The".to_string(),
                family_word(&FAMILY_B, nouns[0]),
                family_word(&FAMILY_B, nouns[1]),
                verb_a.clone(),
                verb_b.clone(),
                "the".to_string(),
                family_word(&FAMILY_B, nouns[2]),
                family_word(&FAMILY_B, nouns[3]),
                ".".to_string(),
            ]);
        }
    }
    sentences
}

/// One fixed vocabulary over everything the laboratory can see: labeled
/// instances, relation descriptions, raw sentences, paraphrase template
/// words, and the none-of-the-above description. Training and evaluation
/// share this vocabulary, so corpus edits that remove instances never shift
/// token ids.
pub fn fixture_vocabulary(corpus: &LabeledCorpus, sentences: &[Vec<String>]) -> Vocabulary {
    let mut surface: Vec<&str> = Vec::new();
    surface.extend(corpus.surface_tokens());
    for meta in corpus.relations().values() {
        surface.extend(meta.rel_type.description.iter().map(String::as_str));
    }
    for sentence in sentences {
        surface.extend(sentence.iter().map(String::as_str));
    }
    surface.extend(STRUCTURAL_WORDS.iter().copied());
    surface.push("others");
    Vocabulary::build(surface)
}

/// Lowercased non-structural tokens of an iterator of token sequences.
pub fn content_words<'a>(
    sequences: impl IntoIterator<Item = &'a [String]>,
) -> BTreeSet<String> {
    let structural: BTreeSet<&str> = STRUCTURAL_WORDS.iter().copied().collect();
    sequences
        .into_iter()
        .flatten()
        .map(|t| t.to_lowercase())
        .filter(|t| !structural.contains(t.as_str()))
        .collect()
}
