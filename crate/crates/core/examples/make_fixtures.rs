//! Regenerates the committed fixture files from the deterministic synthetic
//! generators. A test compares the generated bytes with the committed bytes,
//! so after changing any generator, rerun this and commit the result:
//!
//!     cargo run -p lowshot --example make_fixtures

use std::path::Path;

use lowshot::pseudo::{build_pretraining_corpus, write_pseudo_corpus, PseudoConfig};
use lowshot::synthetic::{self, SyntheticConfig};

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    std::fs::create_dir_all(root.join("labeled")).unwrap();
    std::fs::create_dir_all(root.join("pseudo")).unwrap();

    let cfg = SyntheticConfig::default();
    let corpus = synthetic::relation_corpus(&cfg);
    let sentences = synthetic::raw_sentences(&cfg);
    let vocab = synthetic::fixture_vocabulary(&corpus, &sentences);

    lowshot::data::write_corpus(
        &corpus,
        &root.join("labeled/instances.jsonl"),
        &root.join("labeled/catalog.json"),
    )
    .unwrap();

    let text: String = sentences
        .iter()
        .map(|s| s.join(" ") + "\n")
        .collect();
    std::fs::write(root.join("raw_sentences.txt"), text).unwrap();

    let batches = build_pretraining_corpus(
        &sentences,
        &PseudoConfig {
            batch_size: 5,
            seed: 1,
        },
    )
    .unwrap();
    write_pseudo_corpus(&root.join("pseudo/corpus.jsonl"), &batches).unwrap();

    vocab.write(&root.join("vocab.txt")).unwrap();

    println!(
        "wrote fixtures: {} instances / {} relations, {} sentences, {} pseudo batches, vocab {}",
        corpus.instances().len(),
        corpus.relations().len(),
        sentences.len(),
        batches.len(),
        vocab.len()
    );
}
