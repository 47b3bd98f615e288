//! Token vocabulary with reserved marker tokens.
//!
//! Desk-scale tokenization is whitespace splitting plus lowercasing; the
//! vocabulary file is one token per line with line number = id, the twelve
//! specials on the first twelve lines.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

/// Reserved tokens, in id order 0..12.
pub const SPECIALS: [&str; 12] = [
    "[CLS]", "[SEP]", "[C]", "[e1]", "[/e1]", "[e2]", "[/e2]", "[H]", "[R]", "[T]", "[PAD]",
    "[UNK]",
];

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const CHOICE: u32 = 2;
pub const E1_OPEN: u32 = 3;
pub const E1_CLOSE: u32 = 4;
pub const E2_OPEN: u32 = 5;
pub const E2_CLOSE: u32 = 6;
pub const HEAD_MARK: u32 = 7;
pub const REL_MARK: u32 = 8;
pub const TAIL_MARK: u32 = 9;
pub const PAD: u32 = 10;
pub const UNK: u32 = 11;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: expected special {expected:?}, found {found:?}")]
    BadSpecial {
        path: String,
        line: usize,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: duplicate token {token:?}")]
    Duplicate {
        path: String,
        line: usize,
        token: String,
    },
}

/// Frozen token → id map. Construct once, then share freely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from surface tokens: specials first, then the distinct
    /// lowercased tokens in sorted order. Surface forms that collide with a
    /// special are excluded and will map to [UNK].
    pub fn build<'a>(surface: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen: Vec<String> = surface
            .into_iter()
            .map(|t| t.to_lowercase())
            .filter(|t| !SPECIALS.iter().any(|s| s.eq_ignore_ascii_case(t)))
            .collect();
        seen.sort();
        seen.dedup();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// Id of a token as it appears in an assembled stream. Marker tokens
    /// match exactly; surface tokens are lowercased first and fall back to
    /// [UNK].
    pub fn id(&self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            if SPECIALS.contains(&token) {
                return id;
            }
        }
        let lower = token.to_lowercase();
        if SPECIALS.iter().any(|s| s.eq_ignore_ascii_case(&lower)) {
            return UNK;
        }
        self.ids.get(&lower).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, VocabError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let token = line?;
            if lineno < SPECIALS.len() && token != SPECIALS[lineno] {
                return Err(VocabError::BadSpecial {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    expected: SPECIALS[lineno].to_string(),
                    found: token,
                });
            }
            if ids.contains_key(&token) {
                return Err(VocabError::Duplicate {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    token,
                });
            }
            ids.insert(token.clone(), tokens.len() as u32);
            tokens.push(token);
        }
        // An empty or truncated file still gets the specials.
        if tokens.len() < SPECIALS.len() {
            return Err(VocabError::BadSpecial {
                path: path.display().to_string(),
                line: tokens.len() + 1,
                expected: SPECIALS[tokens.len()].to_string(),
                found: "<eof>".to_string(),
            });
        }
        Ok(Self { tokens, ids })
    }
}
