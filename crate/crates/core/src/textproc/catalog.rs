//! Catalog entries and their expansion into grapheme-phoneme pairs.

use std::fs;
use std::path::Path;

use log::warn;

use super::lexicon::{Lexicon, PhonemeInventory};
use super::vocab::{Vocab, NO_BIAS_ID};
use crate::error::{Error, Result};

/// Default cap on expanded pairs, no_bias included.
pub const PAIR_CAP: usize = 600;

/// Entity cap applied where catalogs are generated.
pub const ENTITY_CAP: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub surface: String,
    pub graphemes: Vec<usize>,
    pub prons: Vec<Vec<usize>>,
}

impl CatalogEntry {
    pub fn new(surface: &str, graphemes: Vec<usize>, prons: Vec<Vec<usize>>) -> Result<Self> {
        if graphemes.is_empty() {
            return Err(Error::Input(format!(
                "catalog entry {surface:?} has no graphemes"
            )));
        }
        if prons.is_empty() || prons.iter().any(Vec::is_empty) {
            return Err(Error::Input(format!(
                "catalog entry {surface:?} has no pronunciation"
            )));
        }
        Ok(CatalogEntry {
            surface: surface.to_string(),
            graphemes,
            prons,
        })
    }
}

/// Spells a word letter by letter as phonemes: a letter whose uppercase form
/// is a phoneme symbol maps to it, any other letter to symbol
/// `byte % regular_count`.
pub fn spelling_pronunciation(word: &str, inv: &PhonemeInventory) -> Vec<usize> {
    let n = inv.regular().len();
    word.bytes()
        .map(|b| {
            let up = (b as char).to_ascii_uppercase().to_string();
            match inv.id(&up) {
                Some(id) if id < n => id,
                _ => b as usize % n,
            }
        })
        .collect()
}

/// One entry per distinct word of the given entity surfaces, in first-seen
/// order. Words missing from the lexicon fall back to a spelled
/// pronunciation with a warning.
pub fn catalog_entries<S: AsRef<str>>(
    entities: &[S],
    vocab: &Vocab,
    lexicon: &Lexicon,
) -> Result<Vec<CatalogEntry>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for e in entities {
        for w in e.as_ref().split_whitespace() {
            if !seen.insert(w.to_string()) {
                continue;
            }
            let prons = match lexicon.get(w) {
                Some(p) => p.to_vec(),
                None => {
                    warn!("no pronunciation for catalog word {w:?}; spelling it out");
                    vec![spelling_pronunciation(w, &lexicon.inventory)]
                }
            };
            out.push(CatalogEntry::new(w, vocab.encode(w), prons)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogPair {
    pub graphemes: Vec<usize>,
    pub phonemes: Vec<usize>,
    /// Index of the owning entry; the no_bias pair points one past the last.
    pub parent: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedCatalog {
    pub pairs: Vec<CatalogPair>,
    /// Number of entries kept after truncation.
    pub entities: usize,
    pub truncated: bool,
}

impl ExpandedCatalog {
    /// Pair count M, no_bias included.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The no_bias pair is always last.
    pub fn no_bias_index(&self) -> usize {
        self.pairs.len() - 1
    }

    pub fn no_bias_only(inv: &PhonemeInventory) -> Self {
        expand_catalog(&[], PAIR_CAP, inv)
    }
}

/// One pair per (entry, pronunciation) with the entry's grapheme ids
/// repeated, then the no_bias pair. When the pairs would exceed `cap`, whole
/// entries are dropped from the end and `truncated` is set.
pub fn expand_catalog(
    entries: &[CatalogEntry],
    cap: usize,
    inv: &PhonemeInventory,
) -> ExpandedCatalog {
    let budget = cap.max(1) - 1;
    let mut pairs = Vec::new();
    let mut kept = 0;
    let mut truncated = false;
    for (i, e) in entries.iter().enumerate() {
        if pairs.len() + e.prons.len() > budget {
            truncated = true;
            break;
        }
        for p in &e.prons {
            pairs.push(CatalogPair {
                graphemes: e.graphemes.clone(),
                phonemes: p.clone(),
                parent: i,
                label: format!("{} /{}/", e.surface, inv.render(p)),
            });
        }
        kept += 1;
    }
    pairs.push(CatalogPair {
        graphemes: vec![NO_BIAS_ID],
        phonemes: vec![inv.no_bias_id()],
        parent: kept,
        label: "<no_bias>".to_string(),
    });
    ExpandedCatalog {
        pairs,
        entities: kept,
        truncated,
    }
}

/// Catalog file: one entity surface form per line.
pub fn read_catalog_file(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_catalog_file<S: AsRef<str>>(path: &Path, entities: &[S]) -> Result<()> {
    let mut s = String::new();
    for e in entities {
        s.push_str(e.as_ref());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
