//! Byte-pair-style word-piece vocabulary.
//!
//! A word is the boundary marker `▁` followed by its characters, each a
//! separate initial symbol. Training greedily merges the most frequent
//! adjacent pair; encoding replays the learned merges in the order they were
//! learned.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::debug;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NO_BIAS_TOKEN: &str = "<no_bias>";
pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NO_BIAS_ID: usize = 2;
pub const RESERVED: usize = 3;
pub const WORD_MARK: &str = "▁";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
}

fn split_word(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARK.to_string())
        .chain(word.chars().map(|c| c.to_string()))
        .collect()
}

fn apply_merge(sym: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < sym.len() {
        if sym[i] == a && sym[i + 1] == b {
            let merged = format!("{a}{b}");
            sym[i] = merged;
            sym.remove(i + 1);
        }
        i += 1;
    }
}

/// Learns a vocabulary of at most `target_size` tokens (reserved tokens
/// included) from whitespace-separated `corpus` text. Ties between equally
/// frequent pairs go to the lexicographically smallest pair.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut words: BTreeMap<&str, usize> = BTreeMap::new();
    let mut chars: BTreeSet<String> = BTreeSet::new();
    chars.insert(WORD_MARK.to_string());
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *words.entry(w).or_default() += 1;
            chars.extend(w.chars().map(|c| c.to_string()));
        }
    }
    let min = RESERVED + chars.len();
    if target_size < min {
        return Err(Error::Config(format!(
            "vocab size {target_size} is below reserved + characters = {min}"
        )));
    }
    let mut tokens: Vec<String> = [BLANK_TOKEN, UNK_TOKEN, NO_BIAS_TOKEN]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(chars);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut seqs: Vec<(Vec<String>, usize)> =
        words.iter().map(|(w, &n)| (split_word(w), n)).collect();
    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (s, n) in &seqs {
            for p in s.windows(2) {
                *counts.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        // BTreeMap order makes the first maximum the lexicographically
        // smallest pair.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &counts {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((pair, n));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (s, _) in &mut seqs {
            apply_merge(s, &a, &b);
        }
        let merged = format!("{a}{b}");
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((a, b));
    }
    debug!("vocab: {} tokens, {} merges", tokens.len(), merges.len());
    Vocab::from_parts(tokens, merges)
}

impl Vocab {
    pub fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < RESERVED
            || tokens[BLANK_ID] != BLANK_TOKEN
            || tokens[UNK_ID] != UNK_TOKEN
            || tokens[NO_BIAS_ID] != NO_BIAS_TOKEN
        {
            return Err(Error::Config(
                "vocabulary must start with <blank>, <unk>, <no_bias>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (a, b) in &merges {
            if !index.contains_key(&format!("{a}{b}")) {
                return Err(Error::Config(format!(
                    "merge {a} {b} produces an unknown token"
                )));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            merges,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Word-piece strings of one word after all merges.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut sym = split_word(word);
        for (a, b) in &self.merges {
            if sym.len() < 2 {
                break;
            }
            apply_merge(&mut sym, a, b);
        }
        sym
    }

    /// Token ids of normalized text; characters never seen in training map to
    /// `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            for piece in self.segment_word(w) {
                ids.push(self.id(&piece).unwrap_or(UNK_ID));
            }
        }
        ids
    }

    /// Concatenates pieces and turns boundary markers back into spaces.
    /// Reserved tokens decode to nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &i in ids {
            if i < RESERVED {
                continue;
            }
            if let Some(t) = self.token(i) {
                s.push_str(t);
            }
        }
        s.replace(WORD_MARK, " ").trim_start().to_string()
    }

    /// Splits ids into words at boundary-marked pieces and decodes each.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        self.decode(ids)
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }

    pub fn to_files(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let mut v = self.tokens.join("\n");
        v.push('\n');
        fs::write(vocab_path, v).map_err(|e| Error::io(vocab_path, e))?;
        let m: String = self
            .merges
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect();
        fs::write(merges_path, m).map_err(|e| Error::io(merges_path, e))
    }

    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let v = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let tokens: Vec<String> = v.lines().map(str::to_string).collect();
        let m = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut merges = Vec::new();
        for (i, line) in m.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: merges_path.display().to_string(),
                        line: i + 1,
                        msg: "expected two space-separated symbols".into(),
                    })
                }
            }
        }
        Vocab::from_parts(tokens, merges)
    }

    /// Hex SHA-256 over tokens and merges; checkpoints store it to reject
    /// mismatched data.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for (a, b) in &self.merges {
            h.update(a.as_bytes());
            h.update([0u8]);
            h.update(b.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_prefers_smaller_pair_on_tie() {
        // ("▁","a") and ("a","a") both occur twice; "a" sorts before "▁".
        let v = build_vocab(&["aa aa"], RESERVED + 2 + 1).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(v.id("aa"), Some(RESERVED + 2));
    }

    #[test]
    fn minimum_size_is_character_vocabulary() {
        let v = build_vocab(&["ab ba"], RESERVED + 3).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(
            v.encode("a"),
            vec![v.id(WORD_MARK).unwrap(), v.id("a").unwrap()]
        );
        assert!(matches!(
            build_vocab(&["ab ba"], RESERVED + 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_vocab::<&str>(&[], 50),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_text_and_unknown_characters() {
        let v = build_vocab(&["call joe"], 20).unwrap();
        assert!(v.encode("").is_empty());
        assert!(v.encode("zq").contains(&UNK_ID));
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = build_vocab(&["x"], 10).unwrap();
        assert_eq!(v.id(BLANK_TOKEN), Some(BLANK_ID));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(v.id(NO_BIAS_TOKEN), Some(NO_BIAS_ID));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&["call joe biden", "play the news"], 40).unwrap();
        let (vp, mp) = (dir.path().join("vocab.txt"), dir.path().join("merges.txt"));
        v.to_files(&vp, &mp).unwrap();
        let back = Vocab::from_files(&vp, &mp).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = build_vocab(&["call joe"], 15).unwrap();
        let b = build_vocab(&["call jon"], 15).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
