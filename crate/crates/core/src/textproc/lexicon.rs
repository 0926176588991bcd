//! Pronunciation lexicon: `word<TAB>PH1 PH2 …` lines, repeated words are
//! alternative pronunciations, `#` starts a comment line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Phoneme symbol reserved for the no_bias catalog pair.
pub const NO_BIAS_PH: &str = "NO_BIAS_PH";

/// 39 ARPAbet phonemes without stress marks.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Phoneme symbols with dense ids; [`NO_BIAS_PH`] is always the last id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut all: Vec<String> = symbols
            .iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| s != NO_BIAS_PH)
            .collect();
        all.push(NO_BIAS_PH.to_string());
        let mut index = HashMap::new();
        for (i, s) in all.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid phoneme symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate phoneme symbol {s}")));
            }
        }
        Ok(PhonemeInventory {
            symbols: all,
            index,
        })
    }

    pub fn arpabet() -> Self {
        PhonemeInventory::new(&ARPABET).expect("static inventory is valid")
    }

    /// Total ids, the no_bias symbol included.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, sym: &str) -> Option<usize> {
        self.index.get(sym).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn no_bias_id(&self) -> usize {
        self.symbols.len() - 1
    }

    /// Symbols without the no_bias entry.
    pub fn regular(&self) -> &[String] {
        &self.symbols[..self.symbols.len() - 1]
    }

    pub fn render(&self, pron: &[usize]) -> String {
        pron.iter()
            .map(|&p| self.symbol(p).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One symbol per line, no_bias excluded.
    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut s = self.regular().join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let syms: Vec<&str> = s.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        PhonemeInventory::new(&syms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub inventory: PhonemeInventory,
    words: BTreeMap<String, Vec<Vec<usize>>>,
}

impl Lexicon {
    pub fn new(inventory: PhonemeInventory) -> Self {
        Lexicon {
            inventory,
            words: BTreeMap::new(),
        }
    }

    /// Adds a pronunciation unless the word already has it.
    pub fn add(&mut self, word: &str, pron: Vec<usize>) -> Result<()> {
        if pron.is_empty() {
            return Err(Error::Input(format!("empty pronunciation for {word}")));
        }
        if let Some(&bad) = pron.iter().find(|&&p| p >= self.inventory.no_bias_id()) {
            return Err(Error::Index {
                what: "phoneme id",
                index: bad,
                size: self.inventory.no_bias_id(),
            });
        }
        let list = self.words.entry(word.to_string()).or_default();
        if !list.contains(&pron) {
            list.push(pron);
        }
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[Vec<usize>]> {
        self.words.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<Vec<usize>>)> {
        self.words.iter()
    }

    /// Parses lexicon text; `origin` names the source in errors.
    pub fn parse_str(text: &str, inventory: &PhonemeInventory, origin: &str) -> Result<Self> {
        let mut lex = Lexicon::new(inventory.clone());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap();
            let mut pron = Vec::new();
            for sym in fields {
                match inventory.id(sym) {
                    Some(id) if id != inventory.no_bias_id() => pron.push(id),
                    _ => return Err(err(format!("unknown phoneme symbol {sym:?}"))),
                }
            }
            if pron.is_empty() {
                return Err(err(format!("word {word:?} has no phonemes")));
            }
            lex.add(&word.to_lowercase(), pron)?;
        }
        Ok(lex)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (w, prons) in &self.words {
            for p in prons {
                s.push_str(w);
                s.push('\t');
                s.push_str(&self.inventory.render(p));
                s.push('\n');
            }
        }
        s
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a lexicon file against a known phoneme inventory.
pub fn parse_lexicon(path: &Path, inventory: &PhonemeInventory) -> Result<Lexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::parse_str(&text, inventory, &path.display().to_string())
}
