//! Seeded letter-to-phoneme maps and the word inventories built on them.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::SynthConfig;
use crate::error::{Error, Result};
use crate::textproc::{Lexicon, PhonemeInventory, ARPABET};

const VOWELS: &[u8] = b"aeiou";
const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxyz";

/// Carrier and general-sentence vocabulary. Pronounced by the regular map.
pub const COMMON_WORDS: &[&str] = &[
    "call", "message", "text", "phone", "now", "today", "tonight", "please", "tomorrow", "turn",
    "on", "off", "switch", "the", "play", "some", "music", "jazz", "rock", "pop", "news", "what",
    "is", "weather", "set", "a", "timer", "for", "one", "two", "three", "five", "ten", "minutes",
    "add", "milk", "eggs", "bread", "coffee", "to", "my", "list", "how", "traffic", "remind", "me",
    "cook", "read", "walk", "light", "lamp", "fan", "radio", "start", "stop", "open", "dim", "in",
    "by",
];

/// Primary reading of each letter plus an alternative reading used by
/// irregular pronunciations. The primary map is a surjection onto the
/// inventory, so some phonemes have two spellings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LetterMaps {
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
}

impl LetterMaps {
    pub fn generate(phonemes: usize, rng: &mut impl Rng) -> Self {
        let mut letters: Vec<usize> = (0..26).collect();
        letters.shuffle(rng);
        let mut primary = vec![0; 26];
        for (i, &l) in letters.iter().enumerate() {
            primary[l] = if i < phonemes {
                i
            } else {
                rng.random_range(0..phonemes)
            };
        }
        let secondary = primary
            .iter()
            .map(|&p| {
                let q = rng.random_range(0..phonemes - 1);
                if q >= p {
                    q + 1
                } else {
                    q
                }
            })
            .collect();
        LetterMaps { primary, secondary }
    }

    fn idx(c: u8) -> usize {
        (c - b'a') as usize
    }

    /// Letter-by-letter primary reading.
    pub fn regular(&self, word: &str) -> Vec<usize> {
        word.bytes().map(|c| self.primary[Self::idx(c)]).collect()
    }

    /// Reading with the secondary phoneme at `positions`.
    pub fn with_secondary(&self, word: &str, positions: &[usize]) -> Vec<usize> {
        let mut p = self.regular(word);
        for &i in positions {
            p[i] = self.secondary[Self::idx(word.as_bytes()[i])];
        }
        p
    }

    /// Number of positions where `pron` departs from the regular reading.
    pub fn disagreements(&self, word: &str, pron: &[usize]) -> usize {
        self.regular(word)
            .iter()
            .zip(pron)
            .filter(|(a, b)| a != b)
            .count()
            + self.regular(word).len().abs_diff(pron.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Person,
    Device,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub word: String,
    /// Words of one family differ by single-letter substitutions.
    pub family: usize,
    pub kind: EntityKind,
    pub irregular: bool,
    /// Whether adapter training may use this word.
    pub adapter_train: bool,
    pub prons: Vec<Vec<usize>>,
}

/// Everything the corpus generator needs to pronounce and spell words.
#[derive(Debug, Clone)]
pub struct SynthLexicon {
    pub inventory: PhonemeInventory,
    pub maps: LetterMaps,
    /// Catalog-eligible words (entities and device names).
    pub lexicon: Lexicon,
    pub entities: Vec<EntityInfo>,
    pub fillers: Vec<(String, Vec<usize>)>,
    pub common: BTreeMap<String, Vec<usize>>,
}

impl SynthLexicon {
    pub fn of_kind(&self, kind: EntityKind) -> impl Iterator<Item = (usize, &EntityInfo)> {
        self.entities
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.kind == kind)
    }

    /// Pronunciation of any generated word, first listed one for entities.
    pub fn pron_of(&self, word: &str) -> Option<&[usize]> {
        if let Some(p) = self.common.get(word) {
            return Some(p);
        }
        self.lexicon.get(word).map(|p| p[0].as_slice())
    }
}

fn name_like(rng: &mut impl Rng) -> String {
    let len = rng.random_range(4..=7);
    let mut vowel = rng.random_bool(0.3);
    (0..len)
        .map(|_| {
            let set = if vowel { VOWELS } else { CONSONANTS };
            vowel = !vowel;
            set[rng.random_range(0..set.len())] as char
        })
        .collect()
}

fn fresh_word(used: &mut HashSet<String>, rng: &mut impl Rng) -> String {
    loop {
        let w = name_like(rng);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Single-letter substitution of `base` whose regular reading differs.
fn variant(
    base: &str,
    maps: &LetterMaps,
    used: &mut HashSet<String>,
    rng: &mut impl Rng,
) -> Option<String> {
    for _ in 0..200 {
        let i = rng.random_range(0..base.len());
        let old = base.as_bytes()[i];
        let set = if VOWELS.contains(&old) {
            VOWELS
        } else {
            CONSONANTS
        };
        let new = set[rng.random_range(0..set.len())];
        if maps.primary[LetterMaps::idx(new)] == maps.primary[LetterMaps::idx(old)] {
            continue;
        }
        let mut w = base.as_bytes().to_vec();
        w[i] = new;
        let w = String::from_utf8(w).unwrap();
        if used.insert(w.clone()) {
            return Some(w);
        }
    }
    None
}

fn half_positions(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..len).collect();
    pos.shuffle(rng);
    pos.truncate(len.div_ceil(2));
    pos.sort_unstable();
    pos
}

fn families(
    n: usize,
    kind: EntityKind,
    first_family: usize,
    maps: &LetterMaps,
    used: &mut HashSet<String>,
    rng: &mut impl Rng,
) -> Result<Vec<EntityInfo>> {
    let mut out = Vec::with_capacity(n);
    for f in 0..n / 3 {
        let base = fresh_word(used, rng);
        let mut words = vec![base.clone()];
        for _ in 0..2 {
            let v = variant(&base, maps, used, rng)
                .ok_or_else(|| Error::Generation(format!("no spelling variant for {base}")))?;
            words.push(v);
        }
        for w in words {
            out.push(EntityInfo {
                prons: vec![maps.regular(&w)],
                word: w,
                family: first_family + f,
                kind,
                irregular: false,
                adapter_train: false,
            });
        }
    }
    Ok(out)
}

/// Marks exactly round(frac·n) words irregular: ⌈len/2⌉ positions take the
/// secondary reading. Returns the irregular indices.
fn make_irregular(
    words: &mut [EntityInfo],
    frac: f64,
    maps: &LetterMaps,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let count = (frac * words.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..words.len()).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx.sort_unstable();
    for &i in &idx {
        let w = &mut words[i];
        let pos = half_positions(w.word.len(), rng);
        w.prons = vec![maps.with_secondary(&w.word, &pos)];
        w.irregular = true;
    }
    idx
}

/// Builds letter maps, entity and device families, filler names and the
/// lexicon of catalog-eligible words.
pub fn gen_lexicon(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthLexicon> {
    cfg.validate()?;
    let inventory = PhonemeInventory::new(&ARPABET[..cfg.phonemes])?;
    let maps = LetterMaps::generate(cfg.phonemes, rng);
    let mut used: HashSet<String> = COMMON_WORDS.iter().map(|s| s.to_string()).collect();

    let mut people = families(cfg.entities, EntityKind::Person, 0, &maps, &mut used, rng)?;
    let irregular = make_irregular(&mut people, cfg.irregular_fraction, &maps, rng);
    let seconds =
        ((cfg.second_pron_fraction * people.len() as f64).round() as usize).min(irregular.len());
    let mut pick = irregular.clone();
    pick.shuffle(rng);
    for &i in &pick[..seconds] {
        let w = &mut people[i];
        // A different position set always yields a different reading,
        // since the secondary phoneme never equals the primary one.
        loop {
            let pos = half_positions(w.word.len(), rng);
            let p = maps.with_secondary(&w.word, &pos);
            if !w.prons.contains(&p) {
                w.prons.push(p);
                break;
            }
        }
    }
    let n_fam = cfg.entities / 3;
    let mut fam_order: Vec<usize> = (0..n_fam).collect();
    fam_order.shuffle(rng);
    let train_fams: HashSet<usize> = fam_order
        .into_iter()
        .take((cfg.adapter_family_fraction * n_fam as f64).round() as usize)
        .collect();
    for e in &mut people {
        e.adapter_train = train_fams.contains(&e.family);
    }

    let mut devices = families(
        cfg.devices,
        EntityKind::Device,
        n_fam,
        &maps,
        &mut used,
        rng,
    )?;
    make_irregular(&mut devices, cfg.irregular_fraction, &maps, rng);

    let mut fillers = Vec::with_capacity(cfg.fillers);
    for _ in 0..cfg.fillers {
        let w = fresh_word(&mut used, rng);
        let p = if rng.random_bool(cfg.filler_irregular_fraction) {
            maps.with_secondary(&w, &half_positions(w.len(), rng))
        } else {
            maps.regular(&w)
        };
        fillers.push((w, p));
    }

    let mut lexicon = Lexicon::new(inventory.clone());
    for e in people.iter().chain(&devices) {
        for p in &e.prons {
            lexicon.add(&e.word, p.clone())?;
        }
    }
    let common = COMMON_WORDS
        .iter()
        .map(|w| (w.to_string(), maps.regular(w)))
        .collect();
    let mut entities = people;
    entities.extend(devices);
    Ok(SynthLexicon {
        inventory,
        maps,
        lexicon,
        entities,
        fillers,
        common,
    })
}
