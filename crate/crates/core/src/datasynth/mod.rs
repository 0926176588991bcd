//! Deterministic synthetic speech corpus in which an entity's audio follows
//! its pronunciation while the transcript follows its spelling.

pub mod config;
pub mod corpus;
pub mod features;
pub mod lexgen;

pub use config::SynthConfig;
pub use corpus::{dir_hash, gen_corpus, Corpus, Domain, Split, Utterance};
pub use features::FeatureSynth;
pub use lexgen::{gen_lexicon, EntityInfo, EntityKind, LetterMaps, SynthLexicon, COMMON_WORDS};
