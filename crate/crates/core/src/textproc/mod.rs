//! Word-piece vocabulary, pronunciation lexicon and catalog expansion.

pub mod catalog;
pub mod lexicon;
pub mod vocab;

pub use catalog::{
    catalog_entries, expand_catalog, read_catalog_file, spelling_pronunciation, write_catalog_file,
    CatalogEntry, CatalogPair, ExpandedCatalog, ENTITY_CAP, PAIR_CAP,
};
pub use lexicon::{parse_lexicon, Lexicon, PhonemeInventory, ARPABET, NO_BIAS_PH};
pub use vocab::{build_vocab, Vocab, BLANK_ID, NO_BIAS_ID, UNK_ID};
