//! Pronunciation-aware contextual adapter.

pub mod adapter;
pub mod config;

pub use adapter::{
    adapter_forward, apply_adapter, bias_attend, build_keys, encode_catalog, encode_graphemes,
    encode_phonemes, gate_query, BiasOutput, BiasVars, CatalogVars,
};
pub use config::{init_adapter, is_adapter_param, AdapterConfig, Variant};
