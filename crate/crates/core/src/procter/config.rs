use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LstmParams, ParamSet, Tensor};

/// Adapter shape and variant flags.
///
/// Desk defaults: 8-unit grapheme BiLSTM, 16-unit phoneme BiLSTM, d=16,
/// which keeps the adapter under 5% of the desk model.
/// Full scale: 64 and 128 units, d=128 (see [`AdapterConfig::full_scale`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub grapheme_vocab: usize,
    /// Phoneme inventory size with the no_bias symbol.
    pub phoneme_vocab: usize,
    /// Width of the encoder outputs the adapter reads and biases.
    pub enc_units: usize,
    pub grapheme_embed: usize,
    pub grapheme_units: usize,
    pub grapheme_layers: usize,
    pub phoneme_embed: usize,
    pub phoneme_units: usize,
    pub phoneme_layers: usize,
    pub proj_dim: usize,
    pub use_phoneme_key: bool,
    pub phoneme_in_value: bool,
    pub use_intermediate_layers: bool,
    /// Encoder layers read by the query gate, as offsets from the last layer.
    pub taps: Vec<i32>,
}

impl AdapterConfig {
    pub fn desk(grapheme_vocab: usize, phoneme_vocab: usize, enc_units: usize) -> Self {
        AdapterConfig {
            grapheme_vocab,
            phoneme_vocab,
            enc_units,
            grapheme_embed: 8,
            grapheme_units: 8,
            grapheme_layers: 1,
            phoneme_embed: 16,
            phoneme_units: 16,
            phoneme_layers: 1,
            proj_dim: 16,
            use_phoneme_key: true,
            phoneme_in_value: false,
            use_intermediate_layers: true,
            taps: vec![0, -2, -4],
        }
    }

    /// Full-scale dimensions with the assumptions needed to pin an exact
    /// count: two-layer BiLSTM stacks, embeddings as wide as the BiLSTM
    /// units, 4000 word pieces and 39 ARPAbet phonemes plus no_bias.
    pub fn full_scale() -> Self {
        AdapterConfig {
            grapheme_vocab: 4000,
            phoneme_vocab: 40,
            enc_units: 1280,
            grapheme_embed: 64,
            grapheme_units: 64,
            grapheme_layers: 2,
            phoneme_embed: 128,
            phoneme_units: 128,
            phoneme_layers: 2,
            proj_dim: 128,
            use_phoneme_key: true,
            phoneme_in_value: false,
            use_intermediate_layers: true,
            taps: vec![0, -2, -4],
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (k, val, int) = v.flags();
        self.use_phoneme_key = k;
        self.phoneme_in_value = val;
        self.use_intermediate_layers = int;
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            v.flags()
                == (
                    self.use_phoneme_key,
                    self.phoneme_in_value,
                    self.use_intermediate_layers,
                )
        })
    }

    pub fn uses_phonemes(&self) -> bool {
        self.use_phoneme_key || self.phoneme_in_value
    }

    pub fn grapheme_dim(&self) -> usize {
        2 * self.grapheme_units
    }

    pub fn phoneme_dim(&self) -> usize {
        2 * self.phoneme_units
    }

    pub fn key_dim(&self) -> usize {
        self.grapheme_dim()
            + if self.use_phoneme_key {
                self.phoneme_dim()
            } else {
                0
            }
    }

    pub fn value_dim(&self) -> usize {
        self.grapheme_dim()
            + if self.phoneme_in_value {
                self.phoneme_dim()
            } else {
                0
            }
    }

    /// Checks internal consistency and that an encoder of `enc_layers`
    /// covers every tap.
    pub fn validate(&self, enc_layers: usize) -> Result<()> {
        let dims = [
            ("grapheme_vocab", self.grapheme_vocab),
            ("phoneme_vocab", self.phoneme_vocab),
            ("enc_units", self.enc_units),
            ("grapheme_embed", self.grapheme_embed),
            ("grapheme_units", self.grapheme_units),
            ("grapheme_layers", self.grapheme_layers),
            ("phoneme_embed", self.phoneme_embed),
            ("phoneme_units", self.phoneme_units),
            ("phoneme_layers", self.phoneme_layers),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("adapter {name} must be positive")));
            }
        }
        if self.use_intermediate_layers {
            if self.taps.is_empty() || self.taps.iter().any(|&t| t > 0) {
                return Err(Error::Config(
                    "taps must be non-positive offsets from the last layer".into(),
                ));
            }
            let deepest = self
                .taps
                .iter()
                .map(|t| t.unsigned_abs() as usize)
                .max()
                .unwrap();
            if deepest >= enc_layers {
                return Err(Error::Config(format!(
                    "intermediate-layer gating needs at least {} encoder layers, model has {enc_layers}",
                    deepest + 1
                )));
            }
        }
        Ok(())
    }

    /// Encoder layer indices read by the gate, in tap order.
    pub fn tap_layers(&self, enc_layers: usize) -> Vec<usize> {
        self.taps
            .iter()
            .map(|&t| (enc_layers as i64 - 1 + t as i64) as usize)
            .collect()
    }

    /// Closed-form count of [`init_adapter`]'s parameters.
    pub fn param_count(&self) -> usize {
        let stack = |vocab: usize, embed: usize, units: usize, layers: usize| {
            let mut n = vocab * embed;
            let mut d = embed;
            for _ in 0..layers {
                n += 2 * LstmParams::param_count(d, units);
                d = 2 * units;
            }
            n
        };
        let mut n = stack(
            self.grapheme_vocab,
            self.grapheme_embed,
            self.grapheme_units,
            self.grapheme_layers,
        );
        if self.uses_phonemes() {
            n += stack(
                self.phoneme_vocab,
                self.phoneme_embed,
                self.phoneme_units,
                self.phoneme_layers,
            );
        }
        if self.use_intermediate_layers {
            let k = self.taps.len();
            n += k * (k * self.enc_units + 1);
        }
        let d = self.proj_dim;
        n + d * self.enc_units + d * self.key_dim() + d * self.value_dim() + self.enc_units * d
    }
}

/// The four adapter rows of the ablation table plus their combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    TextOnly,
    Procter,
    PhInValue,
    NoIntLayers,
    PhInValueNoIntLayers,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TextOnly,
        Variant::Procter,
        Variant::PhInValue,
        Variant::NoIntLayers,
        Variant::PhInValueNoIntLayers,
    ];

    /// (phoneme key, phoneme in value, intermediate layers).
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::TextOnly => (false, false, false),
            Variant::Procter => (true, false, true),
            Variant::PhInValue => (true, true, true),
            Variant::NoIntLayers => (true, false, false),
            Variant::PhInValueNoIntLayers => (true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::Procter => "procter",
            Variant::PhInValue => "ph-in-value",
            Variant::NoIntLayers => "no-int-layers",
            Variant::PhInValueNoIntLayers => "ph-in-value+no-int-layers",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("adapter.")
}

pub(crate) fn stack_prefix(enc: &str, layer: usize, dir: &str) -> String {
    format!("adapter.{enc}.l{layer}.{dir}")
}

/// Fresh adapter parameters for `cfg`; only the parts the variant uses are
/// created.
pub fn init_adapter(
    cfg: &AdapterConfig,
    enc_layers: usize,
    rng: &mut impl Rng,
) -> Result<ParamSet> {
    cfg.validate(enc_layers)?;
    let mut set = ParamSet::new();
    let mut stack =
        |set: &mut ParamSet, enc: &str, vocab: usize, embed: usize, units: usize, layers: usize| {
            set.insert(
                format!("adapter.{enc}.embed"),
                Tensor::uniform_init(&[vocab, embed], rng),
            );
            let mut d = embed;
            for l in 0..layers {
                for dir in ["fwd", "bwd"] {
                    LstmParams::init(d, units, rng).insert_into(set, &stack_prefix(enc, l, dir));
                }
                d = 2 * units;
            }
        };
    stack(
        &mut set,
        "g",
        cfg.grapheme_vocab,
        cfg.grapheme_embed,
        cfg.grapheme_units,
        cfg.grapheme_layers,
    );
    if cfg.uses_phonemes() {
        stack(
            &mut set,
            "p",
            cfg.phoneme_vocab,
            cfg.phoneme_embed,
            cfg.phoneme_units,
            cfg.phoneme_layers,
        );
    }
    if cfg.use_intermediate_layers {
        let k = cfg.taps.len();
        set.insert(
            "adapter.gate.w",
            Tensor::uniform_init(&[k, k * cfg.enc_units], rng),
        );
        set.insert("adapter.gate.b", Tensor::zeros(&[k]));
    }
    let d = cfg.proj_dim;
    set.insert("adapter.wq", Tensor::uniform_init(&[d, cfg.enc_units], rng));
    set.insert("adapter.wk", Tensor::uniform_init(&[d, cfg.key_dim()], rng));
    set.insert(
        "adapter.wv",
        Tensor::uniform_init(&[d, cfg.value_dim()], rng),
    );
    // zero output projection: a fresh adapter leaves the encoding unchanged
    set.insert("adapter.wo", Tensor::zeros(&[cfg.enc_units, d]));
    Ok(set)
}
