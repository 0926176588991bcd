use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::{ARPABET, ENTITY_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Distinct phonemes (taken from the front of the ARPAbet list).
    pub phonemes: usize,
    /// Frames per phoneme.
    pub frames_per_phoneme: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Silence symbols appended after the last word, so that a causal
    /// encoder has frames left to emit the final labels.
    pub tail_silence: usize,
    /// Person-entity word types; a multiple of 3 (families of three).
    pub entities: usize,
    /// Device-name word types used only by the zero-shot test set.
    pub devices: usize,
    /// Fraction of entity and device words with an irregular pronunciation.
    pub irregular_fraction: f64,
    /// Fraction of entity words with a second pronunciation; only irregular
    /// words receive one.
    pub second_pron_fraction: f64,
    /// Filler names used by base training in place of entities.
    pub fillers: usize,
    /// Fraction of filler names pronounced irregularly.
    pub filler_irregular_fraction: f64,
    /// Fraction of entity families whose words may appear in adapter training.
    pub adapter_family_fraction: f64,
    /// Entities per test catalog.
    pub catalog_size: usize,
    /// Fraction of entity-test utterances whose entity occurs only once.
    pub rare_fraction: f64,
    pub vocab_size: usize,
    pub train_base: usize,
    pub train_adapter: usize,
    pub test_general: usize,
    pub test_entity: usize,
    pub test_device: usize,
    /// Fraction of general sentences in the adapter split.
    pub adapter_general_fraction: f64,
    /// Fraction of person carriers in the base split; the rest are general.
    pub base_person_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            phonemes: 20,
            frames_per_phoneme: 2,
            feat_dim: 16,
            noise_sigma: 0.3,
            tail_silence: 3,
            entities: 300,
            devices: 90,
            irregular_fraction: 0.3,
            second_pron_fraction: 0.2,
            fillers: 900,
            filler_irregular_fraction: 0.25,
            adapter_family_fraction: 0.7,
            catalog_size: 20,
            rare_fraction: 0.3,
            vocab_size: 40,
            train_base: 4000,
            train_adapter: 200,
            test_general: 200,
            test_entity: 200,
            test_device: 200,
            adapter_general_fraction: 0.5,
            base_person_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = [
            ("irregular_fraction", self.irregular_fraction),
            ("second_pron_fraction", self.second_pron_fraction),
            ("filler_irregular_fraction", self.filler_irregular_fraction),
            ("adapter_family_fraction", self.adapter_family_fraction),
            ("rare_fraction", self.rare_fraction),
            ("adapter_general_fraction", self.adapter_general_fraction),
            ("base_person_fraction", self.base_person_fraction),
        ];
        for (name, v) in frac {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.phonemes < 8 || self.phonemes > ARPABET.len() {
            return Err(Error::Config(format!(
                "phoneme inventory must be between 8 and {}, got {}",
                ARPABET.len(),
                self.phonemes
            )));
        }
        if self.frames_per_phoneme == 0 || self.feat_dim == 0 {
            return Err(Error::Config(
                "frames_per_phoneme and feat_dim must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(
                "noise_sigma must be finite and non-negative".into(),
            ));
        }
        if self.entities < 6 || self.entities % 3 != 0 || self.devices < 6 || self.devices % 3 != 0
        {
            return Err(Error::Config(
                "entities and devices must be multiples of 3, at least 6".into(),
            ));
        }
        if self.catalog_size == 0 || self.catalog_size > ENTITY_CAP {
            return Err(Error::Config(format!(
                "catalog_size must be in 1..={ENTITY_CAP}, got {}",
                self.catalog_size
            )));
        }
        if self.catalog_size > self.entities || self.catalog_size > self.devices {
            return Err(Error::Config(
                "catalog_size exceeds the entity or device inventory".into(),
            ));
        }
        if self.fillers == 0 {
            return Err(Error::Config("need at least one filler name".into()));
        }
        if self.train_base == 0 || self.train_adapter == 0 {
            return Err(Error::Config("training splits must be non-empty".into()));
        }
        if self.train_adapter * 20 > self.train_base {
            return Err(Error::Config(format!(
                "adapter split ({}) must be at most 5% of the base split ({})",
                self.train_adapter, self.train_base
            )));
        }
        Ok(())
    }
}
