use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::EntityInfo;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Adapter,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Adapter => "adapter",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "adapter" => Ok(Stage::Adapter),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (expected base or adapter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of the training split held out for early stopping.
    pub dev_fraction: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            dev_fraction: 0.05,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the adapter stage: the adapter split is small, so it
    /// runs many short epochs at a higher rate.
    pub fn adapter_default() -> Self {
        TrainConfig {
            lr: 3e-3,
            max_epochs: 200,
            patience: 40,
            dev_fraction: 0.1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("dev_fraction must lie in [0, 1)".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// How adapter-training catalogs are drawn for each utterance and epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSamplingPolicy {
    /// Probability that the spoken entity is in its catalog.
    pub p_reference: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Probability of a catalog holding only no_bias.
    pub p_no_entity: f64,
    /// Put the reference's spelling neighbours among the distractors.
    pub include_confusers: bool,
}

impl Default for CatalogSamplingPolicy {
    fn default() -> Self {
        CatalogSamplingPolicy {
            p_reference: 0.9,
            min_distractors: 10,
            max_distractors: 20,
            p_no_entity: 0.1,
            include_confusers: true,
        }
    }
}

impl CatalogSamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (n, p) in [
            ("p_reference", self.p_reference),
            ("p_no_entity", self.p_no_entity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} must lie in [0, 1], got {p}")));
            }
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::Config(
                "min_distractors exceeds max_distractors".into(),
            ));
        }
        Ok(())
    }

    /// Entity words for one catalog. `pool` holds the candidate distractors.
    pub fn sample(
        &self,
        reference: Option<&EntityInfo>,
        pool: &[&EntityInfo],
        rng: &mut impl Rng,
    ) -> Vec<String> {
        if rng.random_bool(self.p_no_entity) {
            return Vec::new();
        }
        let n = rng.random_range(self.min_distractors..=self.max_distractors);
        let mut out: Vec<String> = Vec::with_capacity(n + 1);
        let is_ref = |e: &EntityInfo| reference.is_some_and(|r| r.word == e.word);
        if let Some(r) = reference {
            if self.include_confusers {
                out.extend(
                    pool.iter()
                        .filter(|e| e.family == r.family && !is_ref(e))
                        .map(|e| e.word.clone())
                        .take(n),
                );
            }
        }
        let others: Vec<&&EntityInfo> = pool
            .iter()
            .filter(|e| !is_ref(e) && !out.contains(&e.word))
            .collect();
        let need = n.saturating_sub(out.len()).min(others.len());
        out.extend(others.choose_multiple(rng, need).map(|e| e.word.clone()));
        if let Some(r) = reference {
            if rng.random_bool(self.p_reference) {
                out.push(r.word.clone());
            }
        }
        out.shuffle(rng);
        out
    }
}
