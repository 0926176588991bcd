//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then `--set section.key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use procter::datasynth::SynthConfig;
use procter::evalkit::EvalOptions;
use procter::pipeline::{CatalogSamplingPolicy, TrainConfig};
use procter::procter::{AdapterConfig, Variant};
use procter::rnnt::JointConfig;

/// Transducer shape; feature width and vocabulary size come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub enc_layers: usize,
    pub enc_units: usize,
    pub embed_dim: usize,
    pub pred_layers: usize,
    pub pred_units: usize,
    pub joint_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let j = JointConfig::default();
        ModelSection {
            enc_layers: j.enc_layers,
            enc_units: j.enc_units,
            embed_dim: j.embed_dim,
            pred_layers: j.pred_layers,
            pred_units: j.pred_units,
            joint_dim: j.joint_dim,
        }
    }
}

impl ModelSection {
    pub fn joint(&self, feat_dim: usize, vocab_size: usize) -> JointConfig {
        JointConfig {
            feat_dim,
            enc_layers: self.enc_layers,
            enc_units: self.enc_units,
            embed_dim: self.embed_dim,
            pred_layers: self.pred_layers,
            pred_units: self.pred_units,
            joint_dim: self.joint_dim,
            vocab_size,
        }
    }
}

/// Adapter widths and the default variant; vocabularies and the encoder
/// width come from the corpus and base checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub variant: String,
    pub grapheme_embed: usize,
    pub grapheme_units: usize,
    pub grapheme_layers: usize,
    pub phoneme_embed: usize,
    pub phoneme_units: usize,
    pub phoneme_layers: usize,
    pub proj_dim: usize,
    pub taps: Vec<i32>,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let d = AdapterConfig::desk(0, 0, 0);
        AdapterSection {
            variant: Variant::Procter.name().into(),
            grapheme_embed: d.grapheme_embed,
            grapheme_units: d.grapheme_units,
            grapheme_layers: d.grapheme_layers,
            phoneme_embed: d.phoneme_embed,
            phoneme_units: d.phoneme_units,
            phoneme_layers: d.phoneme_layers,
            proj_dim: d.proj_dim,
            taps: d.taps,
        }
    }
}

impl AdapterSection {
    pub fn build(
        &self,
        variant: Variant,
        grapheme_vocab: usize,
        phoneme_vocab: usize,
        enc_units: usize,
    ) -> AdapterConfig {
        AdapterConfig {
            grapheme_vocab,
            phoneme_vocab,
            enc_units,
            grapheme_embed: self.grapheme_embed,
            grapheme_units: self.grapheme_units,
            grapheme_layers: self.grapheme_layers,
            phoneme_embed: self.phoneme_embed,
            phoneme_units: self.phoneme_units,
            phoneme_layers: self.phoneme_layers,
            proj_dim: self.proj_dim,
            taps: self.taps.clone(),
            ..AdapterConfig::desk(grapheme_vocab, phoneme_vocab, enc_units)
        }
        .with_variant(variant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub train_base: TrainConfig,
    pub train_adapter: TrainConfig,
    pub sampling: CatalogSamplingPolicy,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            adapter: AdapterSection::default(),
            train_base: TrainConfig::default(),
            train_adapter: TrainConfig::adapter_default(),
            sampling: CatalogSamplingPolicy::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = toml::Table::try_from(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let user: toml::Table = text
                .parse()
                .with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut doc, user);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.train_base.validate()?;
        self.train_adapter.validate()?;
        self.sampling.validate()?;
        self.variant()?;
        if self.eval.beam == 0 {
            bail!("eval.beam must be at least 1");
        }
        Ok(())
    }

    pub fn variant(&self) -> anyhow::Result<Variant> {
        Ok(self.adapter.variant.parse()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `section.key=value`; the value is read as TOML, falling back to a string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form section.key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = doc;
    for k in parents {
        table = table
            .get_mut(*k)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| anyhow!("unknown config section {k:?} in {path:?}"))?;
    }
    if !table.contains_key(*last) {
        bail!("unknown config key {path:?}");
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[synth]\nseed = 11\nirregular_fraction = 0.5\n").unwrap();
        let cfg = RunConfig::load(
            Some(&p),
            &["synth.seed=12".into(), "adapter.variant=text-only".into()],
        )
        .unwrap();
        assert_eq!(cfg.synth.seed, 12);
        assert_eq!(cfg.synth.irregular_fraction, 0.5);
        assert_eq!(cfg.variant().unwrap(), Variant::TextOnly);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(RunConfig::load(None, &["synth.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["nosection.seed=1".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.seed".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.irregular_fraction=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["adapter.variant=bogus".into()]).is_err());
    }
}
