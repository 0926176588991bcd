//! Per-frame gate and attention weights for heatmaps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasynth::Utterance;
use crate::error::{Error, Result};
use crate::procter::apply_adapter;
use crate::rnnt::{Checkpoint, CoreModel};
use crate::textproc::ExpandedCatalog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameWeights {
    pub frame: usize,
    pub gate: Vec<f64>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub utterance: String,
    pub transcript: String,
    /// Column labels: entity text and pronunciation, no_bias last.
    pub labels: Vec<String>,
    pub frames: Vec<FrameWeights>,
}

pub fn dump_attention(
    ckpt: &Checkpoint,
    utt: &Utterance,
    catalog: &ExpandedCatalog,
) -> Result<AttentionDump> {
    let acfg = ckpt
        .adapter
        .as_ref()
        .ok_or_else(|| Error::Input("attention dumps need an adapter checkpoint".into()))?;
    let model = CoreModel::from_params(&ckpt.joint, &ckpt.params)?;
    let enc = model.encode_audio(&utt.features)?;
    let out = apply_adapter(&ckpt.params, acfg, &enc, catalog)?;
    let frames = (0..out.attn.rows())
        .map(|t| FrameWeights {
            frame: t,
            gate: out.gate.row(t).to_vec(),
            attention: out.attn.row(t).to_vec(),
        })
        .collect();
    Ok(AttentionDump {
        utterance: utt.id.clone(),
        transcript: utt.transcript.clone(),
        labels: catalog.pairs.iter().map(|p| p.label.clone()).collect(),
        frames,
    })
}

impl AttentionDump {
    /// A header line with the labels, then one line per frame.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("attention dump", e);
        let head = serde_json::json!({
            "utterance": self.utterance,
            "transcript": self.transcript,
            "labels": self.labels,
        });
        writeln!(w, "{head}").map_err(io)?;
        for f in &self.frames {
            writeln!(w, "{}", serde_json::to_string(f)?).map_err(io)?;
        }
        Ok(())
    }

    /// Attention mass each frame puts on the columns whose label starts with
    /// `word` followed by a space.
    pub fn mass_on(&self, word: &str) -> Vec<f64> {
        let prefix = format!("{word} ");
        let cols: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.starts_with(&prefix))
            .map(|(i, _)| i)
            .collect();
        self.frames
            .iter()
            .map(|f| cols.iter().map(|&c| f.attention[c]).sum())
            .collect()
    }
}
