//! Decoding test sets and summarizing them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::{relative_reduction, span_errors, utterance_errors, ErrorCounts};
use crate::datasynth::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::pipeline::build_catalog;
use crate::procter::apply_adapter;
use crate::rnnt::{beam_decode, Checkpoint, CoreModel, MAX_SYMBOLS_PER_FRAME};
use crate::textproc::ExpandedCatalog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub beam: usize,
    /// Decode with {no_bias}-only catalogs.
    pub vanilla: bool,
    pub max_symbols: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            beam: 4,
            vanilla: false,
            max_symbols: MAX_SYMBOLS_PER_FRAME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: ErrorCounts,
    /// Errors inside entity spans.
    pub entity_counts: ErrorCounts,
    pub entity: Option<String>,
    pub irregular: bool,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRow {
    pub entity: String,
    pub occurrences: usize,
    pub errors: usize,
    pub irregular: bool,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub split: Split,
    pub utterances: usize,
    pub counts: ErrorCounts,
    pub wer: f64,
    pub ne_wer: Option<f64>,
    pub ne_wer_rare: Option<f64>,
    pub ne_wer_irregular: Option<f64>,
    pub entities: Vec<EntityRow>,
    pub results: Vec<UttResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub vanilla: bool,
    pub sets: BTreeMap<Split, SetReport>,
}

fn slice_rate<'a>(it: impl Iterator<Item = &'a UttResult>) -> Option<f64> {
    let mut c = ErrorCounts::default();
    it.for_each(|r| c.add(&r.entity_counts));
    c.rate().ok()
}

impl SetReport {
    fn from_results(split: Split, results: Vec<UttResult>) -> Result<Self> {
        let mut counts = ErrorCounts::default();
        results.iter().for_each(|r| counts.add(&r.counts));
        let mut rows: BTreeMap<String, EntityRow> = BTreeMap::new();
        for r in &results {
            if let Some(e) = &r.entity {
                let row = rows.entry(e.clone()).or_insert_with(|| EntityRow {
                    entity: e.clone(),
                    occurrences: 0,
                    errors: 0,
                    irregular: r.irregular,
                    rare: r.rare,
                });
                row.occurrences += 1;
                row.errors += r.entity_counts.errors();
            }
        }
        Ok(SetReport {
            split,
            utterances: results.len(),
            wer: counts.rate()?,
            counts,
            ne_wer: slice_rate(results.iter()),
            ne_wer_rare: slice_rate(results.iter().filter(|r| r.rare)),
            ne_wer_irregular: slice_rate(results.iter().filter(|r| r.irregular)),
            entities: rows.into_values().collect(),
            results,
        })
    }
}

/// Catalogs used to decode one utterance.
fn utterance_catalog(u: &Utterance, corpus: &Corpus, vanilla: bool) -> Result<ExpandedCatalog> {
    if vanilla {
        return Ok(ExpandedCatalog::no_bias_only(&corpus.inventory));
    }
    let id = u
        .catalog
        .as_deref()
        .ok_or_else(|| Error::Input(format!("utterance {} has no catalog id", u.id)))?;
    build_catalog(corpus.catalog(id)?, corpus)
}

/// Best hypothesis for one utterance.
pub fn decode_utterance(
    ckpt: &Checkpoint,
    model: &CoreModel,
    corpus: &Corpus,
    u: &Utterance,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let enc = model.encode_audio(&u.features)?;
    let h = match &ckpt.adapter {
        Some(acfg) => {
            let cat = utterance_catalog(u, corpus, opts.vanilla)?;
            apply_adapter(&ckpt.params, acfg, &enc, &cat)?.h_hat
        }
        None => enc.last().clone(),
    };
    let nbest = beam_decode(model, &h, opts.beam, opts.max_symbols)?;
    Ok(nbest
        .into_iter()
        .next()
        .map(|h| h.labels)
        .unwrap_or_default())
}

/// Decodes every utterance of `splits` and scores it. Utterances run in
/// parallel; results stay in corpus order.
pub fn evaluate(
    name: &str,
    ckpt: &Checkpoint,
    corpus: &Corpus,
    splits: &[Split],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    ckpt.check_vocab(&corpus.vocab.hash())?;
    let model = CoreModel::from_params(&ckpt.joint, &ckpt.params)?;
    let mut sets = BTreeMap::new();
    for &split in splits {
        let utts = corpus.split(split);
        if utts.is_empty() {
            return Err(Error::Input(format!("split {split} is empty or missing")));
        }
        let results = utts
            .par_iter()
            .map(|u| {
                let labels = decode_utterance(ckpt, &model, corpus, u, opts)?;
                let hyp = corpus.vocab.decode(&labels);
                let rw = u.words();
                let hw: Vec<&str> = hyp.split_whitespace().collect();
                Ok(UttResult {
                    id: u.id.clone(),
                    reference: u.transcript.clone(),
                    counts: utterance_errors(&rw, &hw),
                    entity_counts: span_errors(&rw, &hw, &u.spans)?,
                    hypothesis: hyp,
                    rare: u
                        .entity
                        .as_ref()
                        .is_some_and(|e| corpus.rare.binary_search(e).is_ok()),
                    entity: u.entity.clone(),
                    irregular: u.irregular,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sets.insert(split, SetReport::from_results(split, results)?);
    }
    Ok(EvalReport {
        name: name.to_string(),
        vanilla: opts.vanilla,
        sets,
    })
}

impl EvalReport {
    /// One JSON line per set summary, then one per utterance.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("report", e);
        for s in self.sets.values() {
            let summary = serde_json::json!({
                "record": "set",
                "model": self.name,
                "vanilla": self.vanilla,
                "split": s.split,
                "utterances": s.utterances,
                "wer": s.wer,
                "ne_wer": s.ne_wer,
                "ne_wer_rare": s.ne_wer_rare,
                "ne_wer_irregular": s.ne_wer_irregular,
            });
            writeln!(w, "{summary}").map_err(io)?;
        }
        for s in self.sets.values() {
            for r in &s.results {
                let mut v = serde_json::to_value(r)?;
                v["record"] = "utterance".into();
                v["split"] = serde_json::to_value(s.split)?;
                writeln!(w, "{v}").map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn set(&self, split: Split) -> Option<&SetReport> {
        self.sets.get(&split)
    }
}

/// Relative reductions of one model against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: String,
    pub baseline: String,
    pub general_werr: Option<f64>,
    pub entity_werr: Option<f64>,
    pub entity_ne_werr: Option<f64>,
    pub entity_rare_ne_werr: Option<f64>,
    pub entity_irregular_ne_werr: Option<f64>,
    pub device_werr: Option<f64>,
    pub device_ne_werr: Option<f64>,
}

fn rr(base: Option<f64>, model: Option<f64>) -> Option<f64> {
    relative_reduction(base?, model?).ok()
}

pub fn compare(baseline: &EvalReport, model: &EvalReport) -> Comparison {
    let get = |r: &EvalReport, s: Split, f: fn(&SetReport) -> Option<f64>| r.set(s).and_then(f);
    let pair =
        |s: Split, f: fn(&SetReport) -> Option<f64>| rr(get(baseline, s, f), get(model, s, f));
    Comparison {
        model: model.name.clone(),
        baseline: baseline.name.clone(),
        general_werr: pair(Split::TestGeneral, |s| Some(s.wer)),
        entity_werr: pair(Split::TestEntity, |s| Some(s.wer)),
        entity_ne_werr: pair(Split::TestEntity, |s| s.ne_wer),
        entity_rare_ne_werr: pair(Split::TestEntity, |s| s.ne_wer_rare),
        entity_irregular_ne_werr: pair(Split::TestEntity, |s| s.ne_wer_irregular),
        device_werr: pair(Split::TestDevice, |s| Some(s.wer)),
        device_ne_werr: pair(Split::TestDevice, |s| s.ne_wer),
    }
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}%", 100.0 * v))
        .unwrap_or_else(|| "-".into())
}

/// Text table of relative reductions, one row per comparison.
pub fn render_table(rows: &[Comparison]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} | {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8}",
        "model", "General", "Entity", "NE", "rare NE", "irr NE", "Device", "NE"
    );
    let _ = writeln!(
        s,
        "{:<28} | {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8}",
        "", "WERR", "WERR", "WERR", "WERR", "WERR", "WERR", "WERR"
    );
    let _ = writeln!(s, "{}", "-".repeat(108));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} | {:>8} | {:>8} {:>8} {:>8} {:>8} | {:>8} {:>8}",
            r.model,
            pct(r.general_werr),
            pct(r.entity_werr),
            pct(r.entity_ne_werr),
            pct(r.entity_rare_ne_werr),
            pct(r.entity_irregular_ne_werr),
            pct(r.device_werr),
            pct(r.device_ne_werr)
        );
    }
    s
}

/// Absolute error rates of a report.
pub fn render_rates(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}{}", r.name, if r.vanilla { " (vanilla)" } else { "" });
    for set in r.sets.values() {
        let _ = writeln!(
            s,
            "  {:<14} n={:<5} WER {:>6}  NE-WER {:>6}  rare {:>6}  irregular {:>6}",
            set.split.name(),
            set.utterances,
            pct(Some(set.wer)),
            pct(set.ne_wer),
            pct(set.ne_wer_rare),
            pct(set.ne_wer_irregular)
        );
    }
    s
}
