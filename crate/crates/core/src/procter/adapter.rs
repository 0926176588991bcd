//! Catalog encoders, gated query, biasing attention and fusion.

use std::collections::HashMap;

use super::config::{stack_prefix, AdapterConfig};
use crate::error::{Error, Result};
use crate::numerics::{lstm_vars, scaled_dot_attention, Graph, ParamSet, Tensor, Var};
use crate::rnnt::EncoderOutput;
use crate::textproc::{ExpandedCatalog, NO_BIAS_ID};

/// Catalog embeddings on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CatalogVars {
    /// M×D_g grapheme embeddings.
    pub g_emb: Var,
    /// M×D_p phoneme embeddings, absent for variants that never read them.
    pub p_emb: Option<Var>,
    /// M×D_key attention keys.
    pub keys: Var,
    /// M×D_val values with the no_bias row zeroed.
    pub values: Var,
}

/// Adapter outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BiasVars {
    pub b_enc: Var,
    pub h_hat: Var,
    pub attn: Var,
    pub gate: Var,
}

/// Adapter outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasOutput {
    /// T×H_enc bias added to the last encoder layer.
    pub b_enc: Tensor,
    /// T×H_enc biased encoding.
    pub h_hat: Tensor,
    /// T×M attention weights over catalog pairs.
    pub attn: Tensor,
    /// T×(tap count) gate weights.
    pub gate: Tensor,
}

impl BiasOutput {
    pub fn from_vars(g: &Graph<'_>, v: BiasVars) -> Self {
        BiasOutput {
            b_enc: g.value(v.b_enc).clone(),
            h_hat: g.value(v.h_hat).clone(),
            attn: g.value(v.attn).clone(),
            gate: g.value(v.gate).clone(),
        }
    }
}

/// Final-state BiLSTM stack over each distinct sequence in `seqs`, then
/// scattered to one row per entry of `seqs`. Entries with equal sequences
/// get bit-identical rows.
fn encode_sequences(g: &mut Graph<'_>, enc: &str, layers: usize, seqs: &[&[usize]]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let table = g.p(&format!("adapter.{enc}.embed"))?;
    let vocab = g.value(table).rows();
    let mut uniq: Vec<&[usize]> = Vec::new();
    let mut slot: HashMap<&[usize], usize> = HashMap::new();
    let mut map = Vec::with_capacity(seqs.len());
    for &s in seqs {
        if s.is_empty() {
            return Err(Error::pre("catalog encoder", "empty token sequence"));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: if enc == "p" {
                    "phoneme id"
                } else {
                    "grapheme id"
                },
                index: bad,
                size: vocab,
            });
        }
        let i = *slot.entry(s).or_insert_with(|| {
            uniq.push(s);
            uniq.len() - 1
        });
        map.push(i);
    }
    let mut rows = Vec::with_capacity(uniq.len());
    for s in uniq {
        let mut x = g.gather_rows(table, s)?;
        let len = s.len();
        for l in 0..layers {
            let fwd = lstm_vars(g, &stack_prefix(enc, l, "fwd"))?;
            let bwd = lstm_vars(g, &stack_prefix(enc, l, "bwd"))?;
            let hf = g.lstm(x, fwd, false)?;
            let hb = g.lstm(x, bwd, true)?;
            if l + 1 == layers {
                let last_f = g.gather_rows(hf, &[len - 1])?;
                let first_b = g.gather_rows(hb, &[0])?;
                x = g.concat_cols(&[last_f, first_b])?;
            } else {
                x = g.concat_cols(&[hf, hb])?;
            }
        }
        rows.push(x);
    }
    let stacked = g.concat_rows(&rows)?;
    g.gather_rows(stacked, &map)
}

/// M×2H_g grapheme embeddings, one row per catalog pair.
pub fn encode_graphemes(
    g: &mut Graph<'_>,
    cfg: &AdapterConfig,
    cat: &ExpandedCatalog,
) -> Result<Var> {
    let seqs: Vec<&[usize]> = cat.pairs.iter().map(|p| p.graphemes.as_slice()).collect();
    encode_sequences(g, "g", cfg.grapheme_layers, &seqs)
}

/// M×2H_p phoneme embeddings, one row per catalog pair.
pub fn encode_phonemes(
    g: &mut Graph<'_>,
    cfg: &AdapterConfig,
    cat: &ExpandedCatalog,
) -> Result<Var> {
    let seqs: Vec<&[usize]> = cat.pairs.iter().map(|p| p.phonemes.as_slice()).collect();
    encode_sequences(g, "p", cfg.phoneme_layers, &seqs)
}

/// Query from the tapped encoder layers. With gating, each frame mixes the
/// taps by a softmax over a dense projection of their concatenation;
/// without, the query is the last layer and the gate puts all weight on it.
/// `layers` holds every encoder layer, T×H_enc each.
pub fn gate_query(g: &mut Graph<'_>, cfg: &AdapterConfig, layers: &[Var]) -> Result<(Var, Var)> {
    let last = *layers
        .last()
        .ok_or_else(|| Error::pre("gate_query", "no encoder layers"))?;
    let frames = g.value(last).rows();
    if !cfg.use_intermediate_layers {
        let k = cfg.taps.len().max(1);
        let mut w = vec![0.0; frames * k];
        w.iter_mut().step_by(k).for_each(|x| *x = 1.0);
        let gate = g.constant(Tensor::new(vec![frames, k], w)?);
        return Ok((last, gate));
    }
    cfg.validate(layers.len())?;
    let taps: Vec<Var> = cfg
        .tap_layers(layers.len())
        .into_iter()
        .map(|l| layers[l])
        .collect();
    let cat = g.concat_cols(&taps)?;
    let (w, b) = (g.p("adapter.gate.w")?, g.p("adapter.gate.b")?);
    let logits = g.dense(cat, w, Some(b))?;
    let gate = g.softmax_rows(logits);
    let q = g.weighted_sum(gate, &taps)?;
    Ok((q, gate))
}

/// Keys are `[G | P]` per row with phoneme keys, else `G`.
pub fn build_keys(
    g: &mut Graph<'_>,
    g_emb: Var,
    p_emb: Option<Var>,
    cfg: &AdapterConfig,
) -> Result<Var> {
    if !cfg.use_phoneme_key {
        return Ok(g_emb);
    }
    let p =
        p_emb.ok_or_else(|| Error::pre("build_keys", "phoneme keys need phoneme embeddings"))?;
    if g.value(g_emb).rows() != g.value(p).rows() {
        return Err(Error::dim(
            "build_keys",
            "catalog rows (M)",
            g.value(g_emb).rows(),
            g.value(p).rows(),
        ));
    }
    g.concat_cols(&[g_emb, p])
}

/// Encodes the catalog into keys and values.
pub fn encode_catalog(
    g: &mut Graph<'_>,
    cfg: &AdapterConfig,
    cat: &ExpandedCatalog,
) -> Result<CatalogVars> {
    if cat.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let g_emb = encode_graphemes(g, cfg, cat)?;
    let p_emb = if cfg.uses_phonemes() {
        Some(encode_phonemes(g, cfg, cat)?)
    } else {
        None
    };
    let keys = build_keys(g, g_emb, p_emb, cfg)?;
    let raw = if cfg.phoneme_in_value {
        g.concat_cols(&[g_emb, p_emb.unwrap()])?
    } else {
        g_emb
    };
    let dv = g.value(raw).cols();
    let mut mask = Vec::with_capacity(cat.len() * dv);
    for p in &cat.pairs {
        let keep = if p.graphemes == [NO_BIAS_ID] {
            0.0
        } else {
            1.0
        };
        mask.extend(std::iter::repeat_n(keep, dv));
    }
    let mask = g.constant(Tensor::new(vec![cat.len(), dv], mask)?);
    let values = g.mul(raw, mask)?;
    Ok(CatalogVars {
        g_emb,
        p_emb,
        keys,
        values,
    })
}

/// Attention of the projected query over projected keys; the weighted
/// projected values are mapped back to the encoder width and added to the
/// last encoder layer `h_enc`.
pub fn bias_attend(
    g: &mut Graph<'_>,
    cfg: &AdapterConfig,
    h_qry: Var,
    h_enc: Var,
    cat: &CatalogVars,
) -> Result<(Var, Var, Var)> {
    let (wq, wk, wv, wo) = (
        g.p("adapter.wq")?,
        g.p("adapter.wk")?,
        g.p("adapter.wv")?,
        g.p("adapter.wo")?,
    );
    if g.value(h_qry).cols() != cfg.enc_units {
        return Err(Error::dim(
            "bias_attend",
            "query width (H_enc)",
            cfg.enc_units,
            g.value(h_qry).cols(),
        ));
    }
    let q = g.dense(h_qry, wq, None)?;
    let k = g.dense(cat.keys, wk, None)?;
    let v = g.dense(cat.values, wv, None)?;
    let (ctx, attn) = scaled_dot_attention(g, q, k, v)?;
    let b_enc = g.dense(ctx, wo, None)?;
    let h_hat = g.add(h_enc, b_enc)?;
    Ok((b_enc, h_hat, attn))
}

/// Whole adapter: catalog encoding, gated query, attention and fusion.
pub fn adapter_forward(
    g: &mut Graph<'_>,
    cfg: &AdapterConfig,
    layers: &[Var],
    cat: &ExpandedCatalog,
) -> Result<BiasVars> {
    let enc_cat = encode_catalog(g, cfg, cat)?;
    let (h_qry, gate) = gate_query(g, cfg, layers)?;
    let h_enc = *layers.last().unwrap();
    let (b_enc, h_hat, attn) = bias_attend(g, cfg, h_qry, h_enc, &enc_cat)?;
    Ok(BiasVars {
        b_enc,
        h_hat,
        attn,
        gate,
    })
}

/// Inference-only adapter pass over precomputed encoder outputs.
pub fn apply_adapter(
    params: &ParamSet,
    cfg: &AdapterConfig,
    enc: &EncoderOutput,
    cat: &ExpandedCatalog,
) -> Result<BiasOutput> {
    let mut g = Graph::inference(params);
    let layers: Vec<Var> = enc.layers.iter().map(|t| g.constant(t.clone())).collect();
    let out = adapter_forward(&mut g, cfg, &layers, cat)?;
    Ok(BiasOutput::from_vars(&g, out))
}
