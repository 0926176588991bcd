//! Greedy and time-synchronous beam decoding over a final encoder output.
//!
//! Both decoders take the T×H_enc encoding that feeds the joint network, so
//! an adapter-biased encoding decodes exactly like a plain one.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::model::{CoreModel, PredState, BLANK};
use crate::error::{Error, Result};
use crate::numerics::kernels::{argmax, log_add};
use crate::numerics::Tensor;

/// Default cap on labels emitted at a single frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    /// Log probability summed over the alignments that reached this
    /// hypothesis inside the beam.
    pub score: f64,
}

/// At each frame, emit argmax labels until blank wins or `max_symbols` labels
/// were emitted, then move to the next frame.
pub fn greedy_decode(model: &CoreModel, h_enc: &Tensor, max_symbols: usize) -> Result<Vec<usize>> {
    let ep = model.project_encoder(h_enc)?;
    let (out, mut state) = model.predict_step(BLANK, &model.initial_state())?;
    let mut pp = model.project_prediction(&out)?;
    let mut labels = Vec::new();
    for t in 0..ep.rows() {
        for _ in 0..max_symbols {
            let lp = model.log_probs_from_projections(ep.row(t), &pp);
            let k = argmax(&lp);
            if k == BLANK {
                break;
            }
            labels.push(k);
            let (out, next) = model.predict_step(k, &state)?;
            state = next;
            pp = model.project_prediction(&out)?;
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone)]
struct Hyp {
    labels: Vec<usize>,
    score: f64,
    /// Log probability of the last arc taken, used as a secondary sort key
    /// so that beam=1 breaks ties exactly like argmax.
    last_lp: f64,
    state: PredState,
    pred_proj: Vec<f64>,
}

struct Cand {
    labels: Vec<usize>,
    score: f64,
    last_lp: f64,
    finished: bool,
    /// Index into the parent list and the label to feed, for active candidates
    /// whose prediction state is not yet computed.
    parent: Option<(usize, usize)>,
    hyp: Option<Hyp>,
}

fn rank(a: &Cand, b: &Cand) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.last_lp.total_cmp(&a.last_lp))
}

/// Time-synchronous beam search. Within a frame, hypotheses are expanded
/// label by label up to `max_symbols`; each round pools the expansions with
/// the hypotheses that already took blank at this frame, merges entries with
/// identical labels by log-sum-exp, and keeps the best `beam`. Ties keep
/// generation order. Returns the n-best list sorted by score.
pub fn beam_decode(
    model: &CoreModel,
    h_enc: &Tensor,
    beam: usize,
    max_symbols: usize,
) -> Result<Vec<Hypothesis>> {
    if beam < 1 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let ep = model.project_encoder(h_enc)?;
    let v = model.vocab_size();
    let (out, state) = model.predict_step(BLANK, &model.initial_state())?;
    let mut hyps = vec![Hyp {
        labels: Vec::new(),
        score: 0.0,
        last_lp: 0.0,
        state,
        pred_proj: model.project_prediction(&out)?,
    }];
    for t in 0..ep.rows() {
        let enc_t = ep.row(t);
        let mut active = std::mem::take(&mut hyps);
        let mut finished: Vec<Hyp> = Vec::new();
        for step in 0..=max_symbols {
            if active.is_empty() {
                break;
            }
            let mut pool: Vec<Cand> = finished
                .drain(..)
                .map(|h| Cand {
                    labels: h.labels.clone(),
                    score: h.score,
                    last_lp: h.last_lp,
                    finished: true,
                    parent: None,
                    hyp: Some(h),
                })
                .collect();
            for (pi, h) in active.iter().enumerate() {
                let lp = model.log_probs_from_projections(enc_t, &h.pred_proj);
                pool.push(Cand {
                    labels: h.labels.clone(),
                    score: h.score + lp[BLANK],
                    last_lp: lp[BLANK],
                    finished: true,
                    parent: None,
                    hyp: Some(Hyp {
                        score: h.score + lp[BLANK],
                        last_lp: lp[BLANK],
                        ..h.clone()
                    }),
                });
                if step == max_symbols {
                    continue;
                }
                // Only the best `beam` labels of one parent can survive.
                let mut ks: Vec<usize> = (0..v).filter(|&k| k != BLANK).collect();
                ks.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                ks.truncate(beam);
                for k in ks {
                    let mut labels = h.labels.clone();
                    labels.push(k);
                    pool.push(Cand {
                        labels,
                        score: h.score + lp[k],
                        last_lp: lp[k],
                        finished: false,
                        parent: Some((pi, k)),
                        hyp: None,
                    });
                }
            }
            let pool = merge(pool);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| rank(&pool[a], &pool[b]).then(a.cmp(&b)));
            order.truncate(beam);
            let mut pool: Vec<Option<Cand>> = pool.into_iter().map(Some).collect();
            let mut next_active = Vec::new();
            for i in order {
                let c = pool[i].take().unwrap();
                if c.finished {
                    let mut h = c.hyp.unwrap();
                    h.score = c.score;
                    finished.push(h);
                } else {
                    let (pi, k) = c.parent.unwrap();
                    let (out, state) = model.predict_step(k, &active[pi].state)?;
                    next_active.push(Hyp {
                        labels: c.labels,
                        score: c.score,
                        last_lp: c.last_lp,
                        state,
                        pred_proj: model.project_prediction(&out)?,
                    });
                }
            }
            active = next_active;
        }
        hyps = finished;
    }
    let mut out: Vec<Hypothesis> = hyps
        .into_iter()
        .map(|h| Hypothesis {
            labels: h.labels,
            score: h.score,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Merges candidates with equal (labels, finished) into the first occurrence.
fn merge(pool: Vec<Cand>) -> Vec<Cand> {
    let mut seen: HashMap<(Vec<usize>, bool), usize> = HashMap::new();
    let mut out: Vec<Cand> = Vec::with_capacity(pool.len());
    for c in pool {
        let key = (c.labels.clone(), c.finished);
        match seen.get(&key) {
            Some(&i) => {
                let first = &mut out[i];
                first.score = log_add(first.score, c.score);
            }
            None => {
                seen.insert(key, out.len());
                out.push(c);
            }
        }
    }
    out
}
