//! Two-stage training: the vanilla transducer first, then the adapter on top
//! of the frozen core.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CatalogSamplingPolicy, Stage, TrainConfig};
use super::optim::{clip_global_norm, Adam};
use crate::datasynth::{Corpus, Domain, EntityInfo, EntityKind, Split, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamGrads, ParamSet, Tensor, Var};
use crate::procter::{adapter_forward, init_adapter, is_adapter_param, AdapterConfig};
use crate::rnnt::{
    encoder_graph, init_core, is_core_param, joint_loss_graph, loss_graph, prediction_graph,
    Checkpoint, CoreModel, EncoderOutput, JointConfig,
};
use crate::textproc::{catalog_entries, expand_catalog, ExpandedCatalog, PAIR_CAP};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Mean loss over entity-bearing utterances, where there are any.
    pub entity_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Epoch whose parameters were kept (0 means the initial ones).
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn write_log(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w).map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Expanded catalog for a list of entity surfaces.
pub fn build_catalog<S: AsRef<str>>(entities: &[S], corpus: &Corpus) -> Result<ExpandedCatalog> {
    let entries = catalog_entries(entities, &corpus.vocab, &corpus.lexicon)?;
    Ok(expand_catalog(&entries, PAIR_CAP, &corpus.inventory))
}

/// Prediction network outputs for `[start] + targets`, shaped (U+1)×H_pred.
pub fn prediction_outputs(model: &CoreModel, targets: &[usize]) -> Result<Tensor> {
    let mut state = model.initial_state();
    let mut rows = Vec::with_capacity(targets.len() + 1);
    let (out, s) = model.predict_step(crate::rnnt::BLANK, &state)?;
    rows.push(out);
    state = s;
    for &y in targets {
        let (out, s) = model.predict_step(y, &state)?;
        rows.push(out);
        state = s;
    }
    Tensor::from_rows(&rows)
}

/// Loss of the whole stack (core and adapter) on one utterance; every
/// parameter the graph's predicate accepts receives a gradient.
pub fn full_loss_graph(
    g: &mut Graph<'_>,
    joint: &JointConfig,
    adapter: &AdapterConfig,
    frames: &Tensor,
    targets: &[usize],
    cat: &ExpandedCatalog,
) -> Result<Var> {
    let layers = encoder_graph(g, joint, frames)?;
    let bias = adapter_forward(g, adapter, &layers, cat)?;
    let pred = prediction_graph(g, joint, targets)?;
    joint_loss_graph(g, bias.h_hat, pred, targets)
}

/// Adapter loss over cached frozen-core outputs.
fn adapter_loss(
    params: &ParamSet,
    adapter: &AdapterConfig,
    enc: &EncoderOutput,
    pred: &Tensor,
    targets: &[usize],
    cat: &ExpandedCatalog,
    with_grad: bool,
) -> Result<(f64, ParamGrads)> {
    let mut g = if with_grad {
        Graph::new(params, is_adapter_param)
    } else {
        Graph::inference(params)
    };
    let layers: Vec<Var> = enc.layers.iter().map(|t| g.constant(t.clone())).collect();
    let bias = adapter_forward(&mut g, adapter, &layers, cat)?;
    let p = g.constant(pred.clone());
    let loss = joint_loss_graph(&mut g, bias.h_hat, p, targets)?;
    let value = g.value(loss).data()[0];
    let grads = if with_grad {
        g.backward(loss)?
    } else {
        ParamGrads::new()
    };
    Ok((value, grads))
}

/// Fails unless every core tensor of `trained` is byte-identical to `base`.
pub fn check_frozen_core(base: &ParamSet, trained: &ParamSet) -> Result<()> {
    let names = |s: &ParamSet| {
        s.names()
            .filter(|n| is_core_param(n))
            .cloned()
            .collect::<Vec<_>>()
    };
    if names(base) != names(trained) {
        return Err(Error::FrozenCore(
            "core parameter sets differ in their names".into(),
        ));
    }
    for n in names(base) {
        if base.get(&n)?.to_le_bytes() != trained.get(&n)?.to_le_bytes() {
            return Err(Error::FrozenCore(format!(
                "{n} changed during adapter training"
            )));
        }
    }
    Ok(())
}

/// Deterministic train/dev partition of `n` items.
fn dev_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut k = (fraction * n as f64).ceil() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let dev = idx.split_off(n - k);
    (idx, dev)
}

struct DevScore {
    loss: f64,
    entity: Option<f64>,
}

/// Shared epoch loop. `jobs` lays out one epoch of work in order; `grad`
/// scores a job; `dev` scores the current parameters. Batches are reduced
/// in job order, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn fit<J: Sync>(
    stage: Stage,
    cfg: &TrainConfig,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    mut jobs: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<J>>,
    grad: impl Fn(&ParamSet, &J) -> Result<(f64, ParamGrads)> + Sync,
    dev: impl Fn(&ParamSet) -> Result<Option<DevScore>>,
    stop_on_entity: bool,
    mut on_improve: impl FnMut(&ParamSet) -> Result<()>,
) -> Result<(Vec<LogRecord>, usize, usize)> {
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut log = Vec::new();
    let metric = |d: &DevScore| {
        if stop_on_entity {
            d.entity.unwrap_or(d.loss)
        } else {
            d.loss
        }
    };
    let mut best = match dev(params)? {
        Some(d) => {
            log.push(LogRecord {
                stage,
                epoch: 0,
                split: "dev".into(),
                loss: d.loss,
                entity_loss: d.entity,
            });
            metric(&d)
        }
        None => f64::INFINITY,
    };
    let mut best_params = params.clone();
    let (mut best_epoch, mut stale, mut run) = (0, 0, 0);
    for epoch in 1..=cfg.max_epochs {
        run = epoch;
        let work = jobs(epoch, rng)?;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in work.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, ParamGrads)>> =
                batch.par_iter().map(|j| grad(params, j)).collect();
            let mut sum = ParamGrads::new();
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (name, v) in g {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, v);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("non-finite batch loss {batch_loss}"),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            sum.values_mut().flatten().for_each(|x| *x *= scale);
            let norm = clip_global_norm(&mut sum, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(params, &sum)?;
            total += batch_loss;
            count += batch.len();
        }
        let train_loss = total / count.max(1) as f64;
        log.push(LogRecord {
            stage,
            epoch,
            split: "train".into(),
            loss: train_loss,
            entity_loss: None,
        });
        match dev(params)? {
            Some(d) => {
                if !d.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        msg: format!("non-finite dev loss {}", d.loss),
                    });
                }
                let m = metric(&d);
                info!(
                    "{stage} epoch {epoch}: train {train_loss:.4} dev {:.4}{}",
                    d.loss,
                    d.entity
                        .map(|e| format!(" entity {e:.4}"))
                        .unwrap_or_default()
                );
                log.push(LogRecord {
                    stage,
                    epoch,
                    split: "dev".into(),
                    loss: d.loss,
                    entity_loss: d.entity,
                });
                if m < best {
                    best = m;
                    best_params = params.clone();
                    best_epoch = epoch;
                    stale = 0;
                    on_improve(params)?;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
            }
            None => {
                info!("{stage} epoch {epoch}: train {train_loss:.4}");
                best_params = params.clone();
                best_epoch = epoch;
                on_improve(params)?;
            }
        }
    }
    *params = best_params;
    Ok((log, best_epoch, run))
}

fn check_joint(joint: &JointConfig, corpus: &Corpus) -> Result<()> {
    joint.validate()?;
    if joint.vocab_size != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} does not match the corpus vocabulary ({})",
            joint.vocab_size,
            corpus.vocab.len()
        )));
    }
    if joint.feat_dim != corpus.cfg.feat_dim {
        return Err(Error::Config(format!(
            "feat_dim {} does not match the corpus features ({})",
            joint.feat_dim, corpus.cfg.feat_dim
        )));
    }
    Ok(())
}

/// Trains the vanilla transducer on the base split, early-stopping on a
/// held-out slice of it. With `save_to`, the best checkpoint so far is
/// written after every improving epoch, so it survives a divergence.
pub fn pretrain_base(
    corpus: &Corpus,
    joint: &JointConfig,
    cfg: &TrainConfig,
    save_to: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_joint(joint, corpus)?;
    let utts = corpus.split(Split::TrainBase);
    if utts.is_empty() {
        return Err(Error::Input("base training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_core(joint, &mut rng)?;
    let (train, dev) = dev_split(utts.len(), cfg.dev_fraction, &mut rng);
    let vocab_hash = corpus.vocab.hash();
    let ckpt = |p: &ParamSet| Checkpoint {
        joint: joint.clone(),
        adapter: None,
        vocab_hash: vocab_hash.clone(),
        params: p.clone(),
    };
    let score = |p: &ParamSet, u: &Utterance| -> Result<f64> {
        let mut g = Graph::inference(p);
        let l = loss_graph(&mut g, joint, &u.features, &u.targets)?;
        Ok(g.value(l).data()[0])
    };
    let (log, best_epoch, epochs_run) = fit(
        Stage::Base,
        cfg,
        &mut params,
        &mut rng,
        |_, rng| {
            let mut order = train.clone();
            order.shuffle(rng);
            Ok(order)
        },
        |p, &i| {
            let u = &utts[i];
            let mut g = Graph::training(p);
            let l = loss_graph(&mut g, joint, &u.features, &u.targets)?;
            let v = g.value(l).data()[0];
            Ok((v, g.backward(l)?))
        },
        |p| {
            if dev.is_empty() {
                return Ok(None);
            }
            let losses: Vec<f64> = dev
                .par_iter()
                .map(|&i| score(p, &utts[i]))
                .collect::<Result<_>>()?;
            Ok(Some(DevScore {
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                entity: None,
            }))
        },
        false,
        |p| match save_to {
            Some(path) => ckpt(p).save(path),
            None => Ok(()),
        },
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt(&params),
        log,
        best_epoch,
        epochs_run,
    })
}

struct Cached<'a> {
    utt: &'a Utterance,
    enc: EncoderOutput,
    pred: Tensor,
    reference: Option<&'a EntityInfo>,
}

/// Trains only the adapter on top of `base`. Encoder and prediction-network
/// outputs are computed once, since the core never changes. Catalogs are
/// redrawn by `policy` every epoch. Early stopping watches the dev loss of
/// entity-bearing utterances.
pub fn train_adapter(
    base: &Checkpoint,
    corpus: &Corpus,
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
    policy: &CatalogSamplingPolicy,
    save_to: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    base.check_vocab(&corpus.vocab.hash())?;
    check_joint(&base.joint, corpus)?;
    adapter.validate(base.joint.enc_layers)?;
    if adapter.enc_units != base.joint.enc_units
        || adapter.grapheme_vocab != corpus.vocab.len()
        || adapter.phoneme_vocab != corpus.inventory.len()
    {
        return Err(Error::Config(
            "adapter dimensions do not match the base model and corpus".into(),
        ));
    }
    let utts = corpus.split(Split::TrainAdapter);
    if utts.is_empty() {
        return Err(Error::Input("adapter training split is empty".into()));
    }
    let core = base.core_params();
    let model = CoreModel::from_params(&base.joint, &core)?;
    let pool: Vec<&EntityInfo> = corpus
        .entities_of(EntityKind::Person)
        .filter(|e| e.adapter_train)
        .collect();
    let cache: Vec<Cached> = utts
        .par_iter()
        .map(|u| {
            Ok(Cached {
                utt: u,
                enc: model.encode_audio(&u.features)?,
                pred: prediction_outputs(&model, &u.targets)?,
                reference: u
                    .entity
                    .as_deref()
                    .and_then(|w| corpus.entities.iter().find(|e| e.word == w)),
            })
        })
        .collect::<Result<_>>()?;

    // separate streams, so every variant sees the same data order
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada9_7e55);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = core.clone();
    params.extend(init_adapter(adapter, base.joint.enc_layers, &mut init_rng)?);
    let (train, dev) = dev_split(cache.len(), cfg.dev_fraction, &mut rng);
    let dev_jobs: Vec<(usize, ExpandedCatalog)> = dev
        .iter()
        .map(|&i| {
            let words = policy.sample(cache[i].reference, &pool, &mut rng);
            Ok((i, build_catalog(&words, corpus)?))
        })
        .collect::<Result<_>>()?;

    let vocab_hash = base.vocab_hash.clone();
    let ckpt = |p: &ParamSet| -> Result<Checkpoint> {
        check_frozen_core(&core, p)?;
        Ok(Checkpoint {
            joint: base.joint.clone(),
            adapter: Some(adapter.clone()),
            vocab_hash: vocab_hash.clone(),
            params: p.clone(),
        })
    };
    let run = |p: &ParamSet, job: &(usize, ExpandedCatalog), with_grad: bool| {
        let c = &cache[job.0];
        adapter_loss(
            p,
            adapter,
            &c.enc,
            &c.pred,
            &c.utt.targets,
            &job.1,
            with_grad,
        )
    };
    let (log, best_epoch, epochs_run) = fit(
        Stage::Adapter,
        cfg,
        &mut params,
        &mut rng,
        |_, rng| {
            let mut order = train.clone();
            order.shuffle(rng);
            order
                .into_iter()
                .map(|i| {
                    let words = policy.sample(cache[i].reference, &pool, rng);
                    (i, words)
                })
                .map(|(i, w)| build_catalog(&w, corpus).map(|c| (i, c)))
                .collect::<Result<Vec<_>>>()
        },
        |p, job| run(p, job, true),
        |p| {
            if dev_jobs.is_empty() {
                return Ok(None);
            }
            let losses: Vec<(f64, bool)> = dev_jobs
                .par_iter()
                .map(|job| {
                    Ok((
                        run(p, job, false)?.0,
                        cache[job.0].utt.domain == Domain::Entity,
                    ))
                })
                .collect::<Result<_>>()?;
            let mean =
                |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            Ok(Some(DevScore {
                loss: mean(losses.iter().map(|x| x.0).collect()).unwrap(),
                entity: mean(losses.iter().filter(|x| x.1).map(|x| x.0).collect()),
            }))
        },
        true,
        |p| match save_to {
            Some(path) => ckpt(p)?.save(path),
            None => Ok(()),
        },
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt(&params)?,
        log,
        best_epoch,
        epochs_run,
    })
}

/// Exact parameter counts of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub core: usize,
    pub adapter: usize,
}

impl ParamCounts {
    /// Adapter share of all parameters.
    pub fn adapter_ratio(&self) -> f64 {
        self.adapter as f64 / (self.core + self.adapter) as f64
    }
}

pub fn count_params(ckpt: &Checkpoint) -> ParamCounts {
    ParamCounts {
        core: ckpt.params.count_where(is_core_param),
        adapter: ckpt.params.count_where(is_adapter_param),
    }
}
