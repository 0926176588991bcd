//! End-to-end runs on a tiny corpus: determinism, the frozen core,
//! parameter accounting and capacity.

use procter::datasynth::{dir_hash, gen_corpus, Corpus, Split, SynthConfig, Utterance};
use procter::evalkit::{evaluate, EvalOptions};
use procter::numerics::{Graph, ParamSet};
use procter::pipeline::{
    check_frozen_core, clip_global_norm, count_params, pretrain_base, train_adapter, Adam,
    CatalogSamplingPolicy, TrainConfig, TrainOutcome,
};
use procter::procter::{AdapterConfig, Variant};
use procter::rnnt::{init_core, is_core_param, loss_graph, JointConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> SynthConfig {
    SynthConfig {
        frames_per_phoneme: 1,
        entities: 30,
        devices: 12,
        fillers: 60,
        train_base: 200,
        train_adapter: 10,
        test_general: 12,
        test_entity: 12,
        test_device: 12,
        catalog_size: 6,
        vocab_size: 40,
        ..SynthConfig::default()
    }
}

fn joint(c: &Corpus) -> JointConfig {
    JointConfig {
        feat_dim: c.cfg.feat_dim,
        enc_layers: 5,
        enc_units: 8,
        embed_dim: 4,
        pred_layers: 1,
        pred_units: 8,
        joint_dim: 8,
        vocab_size: c.vocab.len(),
    }
}

fn adapter_cfg(c: &Corpus, v: Variant) -> AdapterConfig {
    AdapterConfig::desk(c.vocab.len(), c.inventory.len(), 8).with_variant(v)
}

fn run(c: &Corpus, v: Variant) -> (TrainOutcome, TrainOutcome) {
    let tc = TrainConfig {
        lr: 5e-3,
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let base = pretrain_base(c, &joint(c), &tc, None).unwrap();
    let atc = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::adapter_default()
    };
    let ad = train_adapter(
        &base.checkpoint,
        c,
        &adapter_cfg(c, v),
        &atc,
        &CatalogSamplingPolicy::default(),
        None,
    )
    .unwrap();
    (base, ad)
}

#[test]
fn same_seed_same_corpus_checkpoints_and_reports() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = Vec::new();
    let mut outputs = Vec::new();
    for d in &dirs {
        gen_corpus(&tiny()).unwrap().save(d.path()).unwrap();
        hashes.push(dir_hash(d.path()).unwrap());
        let c = Corpus::load(d.path()).unwrap();
        let (base, ad) = run(&c, Variant::Procter);
        let report = evaluate(
            "p",
            &ad.checkpoint,
            &c,
            &[Split::TestEntity],
            &EvalOptions::default(),
        )
        .unwrap();
        outputs.push((
            base.checkpoint.to_bytes().unwrap(),
            ad.checkpoint.to_bytes().unwrap(),
            report,
        ));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(outputs[0], outputs[1]);

    let other = SynthConfig { seed: 8, ..tiny() };
    let d = tempfile::tempdir().unwrap();
    gen_corpus(&other).unwrap().save(d.path()).unwrap();
    assert_ne!(dir_hash(d.path()).unwrap(), hashes[0]);
}

#[test]
fn adapter_training_leaves_core_untouched_and_counts_add_up() {
    let c = gen_corpus(&tiny()).unwrap();
    for v in [Variant::TextOnly, Variant::Procter] {
        let (base, ad) = run(&c, v);
        check_frozen_core(&base.checkpoint.params, &ad.checkpoint.params).unwrap();
        for (name, t) in base.checkpoint.params.iter() {
            let after = ad.checkpoint.params.get(name).unwrap();
            let same = t
                .data()
                .iter()
                .zip(after.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} changed");
        }
        let counts = count_params(&ad.checkpoint);
        assert_eq!(counts.core, joint(&c).param_count());
        assert_eq!(counts.adapter, adapter_cfg(&c, v).param_count());
        assert_eq!(
            counts.core + counts.adapter,
            ad.checkpoint
                .params
                .iter()
                .map(|(_, t)| t.numel())
                .sum::<usize>()
        );
        assert!(
            ad.checkpoint
                .params
                .names()
                .filter(|n| is_core_param(n))
                .count()
                == base.checkpoint.params.len()
        );
    }
}

#[test]
fn vanilla_mode_reproduces_the_base_model() {
    let c = gen_corpus(&tiny()).unwrap();
    let (base, ad) = run(&c, Variant::Procter);
    let splits = [Split::TestGeneral, Split::TestEntity, Split::TestDevice];
    let opts = EvalOptions {
        vanilla: true,
        ..EvalOptions::default()
    };
    let a = evaluate("m", &ad.checkpoint, &c, &splits, &opts).unwrap();
    let b = evaluate("m", &base.checkpoint, &c, &splits, &opts).unwrap();
    assert_eq!(a.sets, b.sets);
}

#[test]
fn full_scale_adapter_is_about_one_and_a_half_million() {
    let n = AdapterConfig::full_scale().param_count();
    assert!((1_400_000..1_600_000).contains(&n), "{n}");
    let core = JointConfig::full_scale().param_count();
    assert!((n as f64 / (n + core) as f64) < 0.05);
}

#[test]
fn desk_adapter_stays_under_five_percent() {
    let joint = JointConfig {
        vocab_size: SynthConfig::default().vocab_size,
        ..JointConfig::default()
    };
    let core = joint.param_count();
    for v in Variant::ALL {
        let n = AdapterConfig::desk(joint.vocab_size, 21, joint.enc_units)
            .with_variant(v)
            .param_count();
        assert!((n as f64 / (n + core) as f64) < 0.05, "{v}: {n} vs {core}");
    }
}

#[test]
fn ten_utterances_can_be_overfit() {
    let c = gen_corpus(&SynthConfig {
        frames_per_phoneme: 2,
        ..tiny()
    })
    .unwrap();
    let utts = &c.split(Split::TrainBase)[..10];
    let joint = JointConfig {
        enc_units: 32,
        pred_units: 32,
        joint_dim: 32,
        ..joint(&c)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = init_core(&joint, &mut rng).unwrap();
    let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
    let loss = |p: &ParamSet, u: &Utterance| {
        let mut g = Graph::inference(p);
        let l = loss_graph(&mut g, &joint, &u.features, &u.targets).unwrap();
        g.value(l).data()[0]
    };
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        for u in utts {
            let mut g = Graph::training(&params);
            let l = loss_graph(&mut g, &joint, &u.features, &u.targets).unwrap();
            let mut grads = g.backward(l).unwrap();
            drop(g);
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut params, &grads).unwrap();
        }
        worst = utts.iter().map(|u| loss(&params, u)).fold(0.0, f64::max);
        if worst < 0.1 {
            break;
        }
    }
    assert!(worst < 0.1, "worst per-utterance loss {worst}");
}
