//! Oracles shared by the integration tests.
#![allow(dead_code)]

use procter::numerics::Tensor;
use procter::rnnt::{init_core, transducer_forward_backward, CoreModel, JointConfig, BLANK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// −log of the summed probability of every monotone path, listed one by one.
pub fn enumerate_loss(logp: &[f64], frames: usize, vocab: usize, targets: &[usize]) -> f64 {
    let u1 = targets.len() + 1;
    let at = |t: usize, u: usize, k: usize| logp[(t * u1 + u) * vocab + k];
    let mut paths = Vec::new();
    // one log score per path; every path ends with the blank at (T-1, U)
    fn walk(
        t: usize,
        u: usize,
        frames: usize,
        u_max: usize,
        acc: f64,
        f: &dyn Fn(usize, usize, bool) -> f64,
        out: &mut Vec<f64>,
    ) {
        if t == frames - 1 && u == u_max {
            out.push(acc + f(t, u, false));
            return;
        }
        if u < u_max {
            walk(t, u + 1, frames, u_max, acc + f(t, u, true), f, out);
        }
        if t < frames - 1 {
            walk(t + 1, u, frames, u_max, acc + f(t, u, false), f, out);
        }
    }
    let step = |t: usize, u: usize, emit: bool| {
        if emit {
            at(t, u, targets[u])
        } else {
            at(t, u, BLANK)
        }
    };
    walk(0, 0, frames, targets.len(), 0.0, &step, &mut paths);
    let m = paths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(m + paths.iter().map(|p| (p - m).exp()).sum::<f64>().ln())
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<usize>, Vec<f64>) {
    let frames = rng.random_range(1..=4);
    let vocab = rng.random_range(2..=5);
    let u = rng.random_range(0..=3);
    let targets: Vec<usize> = (0..u).map(|_| rng.random_range(1..vocab)).collect();
    let n = frames * (u + 1) * vocab;
    let mut logp = Vec::with_capacity(n);
    for _ in 0..frames * (u + 1) {
        let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + raw.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        logp.extend(raw.iter().map(|x| x - z));
    }
    (frames, vocab, targets, logp)
}

pub fn small_model(vocab: usize, seed: u64, scale: f64) -> CoreModel {
    let cfg = JointConfig {
        feat_dim: 3,
        enc_layers: 1,
        enc_units: 4,
        embed_dim: 3,
        pred_layers: 1,
        pred_units: 4,
        joint_dim: 5,
        vocab_size: vocab,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = init_core(&cfg, &mut rng).unwrap();
    for (_, t) in set.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    CoreModel::from_params(&cfg, &set).unwrap()
}

pub fn random_encoding(frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![frames, 4],
        (0..frames * 4)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

/// Per-frame label/blank log probabilities for the history `1^u`.
pub fn lattice(model: &CoreModel, h: &Tensor, max_u: usize) -> Vec<Vec<[f64; 2]>> {
    let ep = model.project_encoder(h).unwrap();
    let mut pred = Vec::new();
    let (mut out, mut state) = model.predict_step(BLANK, &model.initial_state()).unwrap();
    for _ in 0..=max_u {
        pred.push(model.project_prediction(&out).unwrap());
        let next = model.predict_step(1, &state).unwrap();
        out = next.0;
        state = next.1;
    }
    (0..h.rows())
        .map(|t| {
            pred.iter()
                .map(|p| {
                    let lp = model.log_probs_from_projections(ep.row(t), p);
                    [lp[BLANK], lp[1]]
                })
                .collect()
        })
        .collect()
}

/// Most probable label sequence of a V=2, T=2 model by enumerating every
/// `1^n` with at most `cap` labels per frame, summing over alignments.
pub fn enumerate_map(model: &CoreModel, h: &Tensor, cap: usize) -> (f64, usize) {
    let lat = lattice(model, h, 2 * cap);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for n in 0..=2 * cap {
        let mut terms = Vec::new();
        for n0 in 0..=n.min(cap) {
            let n1 = n - n0;
            if n1 > cap {
                continue;
            }
            let mut s = 0.0;
            for u in 0..n0 {
                s += lat[0][u][1];
            }
            s += lat[0][n0][0];
            for u in n0..n {
                s += lat[1][u][1];
            }
            s += lat[1][n][0];
            terms.push(s);
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total = m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        if total > best.0 {
            best = (total, n);
        }
    }
    best
}

/// Worst relative loss and gradient errors of the DP against enumeration
/// (gradients by central differences of the enumerated loss).
pub fn transducer_oracle_errors(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (frames, vocab, targets, logp) = random_instance(&mut rng);
        let (loss, grad) =
            transducer_forward_backward(&logp, frames, vocab, &targets, BLANK).unwrap();
        let oracle = enumerate_loss(&logp, frames, vocab, &targets);
        worst_loss = worst_loss.max((loss - oracle).abs() / oracle.abs().max(1e-12));
        let eps = 1e-6;
        for i in 0..logp.len() {
            let mut up = logp.clone();
            let mut down = logp.clone();
            up[i] += eps;
            down[i] -= eps;
            let numeric = (enumerate_loss(&up, frames, vocab, &targets)
                - enumerate_loss(&down, frames, vocab, &targets))
                / (2.0 * eps);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-3);
            worst_grad = worst_grad.max(err);
        }
    }
    (worst_loss, worst_grad)
}
