//! Transducer loss: forward-backward over the T×(U+1) alignment lattice.

use crate::error::{Error, Result};
use crate::numerics::kernels::log_add;
use crate::numerics::{Tape, Var};

/// Returns `−log P(targets | x)` and its gradient with respect to every
/// entry of `logp`, which is laid out as rows `t·(U+1) + u` of width `vocab`.
pub fn transducer_forward_backward(
    logp: &[f64],
    frames: usize,
    vocab: usize,
    targets: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    let u1 = targets.len() + 1;
    if frames == 0 {
        return Err(Error::pre("transducer_loss", "no frames"));
    }
    if logp.len() != frames * u1 * vocab {
        let got_u1 = logp.len() / (frames * vocab).max(1);
        return Err(Error::dim(
            "transducer_loss",
            "label axis (U+1)",
            u1,
            got_u1,
        ));
    }
    if blank >= vocab {
        return Err(Error::Index {
            what: "blank id",
            index: blank,
            size: vocab,
        });
    }
    for &y in targets {
        if y == blank {
            return Err(Error::pre(
                "transducer_loss",
                "target sequence contains blank",
            ));
        }
        if y >= vocab {
            return Err(Error::Index {
                what: "target token",
                index: y,
                size: vocab,
            });
        }
    }
    let lp = |t: usize, u: usize, k: usize| logp[(t * u1 + u) * vocab + k];
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * u1];
    let mut beta = vec![ninf; frames * u1];
    let at = |t: usize, u: usize| t * u1 + u;

    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = ninf;
            if t > 0 {
                a = alpha[at(t - 1, u)] + lp(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add(a, alpha[at(t, u - 1)] + lp(t, u - 1, targets[u - 1]));
            }
            alpha[at(t, u)] = a;
        }
    }
    let last = frames - 1;
    let u_max = u1 - 1;
    let log_z = alpha[at(last, u_max)] + lp(last, u_max, blank);

    beta[at(last, u_max)] = lp(last, u_max, blank);
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            if t == last && u == u_max {
                continue;
            }
            let mut b = ninf;
            if t < last {
                b = beta[at(t + 1, u)] + lp(t, u, blank);
            }
            if u < u_max {
                b = log_add(b, beta[at(t, u + 1)] + lp(t, u, targets[u]));
            }
            beta[at(t, u)] = b;
        }
    }

    let mut grad = vec![0.0; logp.len()];
    if log_z == ninf {
        // No path has nonzero probability; the loss is infinite and the
        // gradient is left at zero.
        return Ok((f64::INFINITY, grad));
    }
    for t in 0..frames {
        for u in 0..u1 {
            let a = alpha[at(t, u)];
            if a == ninf {
                continue;
            }
            let row = (t * u1 + u) * vocab;
            let next_blank = if t == last {
                if u == u_max {
                    0.0
                } else {
                    ninf
                }
            } else {
                beta[at(t + 1, u)]
            };
            let occ = a + lp(t, u, blank) + next_blank - log_z;
            if occ > ninf {
                grad[row + blank] = -occ.exp();
            }
            if u < u_max {
                let y = targets[u];
                let occ = a + lp(t, u, y) + beta[at(t, u + 1)] - log_z;
                if occ > ninf {
                    grad[row + y] = -occ.exp();
                }
            }
        }
    }
    Ok((-log_z, grad))
}

/// Records the transducer loss of `targets` on `tape`; `logprobs` must be
/// log-softmaxed, shaped T×(U+1)×V or (T·(U+1))×V.
pub fn transducer_loss(
    tape: &mut Tape,
    logprobs: Var,
    frames: usize,
    targets: &[usize],
    blank: usize,
) -> Result<Var> {
    tape.transducer_loss(logprobs, frames, targets, blank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::log_softmax_inplace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_path_instance() {
        // T=1, U=1, V=3: the only path is y₁ at (0,0) then blank at (0,1).
        let lp = [0.2f64, 0.5, 0.3, 0.6, 0.1, 0.3].map(f64::ln);
        let (loss, _) = transducer_forward_backward(&lp, 1, 3, &[1], 0).unwrap();
        let expect = -(0.5f64 * 0.6).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_blank_in_target_and_bad_lattice() {
        let lp = vec![0.0; 2 * 2 * 3];
        assert!(matches!(
            transducer_forward_backward(&lp, 2, 3, &[0], 0),
            Err(Error::Precondition { .. })
        ));
        assert!(matches!(
            transducer_forward_backward(&lp, 2, 3, &[1, 2], 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn one_hot_path_has_zero_loss() {
        // T=2, U=1: emit y at (0,0), blank at (0,1), blank at (1,1).
        let (t_len, u1, v) = (2, 2, 3);
        let mut lp = vec![f64::NEG_INFINITY; t_len * u1 * v];
        let set = |lp: &mut Vec<f64>, t: usize, u: usize, k: usize| lp[(t * u1 + u) * v + k] = 0.0;
        set(&mut lp, 0, 0, 2);
        set(&mut lp, 0, 1, 0);
        set(&mut lp, 1, 1, 0);
        // Rows never reached by the path still need a distribution.
        set(&mut lp, 1, 0, 0);
        let (loss, _) = transducer_forward_backward(&lp, 2, 3, &[2], 0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn gradient_sums_to_minus_path_count_per_frame() {
        // Every alignment passes through exactly T + U lattice arcs, so the
        // total occupancy mass is T + U.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t_len, targets, v) = (4, vec![1, 2, 1], 4);
        let u1 = targets.len() + 1;
        let mut lp: Vec<f64> = (0..t_len * u1 * v)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        lp.chunks_exact_mut(v).for_each(log_softmax_inplace);
        let (_, g) = transducer_forward_backward(&lp, t_len, v, &targets, 0).unwrap();
        let total: f64 = g.iter().sum();
        assert!((total + (t_len + targets.len()) as f64).abs() < 1e-10);
    }
}
