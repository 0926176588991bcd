use rand::Rng;

use super::kernels;
use super::params::{Graph, ParamSet};
use super::tape::{cell_activate, check_lstm_shapes, LstmVars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One LSTM layer. Gate blocks are packed row-wise in the order
/// input, forget, cell, output; `w_ih` is 4H×D_in, `w_hh` is 4H×H and a
/// single bias of length 4H serves both paths.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn init(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmParams {
            w_ih: Tensor::uniform_init(&[4 * hidden, d_in], rng),
            w_hh: Tensor::uniform_init(&[4 * hidden, hidden], rng),
            b: Tensor::vector(
                (0..4 * hidden)
                    .map(|i| if i / hidden == 1 { 1.0 } else { 0.0 })
                    .collect(),
            ),
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(&[4 * hidden, d_in]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    /// Scalar count: 4·(H·(D_in + H) + H).
    pub fn param_count(d_in: usize, hidden: usize) -> usize {
        4 * (hidden * (d_in + hidden) + hidden)
    }

    pub fn insert_into(self, set: &mut ParamSet, prefix: &str) {
        set.insert(format!("{prefix}.w_ih"), self.w_ih);
        set.insert(format!("{prefix}.w_hh"), self.w_hh);
        set.insert(format!("{prefix}.b"), self.b);
    }

    pub fn from_set(set: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(LstmParams {
            w_ih: set.get(&format!("{prefix}.w_ih"))?.clone(),
            w_hh: set.get(&format!("{prefix}.w_hh"))?.clone(),
            b: set.get(&format!("{prefix}.b"))?.clone(),
        })
    }

    /// Tape-free single step, used by decoding.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let hid = self.hidden();
        check_lstm_shapes(x.len(), hid, &self.w_ih, &self.w_hh, &self.b)?;
        if h.len() != hid || c.len() != hid {
            return Err(Error::dim(
                "lstm_step",
                "state width (H)",
                hid,
                h.len().max(c.len()),
            ));
        }
        Ok(step_raw(
            self.w_ih.data(),
            self.w_hh.data(),
            self.b.data(),
            x,
            h,
            c,
        ))
    }

    /// Tape-free pass over a whole sequence from a zero state; returns L×H.
    pub fn run(&self, xs: &[f64], len: usize) -> Vec<f64> {
        let (hid, d_in) = (self.hidden(), self.input_dim());
        let g4 = 4 * hid;
        let mut pre = vec![0.0; len * g4];
        for r in pre.chunks_exact_mut(g4) {
            r.copy_from_slice(self.b.data());
        }
        kernels::gemm(
            len,
            d_in,
            g4,
            xs,
            false,
            self.w_ih.data(),
            true,
            1.0,
            &mut pre,
        );
        let mut out = vec![0.0; len * hid];
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        let mut gates = vec![0.0; g4];
        for t in 0..len {
            let a = &mut pre[t * g4..(t + 1) * g4];
            kernels::matvec_acc(self.w_hh.data(), &h, a);
            cell_activate(a, &mut gates, hid);
            for j in 0..hid {
                c[j] = gates[hid + j] * c[j] + gates[j] * gates[2 * hid + j];
                h[j] = gates[3 * hid + j] * c[j].tanh();
            }
            out[t * hid..(t + 1) * hid].copy_from_slice(&h);
        }
        out
    }
}

pub(crate) fn step_raw(
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let mut pre = b.to_vec();
    kernels::matvec_acc(w_ih, x, &mut pre);
    kernels::matvec_acc(w_hh, h, &mut pre);
    let mut gates = vec![0.0; 4 * hid];
    cell_activate(&pre, &mut gates, hid);
    let mut c2 = vec![0.0; hid];
    let mut h2 = vec![0.0; hid];
    for j in 0..hid {
        c2[j] = gates[hid + j] * c[j] + gates[j] * gates[2 * hid + j];
        h2[j] = gates[3 * hid + j] * c2[j].tanh();
    }
    (h2, c2)
}

/// Binds the three tensors stored under `prefix`.
pub fn lstm_vars(g: &mut Graph<'_>, prefix: &str) -> Result<LstmVars> {
    Ok(LstmVars {
        w_ih: g.p(&format!("{prefix}.w_ih"))?,
        w_hh: g.p(&format!("{prefix}.w_hh"))?,
        b: g.p(&format!("{prefix}.b"))?,
    })
}

/// One recorded LSTM cell update built from primitive tape ops, so that
/// chained calls differentiate through time.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, p: LstmVars) -> Result<(Var, Var)> {
    let hid = tape.value(p.w_hh).cols();
    check_lstm_shapes(
        tape.value(x).cols(),
        hid,
        tape.value(p.w_ih),
        tape.value(p.w_hh),
        tape.value(p.b),
    )?;
    if tape.value(h).numel() != hid || tape.value(c).numel() != hid {
        return Err(Error::dim(
            "lstm_step",
            "state width (H)",
            hid,
            tape.value(h).numel(),
        ));
    }
    let from_x = tape.dense(x, p.w_ih, Some(p.b))?;
    let from_h = tape.dense(h, p.w_hh, None)?;
    let pre = tape.add(from_x, from_h)?;
    let i = tape.slice_cols(pre, 0, hid)?;
    let f = tape.slice_cols(pre, hid, hid)?;
    let g = tape.slice_cols(pre, 2 * hid, hid)?;
    let o = tape.slice_cols(pre, 3 * hid, hid)?;
    let (i, f, g, o) = (
        tape.sigmoid(i),
        tape.sigmoid(f),
        tape.tanh(g),
        tape.sigmoid(o),
    );
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c2 = tape.add(keep, write)?;
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Concatenation of the final forward state and the final backward state
/// (the backward direction reads the sequence reversed), width 2H.
pub fn bilstm_encode(tape: &mut Tape, seq: Var, fwd: LstmVars, bwd: LstmVars) -> Result<Var> {
    let len = tape.value(seq).rows();
    if len == 0 || tape.value(seq).rank() != 2 {
        return Err(Error::pre(
            "bilstm_encode",
            "sequence must be a non-empty L×D matrix",
        ));
    }
    let hf = tape.lstm(seq, fwd, false)?;
    let hb = tape.lstm(seq, bwd, true)?;
    let last_f = tape.row(hf, len - 1)?;
    let last_b = tape.row(hb, 0)?;
    tape.concat_cols(&[last_f, last_b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_layer(d_in: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        LstmParams {
            w_ih: rand_tensor(&[4 * h, d_in], rng),
            w_hh: rand_tensor(&[4 * h, h], rng),
            b: rand_tensor(&[4 * h], rng),
        }
    }

    #[test]
    fn zero_params_zero_state_is_fixed_point() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = p.step(&[0.3, -1.0, 2.0], &[0.0; 2], &[0.0; 2]).unwrap();
        // g = tanh(0) = 0, so c' = 0.5·0 + 0.5·0 and h' = 0.5·tanh(0).
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn step_rejects_bad_state_width() {
        let p = LstmParams::zeros(3, 2);
        assert!(matches!(
            p.step(&[0.0; 3], &[0.0; 3], &[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            p.step(&[0.0; 4], &[0.0; 2], &[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = ParamSet::new();
        random_layer(3, 2, &mut rng).insert_into(&mut set, "cell");
        set.insert("x", rand_tensor(&[3], &mut rng));
        set.insert("h0", rand_tensor(&[2], &mut rng));
        set.insert("c0", rand_tensor(&[2], &mut rng));
        let report = finite_diff_check(&set, 1e-6, |g| {
            let p = lstm_vars(g, "cell")?;
            let (x, h, c) = (g.p("x")?, g.p("h0")?, g.p("c0")?);
            let (h1, c1) = lstm_step(g, x, h, c, p)?;
            let both = g.concat_cols(&[h1, c1])?;
            let w = g.constant(Tensor::vector(vec![0.7, -1.3, 0.4, 2.1]));
            let prod = g.mul(both, w)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        // All 8 weight blocks live in w_ih / w_hh; every entry is compared.
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn two_chained_steps_backprop_through_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut set = ParamSet::new();
        random_layer(2, 3, &mut rng).insert_into(&mut set, "cell");
        set.insert("x", rand_tensor(&[2, 2], &mut rng));
        let report = finite_diff_check(&set, 1e-6, |g| {
            let p = lstm_vars(g, "cell")?;
            let x = g.p("x")?;
            let h0 = g.constant(Tensor::zeros(&[3]));
            let c0 = g.constant(Tensor::zeros(&[3]));
            let x0 = g.row(x, 0)?;
            let x1 = g.row(x, 1)?;
            let (h1, c1) = lstm_step(g, x0, h0, c0, p)?;
            let (h2, _) = lstm_step(g, x1, h1, c1, p)?;
            let t = g.tanh(h2);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn fused_sequence_matches_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layer = random_layer(3, 4, &mut rng);
        let x = rand_tensor(&[5, 3], &mut rng);
        let mut set = ParamSet::new();
        layer.clone().insert_into(&mut set, "l");
        for reverse in [false, true] {
            let mut g = Graph::inference(&set);
            let p = lstm_vars(&mut g, "l").unwrap();
            let xv = g.constant(x.clone());
            let fused = g.lstm(xv, p, reverse).unwrap();
            let mut h = vec![0.0; 4];
            let mut c = vec![0.0; 4];
            let order: Vec<usize> = if reverse {
                (0..5).rev().collect()
            } else {
                (0..5).collect()
            };
            for t in order {
                let (h2, c2) = layer.step(x.row(t), &h, &c).unwrap();
                h = h2;
                c = c2;
                for (a, b) in g.value(fused).row(t).iter().zip(&h) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
        let plain = layer.run(x.data(), 5);
        let mut g = Graph::inference(&set);
        let p = lstm_vars(&mut g, "l").unwrap();
        let xv = g.constant(x.clone());
        let fused = g.lstm(xv, p, false).unwrap();
        assert_eq!(plain, g.value(fused).data());
    }

    #[test]
    fn fused_sequence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut set = ParamSet::new();
        random_layer(3, 2, &mut rng).insert_into(&mut set, "l");
        set.insert("x", rand_tensor(&[4, 3], &mut rng));
        for reverse in [false, true] {
            let report = finite_diff_check(&set, 1e-6, |g| {
                let p = lstm_vars(g, "l")?;
                let x = g.p("x")?;
                let hs = g.lstm(x, p, reverse)?;
                let w = g.constant(rand_tensor(&[4, 2], &mut ChaCha8Rng::seed_from_u64(3)));
                let prod = g.mul(hs, w)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(report.max_rel_err <= 1e-5, "{report:?}");
        }
    }

    #[test]
    fn bilstm_length_one_is_concat_of_single_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = random_layer(2, 3, &mut rng);
        let b = random_layer(2, 3, &mut rng);
        let x = rand_tensor(&[1, 2], &mut rng);
        let mut set = ParamSet::new();
        f.clone().insert_into(&mut set, "f");
        b.clone().insert_into(&mut set, "b");
        let mut g = Graph::inference(&set);
        let (pf, pb) = (
            lstm_vars(&mut g, "f").unwrap(),
            lstm_vars(&mut g, "b").unwrap(),
        );
        let xv = g.constant(x.clone());
        let out = bilstm_encode(&mut g, xv, pf, pb).unwrap();
        let (hf, _) = f.step(x.row(0), &[0.0; 3], &[0.0; 3]).unwrap();
        let (hb, _) = b.step(x.row(0), &[0.0; 3], &[0.0; 3]).unwrap();
        let expect: Vec<f64> = hf.into_iter().chain(hb).collect();
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn bilstm_palindrome_with_tied_params_has_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = random_layer(2, 3, &mut rng);
        let x = Tensor::from_rows(&[vec![0.1, 0.5], vec![-0.7, 0.2], vec![0.1, 0.5]]).unwrap();
        let mut set = ParamSet::new();
        layer.insert_into(&mut set, "t");
        let mut g = Graph::inference(&set);
        let p = lstm_vars(&mut g, "t").unwrap();
        let xv = g.constant(x);
        let out = bilstm_encode(&mut g, xv, p, p).unwrap();
        let d = g.value(out).data();
        assert_eq!(&d[..3], &d[3..]);
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut set = ParamSet::new();
        random_layer(3, 2, &mut rng).insert_into(&mut set, "f");
        random_layer(3, 2, &mut rng).insert_into(&mut set, "b");
        set.insert("x", rand_tensor(&[4, 3], &mut rng));
        let report = finite_diff_check(&set, 1e-6, |g| {
            let (f, b) = (lstm_vars(g, "f")?, lstm_vars(g, "b")?);
            let x = g.p("x")?;
            let e = bilstm_encode(g, x, f, b)?;
            let w = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 1.5]));
            let prod = g.mul(e, w)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn bilstm_rejects_empty_sequence() {
        // A zero-length tensor cannot be built, so the empty case surfaces at construction.
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }
}
