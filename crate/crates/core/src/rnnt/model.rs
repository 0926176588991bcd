//! Vanilla transducer: stacked LSTM audio encoder, LSTM prediction network
//! and an additive joint network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, log_softmax_inplace};
use crate::numerics::{lstm_vars, Graph, LstmParams, ParamSet, Tensor, Var};

/// Blank token id; also fed to the prediction network as the start symbol.
pub const BLANK: usize = 0;

/// Shape of the transducer.
///
/// Full-scale values are 8 encoder layers × 1280 units, 2 prediction layers
/// × 1280 units, a 512-wide joint and 4000 word pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_units: usize,
    pub embed_dim: usize,
    pub pred_layers: usize,
    pub pred_units: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            feat_dim: 16,
            enc_layers: 6,
            enc_units: 64,
            embed_dim: 32,
            pred_layers: 2,
            pred_units: 64,
            joint_dim: 64,
            vocab_size: 200,
        }
    }
}

impl JointConfig {
    pub fn full_scale() -> Self {
        JointConfig {
            feat_dim: 192,
            enc_layers: 8,
            enc_units: 1280,
            embed_dim: 1280,
            pred_layers: 2,
            pred_units: 1280,
            joint_dim: 512,
            vocab_size: 4000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feat_dim", self.feat_dim),
            ("enc_layers", self.enc_layers),
            ("enc_units", self.enc_units),
            ("embed_dim", self.embed_dim),
            ("pred_layers", self.pred_layers),
            ("pred_units", self.pred_units),
            ("joint_dim", self.joint_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must cover blank plus one label".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`init_core`].
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut d = self.feat_dim;
        for _ in 0..self.enc_layers {
            n += LstmParams::param_count(d, self.enc_units);
            d = self.enc_units;
        }
        n += self.vocab_size * self.embed_dim;
        let mut d = self.embed_dim;
        for _ in 0..self.pred_layers {
            n += LstmParams::param_count(d, self.pred_units);
            d = self.pred_units;
        }
        n += self.joint_dim * (self.enc_units + 1);
        n += self.joint_dim * self.pred_units;
        n += self.vocab_size * (self.joint_dim + 1);
        n
    }
}

pub fn enc_prefix(layer: usize) -> String {
    format!("enc.l{layer}")
}

pub fn pred_prefix(layer: usize) -> String {
    format!("pred.l{layer}")
}

/// True for names owned by the transducer core (encoder, prediction, joint).
pub fn is_core_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("pred.") || name.starts_with("joint.")
}

/// Fresh core parameters.
pub fn init_core(cfg: &JointConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut set = ParamSet::new();
    let mut d = cfg.feat_dim;
    for l in 0..cfg.enc_layers {
        LstmParams::init(d, cfg.enc_units, rng).insert_into(&mut set, &enc_prefix(l));
        d = cfg.enc_units;
    }
    set.insert(
        "pred.embed",
        Tensor::uniform_init(&[cfg.vocab_size, cfg.embed_dim], rng),
    );
    let mut d = cfg.embed_dim;
    for l in 0..cfg.pred_layers {
        LstmParams::init(d, cfg.pred_units, rng).insert_into(&mut set, &pred_prefix(l));
        d = cfg.pred_units;
    }
    set.insert(
        "joint.enc.w",
        Tensor::uniform_init(&[cfg.joint_dim, cfg.enc_units], rng),
    );
    set.insert("joint.enc.b", Tensor::zeros(&[cfg.joint_dim]));
    set.insert(
        "joint.pred.w",
        Tensor::uniform_init(&[cfg.joint_dim, cfg.pred_units], rng),
    );
    set.insert(
        "joint.out.w",
        Tensor::uniform_init(&[cfg.vocab_size, cfg.joint_dim], rng),
    );
    set.insert("joint.out.b", Tensor::zeros(&[cfg.vocab_size]));
    Ok(set)
}

/// Per-layer encoder outputs, each T×H_enc; the last entry is the final
/// encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub layers: Vec<Tensor>,
}

impl EncoderOutput {
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("encoder has at least one layer")
    }

    pub fn frames(&self) -> usize {
        self.last().rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Prediction network recurrent state, one (h, c) pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

/// Tape-free view of the core parameters used by inference.
#[derive(Debug, Clone)]
pub struct CoreModel {
    pub cfg: JointConfig,
    enc: Vec<LstmParams>,
    embed: Tensor,
    pred: Vec<LstmParams>,
    joint_enc_w: Tensor,
    joint_enc_b: Tensor,
    joint_pred_w: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl CoreModel {
    pub fn from_params(cfg: &JointConfig, set: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let enc = (0..cfg.enc_layers)
            .map(|l| LstmParams::from_set(set, &enc_prefix(l)))
            .collect::<Result<Vec<_>>>()?;
        let pred = (0..cfg.pred_layers)
            .map(|l| LstmParams::from_set(set, &pred_prefix(l)))
            .collect::<Result<Vec<_>>>()?;
        let m = CoreModel {
            cfg: cfg.clone(),
            enc,
            embed: set.get("pred.embed")?.clone(),
            pred,
            joint_enc_w: set.get("joint.enc.w")?.clone(),
            joint_enc_b: set.get("joint.enc.b")?.clone(),
            joint_pred_w: set.get("joint.pred.w")?.clone(),
            out_w: set.get("joint.out.w")?.clone(),
            out_b: set.get("joint.out.b")?.clone(),
        };
        let checks = [
            (
                "pred.embed",
                m.embed.shape(),
                vec![cfg.vocab_size, cfg.embed_dim],
            ),
            (
                "joint.enc.w",
                m.joint_enc_w.shape(),
                vec![cfg.joint_dim, cfg.enc_units],
            ),
            (
                "joint.pred.w",
                m.joint_pred_w.shape(),
                vec![cfg.joint_dim, cfg.pred_units],
            ),
            (
                "joint.out.w",
                m.out_w.shape(),
                vec![cfg.vocab_size, cfg.joint_dim],
            ),
        ];
        for (name, got, want) in checks {
            if got != want.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {got:?}, config implies {want:?}"
                )));
            }
        }
        Ok(m)
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Runs the stacked encoder over T×D_feat frames. Causal: every layer is
    /// a forward-only LSTM. Layers above the first add their input to their
    /// output.
    pub fn encode_audio(&self, frames: &Tensor) -> Result<EncoderOutput> {
        let t = frames.rows();
        if frames.rank() != 2 || frames.numel() == 0 {
            return Err(Error::pre(
                "encode_audio",
                "frames must be a non-empty T×D matrix",
            ));
        }
        if frames.cols() != self.cfg.feat_dim {
            return Err(Error::dim(
                "encode_audio",
                "feature dim",
                self.cfg.feat_dim,
                frames.cols(),
            ));
        }
        let mut layers = Vec::with_capacity(self.enc.len());
        let mut x = frames.data().to_vec();
        for (l, p) in self.enc.iter().enumerate() {
            let mut out = p.run(&x, t);
            if l > 0 {
                out.iter_mut().zip(&x).for_each(|(o, i)| *o += i);
            }
            layers.push(Tensor::new(vec![t, p.hidden()], out.clone())?);
            x = out;
        }
        Ok(EncoderOutput { layers })
    }

    pub fn initial_state(&self) -> PredState {
        PredState {
            h: vec![vec![0.0; self.cfg.pred_units]; self.cfg.pred_layers],
            c: vec![vec![0.0; self.cfg.pred_units]; self.cfg.pred_layers],
        }
    }

    /// Feeds `y_prev` (a label, or [`BLANK`] as the start symbol) and returns
    /// the top-layer output with the advanced state. Callers never feed blank
    /// after the start.
    pub fn predict_step(&self, y_prev: usize, state: &PredState) -> Result<(Vec<f64>, PredState)> {
        if y_prev >= self.cfg.vocab_size {
            return Err(Error::Index {
                what: "prediction input token",
                index: y_prev,
                size: self.cfg.vocab_size,
            });
        }
        let mut x = self.embed.row(y_prev).to_vec();
        let mut next = state.clone();
        for (l, p) in self.pred.iter().enumerate() {
            let (h, c) = p.step(&x, &state.h[l], &state.c[l])?;
            x = h.clone();
            next.h[l] = h;
            next.c[l] = c;
        }
        Ok((x, next))
    }

    /// Encoder-side joint projection `W_e h + b_e`, one row per frame.
    pub fn project_encoder(&self, h_enc: &Tensor) -> Result<Tensor> {
        if h_enc.cols() != self.cfg.enc_units {
            return Err(Error::dim(
                "joint",
                "encoder width",
                self.cfg.enc_units,
                h_enc.cols(),
            ));
        }
        let (t, j) = (h_enc.rows(), self.cfg.joint_dim);
        let mut out = Vec::with_capacity(t * j);
        for r in 0..t {
            let mut o = self.joint_enc_b.data().to_vec();
            kernels::matvec_acc(self.joint_enc_w.data(), h_enc.row(r), &mut o);
            out.extend(o);
        }
        Tensor::new(vec![t, j], out)
    }

    /// Prediction-side joint projection `W_p h` (no bias).
    pub fn project_prediction(&self, h_pre: &[f64]) -> Result<Vec<f64>> {
        if h_pre.len() != self.cfg.pred_units {
            return Err(Error::dim(
                "joint",
                "prediction width",
                self.cfg.pred_units,
                h_pre.len(),
            ));
        }
        let mut o = vec![0.0; self.cfg.joint_dim];
        kernels::matvec_acc(self.joint_pred_w.data(), h_pre, &mut o);
        Ok(o)
    }

    /// Joint pre-activation `W_e h_enc + b_e + W_p h_pre`.
    pub fn joint_pre_activation(&self, h_enc_t: &[f64], h_pre_u: &[f64]) -> Result<Vec<f64>> {
        if h_enc_t.len() != self.cfg.enc_units {
            return Err(Error::dim(
                "joint",
                "encoder width",
                self.cfg.enc_units,
                h_enc_t.len(),
            ));
        }
        let mut a = self.joint_enc_b.data().to_vec();
        kernels::matvec_acc(self.joint_enc_w.data(), h_enc_t, &mut a);
        let p = self.project_prediction(h_pre_u)?;
        a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        Ok(a)
    }

    /// Output logits over the vocabulary; no softmax.
    pub fn joint(&self, h_enc_t: &[f64], h_pre_u: &[f64]) -> Result<Vec<f64>> {
        let a = self.joint_pre_activation(h_enc_t, h_pre_u)?;
        Ok(self.logits_from_projections(&a, &vec![0.0; a.len()]))
    }

    /// Logits from already projected encoder and prediction rows.
    pub fn logits_from_projections(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = enc_proj
            .iter()
            .zip(pred_proj)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut logits = self.out_b.data().to_vec();
        kernels::matvec_acc(self.out_w.data(), &hidden, &mut logits);
        logits
    }

    pub fn log_probs_from_projections(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let mut l = self.logits_from_projections(enc_proj, pred_proj);
        log_softmax_inplace(&mut l);
        l
    }
}

/// Records the encoder on `g`; returns one T×H_enc node per layer.
pub fn encoder_graph(g: &mut Graph<'_>, cfg: &JointConfig, frames: &Tensor) -> Result<Vec<Var>> {
    if frames.rank() != 2 || frames.numel() == 0 {
        return Err(Error::pre(
            "encode_audio",
            "frames must be a non-empty T×D matrix",
        ));
    }
    let mut x = g.constant(frames.clone());
    let mut out = Vec::with_capacity(cfg.enc_layers);
    for l in 0..cfg.enc_layers {
        let p = lstm_vars(g, &enc_prefix(l))?;
        let h = g.lstm(x, p, false)?;
        x = if l > 0 { g.add(h, x)? } else { h };
        out.push(x);
    }
    Ok(out)
}

/// Prediction network outputs for the histories `[start], [start, y1], …`,
/// shaped (U+1)×H_pred.
pub fn prediction_graph(g: &mut Graph<'_>, cfg: &JointConfig, targets: &[usize]) -> Result<Var> {
    let mut ids = Vec::with_capacity(targets.len() + 1);
    ids.push(BLANK);
    ids.extend_from_slice(targets);
    let embed = g.p("pred.embed")?;
    let mut x = g.gather_rows(embed, &ids)?;
    for l in 0..cfg.pred_layers {
        let p = lstm_vars(g, &pred_prefix(l))?;
        x = g.lstm(x, p, false)?;
    }
    Ok(x)
}

/// Log-probabilities over the lattice, rows `t·(U+1) + u`.
pub fn joint_graph(g: &mut Graph<'_>, enc: Var, pred: Var) -> Result<Var> {
    let (we, be, wp) = (
        g.p("joint.enc.w")?,
        g.p("joint.enc.b")?,
        g.p("joint.pred.w")?,
    );
    let e = g.dense(enc, we, Some(be))?;
    let p = g.dense(pred, wp, None)?;
    let hidden = g.joint_hidden(e, p)?;
    let (wo, bo) = (g.p("joint.out.w")?, g.p("joint.out.b")?);
    let logits = g.dense(hidden, wo, Some(bo))?;
    Ok(g.log_softmax_rows(logits))
}

/// Transducer loss of `targets` given a final encoding `enc` (T×H_enc) and
/// prediction outputs `pred` ((U+1)×H_pred).
pub fn joint_loss_graph(g: &mut Graph<'_>, enc: Var, pred: Var, targets: &[usize]) -> Result<Var> {
    let frames = g.value(enc).rows();
    let logp = joint_graph(g, enc, pred)?;
    g.transducer_loss(logp, frames, targets, BLANK)
}

/// Full vanilla training loss for one utterance.
pub fn loss_graph(
    g: &mut Graph<'_>,
    cfg: &JointConfig,
    frames: &Tensor,
    targets: &[usize],
) -> Result<Var> {
    let layers = encoder_graph(g, cfg, frames)?;
    let pred = prediction_graph(g, cfg, targets)?;
    joint_loss_graph(g, *layers.last().unwrap(), pred, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, finite_diff_check_only};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> JointConfig {
        JointConfig {
            feat_dim: 3,
            enc_layers: 2,
            enc_units: 4,
            embed_dim: 3,
            pred_layers: 1,
            pred_units: 4,
            joint_dim: 5,
            vocab_size: 4,
        }
    }

    fn random_frames(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn param_count_matches_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [tiny(), JointConfig::default()] {
            let set = init_core(&cfg, &mut rng).unwrap();
            assert_eq!(set.count_where(|_| true), cfg.param_count());
            assert!(set.names().all(|n| is_core_param(n)));
        }
    }

    #[test]
    fn single_frame_gives_length_one_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny();
        let m = CoreModel::from_params(&cfg, &init_core(&cfg, &mut rng).unwrap()).unwrap();
        let out = m.encode_audio(&random_frames(1, 3, &mut rng)).unwrap();
        assert_eq!(out.depth(), 2);
        assert!(out.layers.iter().all(|l| l.shape() == [1, 4]));
        assert!(matches!(
            m.encode_audio(&Tensor::zeros(&[2, 5])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn encoder_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny();
        let m = CoreModel::from_params(&cfg, &init_core(&cfg, &mut rng).unwrap()).unwrap();
        let x = random_frames(7, 3, &mut rng);
        let full = m.encode_audio(&x).unwrap();
        for t in 1..7 {
            let prefix = Tensor::new(vec![t, 3], x.data()[..t * 3].to_vec()).unwrap();
            let part = m.encode_audio(&prefix).unwrap();
            for (a, b) in part.layers.iter().zip(&full.layers) {
                assert_eq!(a.data(), &b.data()[..t * 4]);
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cfg = tiny();
        let mut set = init_core(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (_, t) in set.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let m = CoreModel::from_params(&cfg, &set).unwrap();
        let out = m
            .encode_audio(&random_frames(4, 3, &mut ChaCha8Rng::seed_from_u64(4)))
            .unwrap();
        assert!(out
            .layers
            .iter()
            .all(|l| l.data().iter().all(|v| *v == 0.0)));
        assert_eq!(m.joint(&[0.0; 4], &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn tape_encoder_matches_tape_free_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny();
        let set = init_core(&cfg, &mut rng).unwrap();
        let m = CoreModel::from_params(&cfg, &set).unwrap();
        let x = random_frames(5, 3, &mut rng);
        let mut g = Graph::inference(&set);
        let layers = encoder_graph(&mut g, &cfg, &x).unwrap();
        let direct = m.encode_audio(&x).unwrap();
        for (v, t) in layers.iter().zip(&direct.layers) {
            assert_eq!(g.value(*v).data(), t.data());
        }
    }

    #[test]
    fn predict_step_states_are_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny();
        let m = CoreModel::from_params(&cfg, &init_core(&cfg, &mut rng).unwrap()).unwrap();
        let s0 = m.initial_state();
        let (o1, s1) = m.predict_step(BLANK, &s0).unwrap();
        let (o1b, _) = m.predict_step(BLANK, &s0).unwrap();
        assert_eq!(o1, o1b);
        let (a, sa) = m.predict_step(1, &s1).unwrap();
        let (b, _) = m.predict_step(2, &s1).unwrap();
        assert_ne!(a, b);
        // s1 is untouched by either extension.
        let (a2, sa2) = m.predict_step(1, &s1).unwrap();
        assert_eq!((a, sa), (a2, sa2));
        assert!(matches!(m.predict_step(4, &s0), Err(Error::Index { .. })));
    }

    #[test]
    fn prediction_graph_matches_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny();
        let set = init_core(&cfg, &mut rng).unwrap();
        let m = CoreModel::from_params(&cfg, &set).unwrap();
        let targets = [2, 1, 3];
        let mut g = Graph::inference(&set);
        let out = prediction_graph(&mut g, &cfg, &targets).unwrap();
        let mut s = m.initial_state();
        let mut prev = BLANK;
        for u in 0..=targets.len() {
            let (o, s2) = m.predict_step(prev, &s).unwrap();
            for (a, b) in o.iter().zip(g.value(out).row(u)) {
                assert!((a - b).abs() < 1e-14);
            }
            s = s2;
            if u < targets.len() {
                prev = targets[u];
            }
        }
    }

    #[test]
    fn joint_fusion_is_additive_before_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny();
        let m = CoreModel::from_params(&cfg, &init_core(&cfg, &mut rng).unwrap()).unwrap();
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = [0.0; 4];
        let ab = m.joint_pre_activation(&a, &b).unwrap();
        let a0 = m.joint_pre_activation(&a, &z).unwrap();
        let zb = m.joint_pre_activation(&z, &b).unwrap();
        let zz = m.joint_pre_activation(&z, &z).unwrap();
        for k in 0..ab.len() {
            assert!((a0[k] + zb[k] - zz[k] - ab[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny();
        let mut set = init_core(&cfg, &mut rng).unwrap();
        set.insert("h_enc", random_frames(1, 4, &mut rng));
        set.insert("h_pre", random_frames(1, 4, &mut rng));
        let names = vec!["h_enc".to_string(), "h_pre".to_string()];
        let r = finite_diff_check_only(&set, &names, 1e-6, |g| {
            let (e, p) = (g.p("h_enc")?, g.p("h_pre")?);
            let lp = joint_graph(g, e, p)?;
            let w = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 0.5, 2.0]).unwrap());
            let s = g.mul(lp, w)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn three_chained_prediction_steps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = tiny();
        let set = init_core(&cfg, &mut rng).unwrap();
        let names: Vec<String> = set
            .names()
            .filter(|n| n.starts_with("pred."))
            .cloned()
            .collect();
        let r = finite_diff_check_only(&set, &names, 1e-6, |g| {
            let out = prediction_graph(g, &cfg, &[3, 1])?;
            let s = g.tanh(out);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny();
        let set = init_core(&cfg, &mut rng).unwrap();
        let x = random_frames(3, 3, &mut rng);
        let r = finite_diff_check(&set, 1e-6, |g| loss_graph(g, &cfg, &x, &[1, 3])).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
