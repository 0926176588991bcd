//! Reverse-mode differentiation over a recorded list of tensor ops.
//!
//! Each op stores its output value plus whatever it needs for its vector-
//! Jacobian product. Ops are coarse (a whole LSTM sequence, the whole joint
//! lattice, the whole transducer loss) so that per-utterance graphs stay small.

use std::collections::BTreeMap;

use super::kernels::{self, gemm, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Dense { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Lstm(Box<LstmRecord>),
    WeightedSum { w: Var, xs: Vec<Var> },
    JointHidden { enc: Var, pred: Var },
    Transducer { logp: Var, dlogp: Vec<f64> },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct LstmRecord {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    reverse: bool,
    /// Activated gates i, f, g, o per step, L×4H.
    gates: Vec<f64>,
    /// Cell states, L×H.
    cells: Vec<f64>,
    /// tanh of the cell states, L×H.
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Handles to the three tensors of one LSTM layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = last;
    s
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(name.to_string()), true)
    }

    /// `x · wᵀ + b` over the last axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 {
            return Err(Error::dim("dense", "weight rank", 2, wv.rank()));
        }
        let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != d_in {
            return Err(Error::dim(
                "dense",
                "input features (D_in)",
                d_in,
                xv.cols(),
            ));
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != d_out {
                return Err(Error::dim(
                    "dense",
                    "bias length (D_out)",
                    d_out,
                    bv.numel(),
                ));
            }
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(d_out) {
                r.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            d_in,
            d_out,
            xv.data(),
            false,
            wv.data(),
            true,
            1.0,
            &mut out,
        );
        let shape = shape_with_last(xv.shape(), d_out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Dense { x, w, b }, ng))
    }

    /// Matrix product `a · b` of two rank ≤ 2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.rank() != 2 || bv.shape()[0] != k {
            return Err(Error::dim("matmul", "inner dimension", k, bv.shape()[0]));
        }
        let m = bv.shape()[1];
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, bv.data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` where both operands carry features on the last axis.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.cols() != k {
            return Err(Error::dim("matmul_bt", "inner dimension", k, bv.cols()));
        }
        let m = bv.rows();
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, bv.data(), true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            let axis = sa.iter().zip(sb).position(|(x, y)| x != y).unwrap_or(0);
            return Err(Error::dim(
                op,
                if axis + 1 == sa.len() {
                    "last axis"
                } else {
                    "leading axis"
                },
                sa.get(axis).copied().unwrap_or(0),
                sb.get(axis).copied().unwrap_or(0),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Softmax over the last axis of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        t.data_mut()
            .chunks_exact_mut(c)
            .for_each(kernels::softmax_inplace);
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        t.data_mut()
            .chunks_exact_mut(c)
            .for_each(kernels::log_softmax_inplace);
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmaxRows(a), ng)
    }

    /// Concatenates along the last axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::pre("concat_cols", "no inputs"));
        }
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(Error::dim("concat_cols", "rows", n, v.rows()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if self.value(parts[0]).rank() == 1 {
            vec![total]
        } else {
            vec![n, total]
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks rows of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::pre("concat_rows", "no inputs"));
        }
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::dim("concat_rows", "last axis", c, v.cols()));
            }
            out.extend_from_slice(v.data());
        }
        let n = out.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(Error::dim(
                "slice_cols",
                "last axis",
                xv.cols(),
                start + len,
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let shape = shape_with_last(xv.shape(), len);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start }, ng))
    }

    /// Row gather; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(Error::pre("gather_rows", "empty index list"));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    size: xv.rows(),
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let g = self.gather_rows(x, &[i])?;
        let c = self.value(g).cols();
        self.reshape(g, vec![c])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Runs one LSTM layer over the rows of `x` from a zero state and returns
    /// all hidden states (L×H) in input order. With `reverse`, steps run from
    /// the last row to the first.
    pub fn lstm(&mut self, x: Var, p: LstmVars, reverse: bool) -> Result<Var> {
        let (xv, wih, whh, bv) = (
            self.value(x),
            self.value(p.w_ih),
            self.value(p.w_hh),
            self.value(p.b),
        );
        let h = whh.cols();
        check_lstm_shapes(xv.cols(), h, wih, whh, bv)?;
        let l = xv.rows();
        let d_in = xv.cols();
        let g4 = 4 * h;
        let mut pre = vec![0.0; l * g4];
        for r in pre.chunks_exact_mut(g4) {
            r.copy_from_slice(bv.data());
        }
        gemm(
            l,
            d_in,
            g4,
            xv.data(),
            false,
            wih.data(),
            true,
            1.0,
            &mut pre,
        );

        let mut gates = vec![0.0; l * g4];
        let mut cells = vec![0.0; l * h];
        let mut tanh_c = vec![0.0; l * h];
        let mut hs = vec![0.0; l * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let a = &mut pre[t * g4..(t + 1) * g4];
            kernels::matvec_acc(whh.data(), &h_prev, a);
            let gt = &mut gates[t * g4..(t + 1) * g4];
            cell_activate(a, gt, h);
            for j in 0..h {
                let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let c = f * c_prev[j] + i * g;
                let tc = c.tanh();
                cells[t * h + j] = c;
                tanh_c[t * h + j] = tc;
                hs[t * h + j] = o * tc;
            }
            h_prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        }
        let ng = self.ng(x) || self.ng(p.w_ih) || self.ng(p.w_hh) || self.ng(p.b);
        let rec = LstmRecord {
            x,
            w_ih: p.w_ih,
            w_hh: p.w_hh,
            b: p.b,
            reverse,
            gates,
            cells,
            tanh_c,
        };
        Ok(self.push(Tensor::new(vec![l, h], hs)?, Op::Lstm(Box::new(rec)), ng))
    }

    /// Row-wise convex combination: `out[t] = Σ_k w[t,k] · xs[k][t]`.
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let wv = self.value(w);
        if wv.cols() != xs.len() {
            return Err(Error::dim(
                "weighted_sum",
                "weight columns",
                xs.len(),
                wv.cols(),
            ));
        }
        let n = wv.rows();
        let shape = self.value(xs[0]).shape().to_vec();
        let c = self.value(xs[0]).cols();
        for &x in xs {
            let s = self.value(x).shape();
            if s != shape.as_slice() {
                return Err(Error::dim(
                    "weighted_sum",
                    "input rows",
                    n,
                    self.value(x).rows(),
                ));
            }
        }
        if self.value(xs[0]).rows() != n {
            return Err(Error::dim(
                "weighted_sum",
                "input rows",
                n,
                self.value(xs[0]).rows(),
            ));
        }
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            let o = &mut out[t * c..(t + 1) * c];
            for (k, &x) in xs.iter().enumerate() {
                let wk = self.value(w).row(t)[k];
                for (oj, xj) in o.iter_mut().zip(self.value(x).row(t)) {
                    *oj += wk * xj;
                }
            }
        }
        let ng = self.ng(w) || xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum { w, xs: xs.to_vec() },
            ng,
        ))
    }

    /// Additive fusion over the transducer lattice: row `t·U1 + u` holds
    /// `tanh(enc[t] + pred[u])`.
    pub fn joint_hidden(&mut self, enc: Var, pred: Var) -> Result<Var> {
        let (ev, pv) = (self.value(enc), self.value(pred));
        let j = ev.cols();
        if pv.cols() != j {
            return Err(Error::dim("joint_hidden", "joint width", j, pv.cols()));
        }
        let (t_len, u1) = (ev.rows(), pv.rows());
        let mut out = vec![0.0; t_len * u1 * j];
        for t in 0..t_len {
            let e = ev.row(t);
            for u in 0..u1 {
                let p = pv.row(u);
                let o = &mut out[(t * u1 + u) * j..(t * u1 + u + 1) * j];
                for k in 0..j {
                    o[k] = (e[k] + p[k]).tanh();
                }
            }
        }
        let ng = self.ng(enc) || self.ng(pred);
        Ok(self.push(
            Tensor::new(vec![t_len * u1, j], out)?,
            Op::JointHidden { enc, pred },
            ng,
        ))
    }

    /// Negative log transducer likelihood of `targets` given log-probs laid out
    /// as rows `t·(U+1) + u` over the vocabulary.
    pub fn transducer_loss(
        &mut self,
        logp: Var,
        frames: usize,
        targets: &[usize],
        blank: usize,
    ) -> Result<Var> {
        let lv = self.value(logp);
        let (loss, dlogp) = crate::rnnt::loss::transducer_forward_backward(
            lv.data(),
            frames,
            lv.cols(),
            targets,
            blank,
        )?;
        let ng = self.ng(logp);
        Ok(self.push(Tensor::scalar(loss), Op::Transducer { logp, dlogp }, ng))
    }

    /// Computes ∂loss/∂node for every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::pre(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        macro_rules! acc {
            ($var:expr, $f:expr) => {{
                let v: Var = $var;
                if self.ng(v) {
                    let n = self.value(v).numel();
                    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot);
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                acc!(*x, |s: &mut Vec<f64>| gemm(
                    n,
                    d_out,
                    d_in,
                    g,
                    false,
                    wv.data(),
                    false,
                    1.0,
                    s
                ));
                acc!(*w, |s: &mut Vec<f64>| gemm(
                    d_out,
                    n,
                    d_in,
                    g,
                    true,
                    xv.data(),
                    false,
                    1.0,
                    s
                ));
                if let Some(b) = b {
                    acc!(*b, |s: &mut Vec<f64>| {
                        for r in g.chunks_exact(d_out) {
                            s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                acc!(*a, |s: &mut Vec<f64>| gemm(
                    n,
                    m,
                    k,
                    g,
                    false,
                    bv.data(),
                    true,
                    1.0,
                    s
                ));
                acc!(*b, |s: &mut Vec<f64>| gemm(
                    k,
                    n,
                    m,
                    av.data(),
                    true,
                    g,
                    false,
                    1.0,
                    s
                ));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                acc!(*a, |s: &mut Vec<f64>| gemm(
                    n,
                    m,
                    k,
                    g,
                    false,
                    bv.data(),
                    false,
                    1.0,
                    s
                ));
                acc!(*b, |s: &mut Vec<f64>| gemm(
                    m,
                    n,
                    k,
                    g,
                    true,
                    av.data(),
                    false,
                    1.0,
                    s
                ));
            }
            Op::Add(a, b) => {
                acc!(*a, |s: &mut Vec<f64>| add_into(s, g));
                acc!(*b, |s: &mut Vec<f64>| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |s: &mut Vec<f64>| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc!(*b, |s: &mut Vec<f64>| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, f) => acc!(*a, |s: &mut Vec<f64>| {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)
            }),
            Op::Tanh(a) => acc!(*a, |s: &mut Vec<f64>| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Sigmoid(a) => acc!(*a, |s: &mut Vec<f64>| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                acc!(*a, |s: &mut Vec<f64>| {
                    for ((sr, yr), gr) in s
                        .chunks_exact_mut(c)
                        .zip(out.chunks_exact(c))
                        .zip(g.chunks_exact(c))
                    {
                        let dotp = kernels::dot(yr, gr);
                        for k in 0..c {
                            sr[k] += yr[k] * (gr[k] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                acc!(*a, |s: &mut Vec<f64>| {
                    for ((sr, yr), gr) in s
                        .chunks_exact_mut(c)
                        .zip(out.chunks_exact(c))
                        .zip(g.chunks_exact(c))
                    {
                        let gs: f64 = gr.iter().sum();
                        for k in 0..c {
                            sr[k] += gr[k] - yr[k].exp() * gs;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc!(p, |s: &mut Vec<f64>| {
                        for r in 0..n {
                            let src = &g[r * total + off..r * total + off + w];
                            add_into(&mut s[r * w..(r + 1) * w], src);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc!(p, |s: &mut Vec<f64>| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc!(*x, |s: &mut Vec<f64>| {
                    for (r, gr) in g.chunks_exact(w).enumerate() {
                        add_into(&mut s[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                acc!(*x, |s: &mut Vec<f64>| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => acc!(*x, |s: &mut Vec<f64>| add_into(s, g)),
            Op::Sum(x) => acc!(*x, |s: &mut Vec<f64>| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Lstm(rec) => self.backprop_lstm(rec, out, g, grads),
            Op::WeightedSum { w, xs } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let wv = self.value(*w);
                let kk = xs.len();
                acc!(*w, |s: &mut Vec<f64>| {
                    for t in 0..n {
                        for (k, &x) in xs.iter().enumerate() {
                            s[t * kk + k] +=
                                kernels::dot(&g[t * c..(t + 1) * c], self.value(x).row(t));
                        }
                    }
                });
                for (k, &x) in xs.iter().enumerate() {
                    acc!(x, |s: &mut Vec<f64>| {
                        for t in 0..n {
                            let wk = wv.row(t)[k];
                            for j in 0..c {
                                s[t * c + j] += wk * g[t * c + j];
                            }
                        }
                    });
                }
            }
            Op::JointHidden { enc, pred } => {
                let j = node.value.cols();
                let t_len = self.value(*enc).rows();
                let u1 = self.value(*pred).rows();
                let dz: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                acc!(*enc, |s: &mut Vec<f64>| {
                    for t in 0..t_len {
                        for u in 0..u1 {
                            let r = &dz[(t * u1 + u) * j..(t * u1 + u + 1) * j];
                            add_into(&mut s[t * j..(t + 1) * j], r);
                        }
                    }
                });
                acc!(*pred, |s: &mut Vec<f64>| {
                    for t in 0..t_len {
                        for u in 0..u1 {
                            let r = &dz[(t * u1 + u) * j..(t * u1 + u + 1) * j];
                            add_into(&mut s[u * j..(u + 1) * j], r);
                        }
                    }
                });
            }
            Op::Transducer { logp, dlogp } => acc!(*logp, |s: &mut Vec<f64>| {
                s.iter_mut().zip(dlogp).for_each(|(a, d)| *a += g[0] * d)
            }),
        }
    }

    fn backprop_lstm(
        &self,
        rec: &LstmRecord,
        hs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = self.value(rec.x);
        let whh = self.value(rec.w_hh);
        let wih = self.value(rec.w_ih);
        let h = whh.cols();
        let g4 = 4 * h;
        let l = xv.rows();
        let d_in = xv.cols();
        // Pre-activation gradients per step, and the previous hidden state per step.
        let mut da = vec![0.0; l * g4];
        let mut h_prev_m = vec![0.0; l * h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for step in (0..l).rev() {
            let t = if rec.reverse { l - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else {
                Some(if rec.reverse { t + 1 } else { t - 1 })
            };
            if let Some(p) = prev {
                h_prev_m[t * h..(t + 1) * h].copy_from_slice(&hs[p * h..(p + 1) * h]);
            }
            let gt = &rec.gates[t * g4..(t + 1) * g4];
            let tc = &rec.tanh_c[t * h..(t + 1) * h];
            let dat = &mut da[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (i, f, gg, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let dh = g[t * h + j] + dh_next[j];
                let d_o = dh * tc[j];
                let dc = dh * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                let c_prev = prev.map_or(0.0, |p| rec.cells[p * h + j]);
                dat[j] = dc * gg * i * (1.0 - i);
                dat[h + j] = dc * c_prev * f * (1.0 - f);
                dat[2 * h + j] = dc * i * (1.0 - gg * gg);
                dat[3 * h + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            kernels::matvec_t_acc(whh.data(), dat, &mut dh_next);
        }
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Vec<f64>)| {
            if self.ng(v) {
                let n = self.value(v).numel();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        acc(rec.x, &mut |s| {
            gemm(l, g4, d_in, &da, false, wih.data(), false, 1.0, s)
        });
        acc(rec.w_ih, &mut |s| {
            gemm(g4, l, d_in, &da, true, xv.data(), false, 1.0, s)
        });
        acc(rec.w_hh, &mut |s| {
            gemm(g4, l, h, &da, true, &h_prev_m, false, 1.0, s)
        });
        acc(rec.b, &mut |s| {
            for r in da.chunks_exact(g4) {
                add_into(s, r);
            }
        });
    }

    /// Names of trainable leaves on this tape.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn check_lstm_shapes(
    d_in: usize,
    h: usize,
    wih: &Tensor,
    whh: &Tensor,
    b: &Tensor,
) -> Result<()> {
    if whh.rank() != 2 || whh.shape()[0] != 4 * h {
        return Err(Error::dim(
            "lstm",
            "recurrent weight rows (4H)",
            4 * h,
            whh.shape()[0],
        ));
    }
    if wih.rank() != 2 || wih.shape()[0] != 4 * h {
        return Err(Error::dim(
            "lstm",
            "input weight rows (4H)",
            4 * h,
            wih.shape()[0],
        ));
    }
    if wih.shape()[1] != d_in {
        return Err(Error::dim(
            "lstm",
            "input features (D_in)",
            wih.shape()[1],
            d_in,
        ));
    }
    if b.numel() != 4 * h {
        return Err(Error::dim("lstm", "bias length (4H)", 4 * h, b.numel()));
    }
    Ok(())
}

/// Applies gate nonlinearities: sigmoid for i, f, o and tanh for g.
#[inline]
pub(crate) fn cell_activate(pre: &[f64], out: &mut [f64], h: usize) {
    for j in 0..h {
        out[j] = sigmoid(pre[j]);
        out[h + j] = sigmoid(pre[h + j]);
        out[2 * h + j] = pre[2 * h + j].tanh();
        out[3 * h + j] = sigmoid(pre[3 * h + j]);
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per named parameter leaf, summed over repeated bindings of
    /// the same name.
    pub fn params(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = self.grads[i]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                match out.get_mut(name) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}
