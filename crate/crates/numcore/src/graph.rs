//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are read from a borrowed [`ParamStore`] and never copied onto the tape;
//! their gradients come back as a [`Gradients`] map after [`Graph::backward`].
//! A graph is confined to one thread, but independent graphs over the same
//! store can run in parallel.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, NumError, Result};
use crate::params::{GradBuf, Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target-logit adjustment for angular-margin heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Margin {
    /// `cos θ - m`
    Additive(f64),
    /// `cos(θ + m)`, with a linear fallback once `θ + m` would pass π.
    Angular(f64),
}

/// Multi-similarity loss settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiSimilarity {
    pub alpha: f64,
    pub beta: f64,
    pub base: f64,
    pub epsilon: f64,
}

impl Default for MultiSimilarity {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            base: 0.5,
            epsilon: 0.1,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { input: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d { input: Var, weight: Var, bias: Var },
    MaxOverTime { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Dropout { input: Var, mask: Vec<f64> },
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Mean { input: Var, axis: usize },
    Sum(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Margin { input: Var, labels: Vec<usize>, target_grad: Vec<f64>, scale: f64 },
    MultiSimilarity { sim: Var, coeffs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'a> Graph<'a> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'a ParamStore) -> Self {
        Self::with_mode(params, false, 0)
    }

    pub fn with_mode(params: &'a ParamStore, train: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let x = av[i * k + kk];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[kk * n..(kk + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return invalid("transpose", format!("expected 2-D, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), t))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(name, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), t)
    }

    /// Adds a bias vector to every row of `x` (or to a vector `x`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.ndim() != 1 || tx.ndim() == 0 || tx.cols() != tb.len() {
            return shape_err("add_bias", tx.shape(), tb.shape());
        }
        let c = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Concatenates vectors (axis 0) or matrices along `axis` 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        let nd = first.len();
        if nd == 0 || nd > 2 || axis >= nd {
            return invalid("concat", format!("unsupported axis {axis} for shape {first:?}"));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            let ok = s.len() == nd && (0..nd).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return shape_err("concat", &first, s);
            }
        }
        let (shape, data) = if nd == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut lead = 0;
            for p in parts {
                let t = self.value(*p);
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = first.clone();
            shape[0] = lead;
            (shape, data)
        } else {
            let rows = first[0];
            let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            (vec![rows, total], data)
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 || start + len > ta.cols() {
            return invalid("slice_cols", format!("{start}+{len} out of {:?}", ta.shape()));
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(Op::SliceCols { input: a, start }, t))
    }

    /// Rows of `table` selected by `ids`, as an `[ids.len(), width]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.ndim() != 2 {
            return invalid("embedding", format!("table must be 2-D, got {:?}", tt.shape()));
        }
        let (vocab, width) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return invalid("embedding", format!("id {id} out of range for {vocab} rows"));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    /// Valid 1-D convolution over the time axis. `input` is `[n, d]`,
    /// `weight` is `[filters, width * d]` (one flattened window per filter),
    /// `bias` is `[filters]`; the output is `[n - width + 1, filters]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ti, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        if ti.ndim() != 2 || tw.ndim() != 2 || tb.ndim() != 1 || tw.rows() != tb.len() {
            return shape_err("conv1d", ti.shape(), tw.shape());
        }
        let (n, d) = (ti.rows(), ti.cols());
        let span = tw.cols();
        if d == 0 || span % d != 0 {
            return shape_err("conv1d", ti.shape(), tw.shape());
        }
        let width = span / d;
        if n < width {
            return invalid("conv1d", format!("sequence of {n} shorter than filter width {width}"));
        }
        let f = tw.rows();
        let steps = n - width + 1;
        let (x, w, b) = (ti.data(), tw.data(), tb.data());
        let mut out = vec![0.0; steps * f];
        for t in 0..steps {
            let window = &x[t * d..t * d + span];
            for k in 0..f {
                out[t * f + k] = b[k] + dot(window, &w[k * span..(k + 1) * span]);
            }
        }
        let t = Tensor::new(vec![steps, f], out)?;
        Ok(self.push(Op::Conv1d { input, weight, bias }, t))
    }

    /// Column-wise maximum of `[n, f]`; ties go to the earliest row.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 || ta.rows() == 0 {
            return invalid("max_over_time", format!("expected non-empty 2-D, got {:?}", ta.shape()));
        }
        let (n, f) = (ta.rows(), ta.cols());
        let mut best = ta.row(0).to_vec();
        let mut argmax = vec![0usize; f];
        for t in 1..n {
            for (k, v) in ta.row(t).iter().enumerate() {
                if *v > best[k] {
                    best[k] = *v;
                    argmax[k] = t;
                }
            }
        }
        let t = Tensor::vector(best);
        Ok(self.push(Op::MaxOverTime { input: a, argmax }, t))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(a), t)
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid("dropout", format!("p = {p} outside [0, 1)"));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { input: a, mask }, t))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let d = ta.cols();
        if ta.ndim() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return shape_err("layer_norm", ta.shape(), tg.shape());
        }
        let rows = ta.len() / d;
        let mut xhat = Vec::with_capacity(ta.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (k, x) in row.iter().enumerate() {
                let h = (x - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[k] + tb.data()[k]);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            out.extend(softmax_row(row));
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(Op::Softmax(a), t)
    }

    /// Mean of a matrix over rows (`axis = 0`) or columns (`axis = 1`), or of
    /// a vector (`axis = 0`, giving a scalar).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let t = match (ta.ndim(), axis) {
            (1, 0) => Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len().max(1) as f64),
            (2, 0) => {
                let (n, d) = (ta.rows(), ta.cols());
                if n == 0 {
                    return invalid("mean", "empty input");
                }
                let mut acc = vec![0.0; d];
                for r in 0..n {
                    for (o, x) in acc.iter_mut().zip(ta.row(r)) {
                        *o += x;
                    }
                }
                Tensor::vector(acc.into_iter().map(|v| v / n as f64).collect())
            }
            (2, 1) => {
                let d = ta.cols().max(1) as f64;
                Tensor::vector(
                    (0..ta.rows())
                        .map(|r| ta.row(r).iter().sum::<f64>() / d)
                        .collect(),
                )
            }
            _ => return invalid("mean", format!("axis {axis} for shape {:?}", ta.shape())),
        };
        Ok(self.push(Op::Mean { input: a, axis }, t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// `x / ||x||` over the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return invalid("l2_normalize", "zero-norm row");
            }
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::L2Normalize { input: a, norms }, t))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() != 2 || tl.rows() != labels.len() || labels.is_empty() {
            return invalid(
                "cross_entropy",
                format!("logits {:?} for {} labels", tl.shape(), labels.len()),
            );
        }
        let c = tl.cols();
        let n = labels.len();
        let mut probs = Vec::with_capacity(tl.len());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return invalid("cross_entropy", format!("label {y} out of range for {c} classes"));
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let t = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            t,
        ))
    }

    /// Scaled cosine logits with a margin applied to each row's target
    /// column. `cos` is `[n, classes]`.
    pub fn margin_logits(&mut self, cos: Var, labels: &[usize], margin: Margin, scale: f64) -> Result<Var> {
        let tc = self.value(cos);
        if tc.ndim() != 2 || tc.rows() != labels.len() {
            return invalid(
                "margin_logits",
                format!("cosines {:?} for {} labels", tc.shape(), labels.len()),
            );
        }
        let c = tc.cols();
        let mut out: Vec<f64> = tc.data().iter().map(|x| x * scale).collect();
        let mut target_grad = Vec::with_capacity(labels.len());
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return invalid("margin_logits", format!("label {y} out of range for {c} classes"));
            }
            let x = tc.data()[r * c + y];
            let (v, dv) = match margin {
                Margin::Additive(m) => (x - m, 1.0),
                Margin::Angular(m) => angular_margin(x, m),
            };
            out[r * c + y] = scale * v;
            target_grad.push(scale * dv);
        }
        let t = Tensor::new(tc.shape().to_vec(), out)?;
        Ok(self.push(
            Op::Margin {
                input: cos,
                labels: labels.to_vec(),
                target_grad,
                scale,
            },
            t,
        ))
    }

    /// Multi-similarity loss over a square similarity matrix. Pair mining
    /// depends on the forward values only; gradients flow through the kept
    /// pairs.
    pub fn multi_similarity(&mut self, sim: Var, labels: &[usize], cfg: MultiSimilarity) -> Result<Var> {
        let ts = self.value(sim);
        let n = labels.len();
        if ts.shape() != [n, n] {
            return invalid(
                "multi_similarity",
                format!("similarity {:?} for {n} labels", ts.shape()),
            );
        }
        let s = ts.data();
        let mut coeffs = vec![0.0; n * n];
        let mut total = 0.0;
        let mut anchors = 0usize;
        for a in 0..n {
            let row = &s[a * n..(a + 1) * n];
            let pos: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
            let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let min_pos = pos.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let kept_pos: Vec<usize> = pos.into_iter().filter(|&j| row[j] - cfg.epsilon < max_neg).collect();
            let kept_neg: Vec<usize> = neg.into_iter().filter(|&j| row[j] + cfg.epsilon > min_pos).collect();
            if kept_pos.is_empty() && kept_neg.is_empty() {
                continue;
            }
            anchors += 1;
            if !kept_pos.is_empty() {
                let terms: Vec<f64> = kept_pos
                    .iter()
                    .map(|&j| (-cfg.alpha * (row[j] - cfg.base)).exp())
                    .collect();
                let denom = 1.0 + terms.iter().sum::<f64>();
                total += denom.ln() / cfg.alpha;
                for (&j, e) in kept_pos.iter().zip(&terms) {
                    coeffs[a * n + j] -= e / denom;
                }
            }
            if !kept_neg.is_empty() {
                let terms: Vec<f64> = kept_neg
                    .iter()
                    .map(|&j| (cfg.beta * (row[j] - cfg.base)).exp())
                    .collect();
                let denom = 1.0 + terms.iter().sum::<f64>();
                total += denom.ln() / cfg.beta;
                for (&j, e) in kept_neg.iter().zip(&terms) {
                    coeffs[a * n + j] += e / denom;
                }
            }
        }
        let loss = if anchors > 0 {
            let k = anchors as f64;
            coeffs.iter_mut().for_each(|c| *c /= k);
            total / k
        } else {
            0.0
        };
        Ok(self.push(Op::MultiSimilarity { sim, coeffs }, Tensor::scalar(loss)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Backward> {
        if self.value(root).len() != 1 {
            return invalid(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            );
        }
        self.backward_with(root, &[1.0])
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: &[f64]) -> Result<Backward> {
        if seed.len() != self.value(root).len() {
            return shape_err("backward", self.shape(root), &[seed.len()]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());
        let mut params = Gradients::new();
        let mut sparse: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    params.insert(*id, GradBuf::Dense(g));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let (av, bv) = (ta.data(), tb.data());
                    {
                        let ga = slot(&mut grads, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                ga[r * k + kk] += dot(grow, &bv[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let x = av[r * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let s = self.shape(*a);
                    let (m, n) = (s[0], s[1]);
                    let ga = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(slot(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(slot(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    {
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * y;
                        }
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, gi), x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * x;
                    }
                }
                Op::Scale(a, c) => add_into(slot(&mut grads, *a, g.len()), &g, *c),
                Op::AddBias(x, b) => {
                    add_into(slot(&mut grads, *x, g.len()), &g, 1.0);
                    let c = self.value(*b).len();
                    let gb = slot(&mut grads, *b, c);
                    for row in g.chunks(c) {
                        add_into(gb, row, 1.0);
                    }
                }
                Op::Reshape(a) => add_into(slot(&mut grads, *a, g.len()), &g, 1.0),
                Op::Concat { parts, axis } => {
                    let nd = self.value(parts[0]).ndim();
                    if nd == 1 || *axis == 0 {
                        let mut off = 0;
                        for p in parts {
                            let len = self.value(*p).len();
                            add_into(slot(&mut grads, *p, len), &g[off..off + len], 1.0);
                            off += len;
                        }
                    } else {
                        let rows = self.value(parts[0]).rows();
                        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
                        let total: usize = widths.iter().sum();
                        let mut off = 0;
                        for (p, w) in parts.iter().zip(&widths) {
                            let gp = slot(&mut grads, *p, rows * w);
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + off..r * total + off + w],
                                    1.0,
                                );
                            }
                            off += w;
                        }
                    }
                }
                Op::SliceCols { input, start } => {
                    let ti = self.value(*input);
                    let (rows, cols) = (ti.rows(), ti.cols());
                    let w = g.len() / rows.max(1);
                    let gi = slot(&mut grads, *input, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gi[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                            1.0,
                        );
                    }
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let width = tt.cols();
                    if let Op::Param(pid) = self.nodes[table.0].op {
                        let rows = sparse.entry(pid).or_default();
                        for (r, &id) in ids.iter().enumerate() {
                            let row = rows.entry(id).or_insert_with(|| vec![0.0; width]);
                            add_into(row, &g[r * width..(r + 1) * width], 1.0);
                        }
                    } else {
                        let gt = slot(&mut grads, *table, tt.len());
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width], 1.0);
                        }
                    }
                }
                Op::Conv1d { input, weight, bias } => {
                    let (ti, tw) = (self.value(*input), self.value(*weight));
                    let d = ti.cols();
                    let (f, span) = (tw.rows(), tw.cols());
                    let steps = g.len() / f;
                    let (x, w) = (ti.data(), tw.data());
                    {
                        let gb = slot(&mut grads, *bias, f);
                        for t in 0..steps {
                            add_into(gb, &g[t * f..(t + 1) * f], 1.0);
                        }
                    }
                    {
                        let gw = slot(&mut grads, *weight, f * span);
                        for t in 0..steps {
                            let window = &x[t * d..t * d + span];
                            for k in 0..f {
                                let gk = g[t * f + k];
                                if gk != 0.0 {
                                    add_into(&mut gw[k * span..(k + 1) * span], window, gk);
                                }
                            }
                        }
                    }
                    let gx = slot(&mut grads, *input, ti.len());
                    for t in 0..steps {
                        for k in 0..f {
                            let gk = g[t * f + k];
                            if gk != 0.0 {
                                add_into(&mut gx[t * d..t * d + span], &w[k * span..(k + 1) * span], gk);
                            }
                        }
                    }
                }
                Op::MaxOverTime { input, argmax } => {
                    let ti = self.value(*input);
                    let f = ti.cols();
                    let gi = slot(&mut grads, *input, ti.len());
                    for (k, &t) in argmax.iter().enumerate() {
                        gi[t * f + k] += g[k];
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    let gi = slot(&mut grads, *input, g.len());
                    for ((o, gv), m) in gi.iter_mut().zip(&g).zip(mask) {
                        *o += gv * m;
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data().to_vec();
                    let d = gv.len();
                    {
                        let gb = slot(&mut grads, *bias, d);
                        for row in g.chunks(d) {
                            add_into(gb, row, 1.0);
                        }
                    }
                    {
                        let gg = slot(&mut grads, *gain, d);
                        for (row, h) in g.chunks(d).zip(xhat.chunks(d)) {
                            for k in 0..d {
                                gg[k] += row[k] * h[k];
                            }
                        }
                    }
                    let gx = slot(&mut grads, *input, g.len());
                    let nf = d as f64;
                    for (r, (row, h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = row.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = dot(&dh, h);
                        let inv = inv_std[r];
                        for k in 0..d {
                            gx[r * d + k] += inv / nf * (nf * dh[k] - sum_dh - h[k] * sum_dh_h);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = self.nodes[i].value.as_ref().expect("value").data();
                    let c = self.value(*a).cols();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for k in 0..c {
                            out[k] += yr[k] * (gr[k] - s);
                        }
                    }
                }
                Op::Mean { input, axis } => {
                    let ti = self.value(*input);
                    let len = ti.len();
                    match (ti.ndim(), axis) {
                        (1, _) => {
                            let n = len.max(1) as f64;
                            let gi = slot(&mut grads, *input, len);
                            gi.iter_mut().for_each(|o| *o += g[0] / n);
                        }
                        (_, 0) => {
                            let (n, d) = (ti.rows(), ti.cols());
                            let gi = slot(&mut grads, *input, len);
                            for r in 0..n {
                                add_into(&mut gi[r * d..(r + 1) * d], &g, 1.0 / n as f64);
                            }
                        }
                        _ => {
                            let d = ti.cols();
                            let gi = slot(&mut grads, *input, len);
                            for (r, gr) in g.iter().enumerate() {
                                gi[r * d..(r + 1) * d].iter_mut().for_each(|o| *o += gr / d as f64);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    slot(&mut grads, *a, len).iter_mut().for_each(|o| *o += g[0]);
                }
                Op::L2Normalize { input, norms } => {
                    let y = self.nodes[i].value.as_ref().expect("value").data();
                    let c = self.value(*input).cols();
                    let gi = slot(&mut grads, *input, g.len());
                    for (r, ((gr, yr), out)) in g.chunks(c).zip(y.chunks(c)).zip(gi.chunks_mut(c)).enumerate() {
                        let s = dot(gr, yr);
                        for k in 0..c {
                            out[k] += (gr[k] - yr[k] * s) / norms[r];
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.value(*logits).cols();
                    let n = labels.len() as f64;
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            gl[r * c + k] += g[0] * (probs[r * c + k] - onehot) / n;
                        }
                    }
                }
                Op::Margin {
                    input,
                    labels,
                    target_grad,
                    scale,
                } => {
                    let c = self.value(*input).cols();
                    let gi = slot(&mut grads, *input, g.len());
                    for (r, &y) in labels.iter().enumerate() {
                        for k in 0..c {
                            let d = if k == y { target_grad[r] } else { *scale };
                            gi[r * c + k] += g[r * c + k] * d;
                        }
                    }
                }
                Op::MultiSimilarity { sim, coeffs } => {
                    add_into(slot(&mut grads, *sim, coeffs.len()), coeffs, g[0]);
                }
            }
        }

        for (pid, rows) in sparse {
            let width = self.params.get(pid).cols();
            params.insert(pid, GradBuf::Rows { width, rows });
        }
        for (_, buf) in params.iter() {
            if !buf.is_finite() {
                return Err(NumError::NonFinite("gradient".into()));
            }
        }
        Ok(Backward { grads, params })
    }
}

/// Result of a reverse pass.
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Backward {
    /// Gradient with respect to an input leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row.iter().map(move |x| (x - max).exp() / denom)
}

/// `cos(acos(x) + m)` and its derivative. Past `θ + m = π` the target
/// logit falls back to `x - m·sin(m)`, which keeps it monotone in `x`.
fn angular_margin(x: f64, m: f64) -> (f64, f64) {
    const CLAMP: f64 = 1.0 - 1e-7;
    let clamped = x.abs() > CLAMP;
    let c = x.clamp(-CLAMP, CLAMP);
    let threshold = (std::f64::consts::PI - m).cos();
    if c > threshold {
        let s = (1.0 - c * c).sqrt();
        let value = c * m.cos() - s * m.sin();
        let deriv = if clamped { 0.0 } else { m.cos() + c * m.sin() / s };
        (value, deriv)
    } else {
        (x - m * m.sin(), 1.0)
    }
}
