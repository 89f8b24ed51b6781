//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every minibatch. Parameters enter the tape as
//! leaves copied from a [`ParameterStore`]; [`Graph::backward`] writes their
//! gradients back into that store. Nodes that cannot reach a trainable
//! parameter are marked `requires_grad = false` and skipped on the way back,
//! so frozen parameters never receive a gradient.

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::nn::kernels::{self, gemm, sigmoid, Gates, View};
use crate::nn::{ParamId, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Stack(Vec<Var>),
    SelectSteps(Var, Vec<usize>),
    Blend(Var, Var, Vec<f64>),
    Attention {
        query: Var,
        memory: Var,
        lengths: Vec<usize>,
        weights: Vec<f64>,
    },
    LstmGates(Var),
    LstmState {
        gates: Var,
        c_prev: Var,
    },
    LstmOutput {
        gates: Var,
        c: Var,
    },
    SoftmaxRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
        mean: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Token id excluded from the cross-entropy mean.
pub const PAD_ID: usize = 0;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can be reused for a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        kernels::check_matrix(&self.nodes[v.0].value, what)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies a parameter onto the tape. Gradients flow back only if it is trainable.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            View::new(self.value(a).data(), m, k),
            View::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.matrix(x, "affine input")?;
        let (i2, o) = self.matrix(w, "affine weight")?;
        if i != i2 || self.value(b).len() != o {
            return Err(Error::Shape(format!(
                "affine x {n}x{i}, W {i2}x{o}, b {:?}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(
            View::new(self.value(x).data(), n, i),
            View::new(self.value(w).data(), i, o),
            1.0,
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Affine(x, w, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&self, v: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(v);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape(), data).expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a fixed tensor (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape("mask length".into()));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(t.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MulConst(a, mask), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x * k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.matrix(parts[0], "concat part")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat part")?;
            if r != n {
                return Err(Error::Shape(format!("concat rows {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.matrix(parts[0], "concat part")?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.matrix(p, "concat part")?;
            if c2 != c {
                return Err(Error::Shape(format!("concat cols {c2} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.matrix(a, "slice input")?;
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice {start}..{end} of {c} columns")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for row in 0..n {
            out.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[n, end - start], out)?,
            Op::SliceCols(a, start, end),
            rg,
        ))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.matrix(table, "gather table")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Invalid(format!("row {id} out of range {rows}")));
            }
            out.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), c], out)?,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Stacks equally shaped `[n x d]` steps into `[len x n x d]`.
    pub fn stack(&mut self, steps: &[Var]) -> Result<Var> {
        let (n, d) = self.matrix(steps[0], "stack step")?;
        let mut out = Vec::with_capacity(steps.len() * n * d);
        for &s in steps {
            if self.shape(s) != [n, d] {
                return Err(Error::Shape("stack steps differ in shape".into()));
            }
            out.extend_from_slice(self.value(s).data());
        }
        let rg = self.rg(steps);
        Ok(self.push(
            Tensor::new(&[steps.len(), n, d], out)?,
            Op::Stack(steps.to_vec()),
            rg,
        ))
    }

    /// From `[len x n x d]`, takes step `steps[b]` for every batch row `b`.
    pub fn select_steps(&mut self, memory: Var, steps: &[usize]) -> Result<Var> {
        let shape = self.shape(memory).to_vec();
        if shape.len() != 3 || shape[1] != steps.len() {
            return Err(Error::Shape(format!("select_steps on {shape:?}")));
        }
        let (len, n, d) = (shape[0], shape[1], shape[2]);
        let src = self.value(memory).data();
        let mut out = Vec::with_capacity(n * d);
        for (b, &t) in steps.iter().enumerate() {
            if t >= len {
                return Err(Error::Invalid(format!("step {t} out of range {len}")));
            }
            out.extend_from_slice(&src[(t * n + b) * d..(t * n + b + 1) * d]);
        }
        let rg = self.rg(&[memory]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::SelectSteps(memory, steps.to_vec()),
            rg,
        ))
    }

    /// Per-row choice: row `r` is `a[r]` when `mask[r] == 1`, `b[r]` when 0.
    pub fn blend(&mut self, a: Var, b: Var, row_mask: Vec<f64>) -> Result<Var> {
        self.same_shape(a, b, "blend")?;
        let (n, d) = self.matrix(a, "blend input")?;
        if row_mask.len() != n {
            return Err(Error::Shape("blend mask length".into()));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * d);
        for (r, &m) in row_mask.iter().enumerate() {
            for j in 0..d {
                out.push(m * ta[r * d + j] + (1.0 - m) * tb[r * d + j]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::Blend(a, b, row_mask), rg))
    }

    /// Dot-product attention of `query [n x d]` over `memory [len x n x d]`,
    /// restricted to the first `lengths[b]` steps of each row.
    pub fn attention(&mut self, query: Var, memory: Var, lengths: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(query, "attention query")?;
        let ms = self.shape(memory).to_vec();
        if ms.len() != 3 || ms[1] != n || ms[2] != d || lengths.len() != n {
            return Err(Error::Shape(format!(
                "attention query {n}x{d}, memory {ms:?}, {} lengths",
                lengths.len()
            )));
        }
        let len = ms[0];
        if lengths.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::Invalid("attention length out of range".into()));
        }
        let mut weights = vec![0.0; n * len];
        let mut ctx = vec![0.0; n * d];
        let (q, mem) = (self.value(query).data(), self.value(memory).data());
        for b in 0..n {
            kernels::attend_row(
                &q[b * d..(b + 1) * d],
                mem,
                n,
                b,
                lengths[b],
                &mut weights[b * len..(b + 1) * len],
                &mut ctx[b * d..(b + 1) * d],
            );
        }
        let rg = self.rg(&[query, memory]);
        Ok(self.push(
            Tensor::new(&[n, d], ctx)?,
            Op::Attention {
                query,
                memory,
                lengths: lengths.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, `[n x len]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Gate nonlinearities over a `[n x 4d]` pre-activation block: sigmoid
    /// for the input, forget and output gates, tanh for the candidate.
    pub fn lstm_gates(&mut self, pre: Var) -> Result<Var> {
        let (n, four_d) = self.matrix(pre, "lstm pre-activations")?;
        if four_d % 4 != 0 {
            return Err(Error::Shape(format!("lstm gates {n}x{four_d}")));
        }
        let act = kernels::activate_gates(self.value(pre).data(), four_d / 4);
        let rg = self.rg(&[pre]);
        Ok(self.push(Tensor::new(&[n, four_d], act)?, Op::LstmGates(pre), rg))
    }

    /// New cell state `f*c + i*g` from activated `[n x 4d]` gates.
    pub fn lstm_state(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (n, d) = self.matrix(c_prev, "lstm cell state")?;
        if self.shape(gates) != [n, 4 * d] {
            return Err(Error::Shape(format!(
                "lstm gates {:?} for state {n}x{d}",
                self.shape(gates)
            )));
        }
        let g = Gates {
            act: self.value(gates).data(),
            d,
        };
        let c = self.value(c_prev).data();
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                let (i, f, cand, _) = g.at(r, j);
                out.push(f * c[r * d + j] + i * cand);
            }
        }
        let rg = self.rg(&[gates, c_prev]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::LstmState { gates, c_prev },
            rg,
        ))
    }

    /// Hidden output `o * tanh(c)`.
    pub fn lstm_output(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (n, d) = self.matrix(c, "lstm cell state")?;
        if self.shape(gates) != [n, 4 * d] {
            return Err(Error::Shape("lstm gates".into()));
        }
        let g = Gates {
            act: self.value(gates).data(),
            d,
        };
        let cv = self.value(c).data();
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                let (_, _, _, o) = g.at(r, j);
                out.push(o * cv[r * d + j].tanh());
            }
        }
        let rg = self.rg(&[gates, c]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::LstmOutput { gates, c }, rg))
    }

    /// One LSTM step: gates from `[x, h] * w + b`, returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<(Var, Var)> {
        let xh = self.concat_cols(&[x, h])?;
        let pre = self.affine(xh, w, b)?;
        let gates = self.lstm_gates(pre)?;
        let c_new = self.lstm_state(gates, c)?;
        let h_new = self.lstm_output(gates, c_new)?;
        Ok((h_new, c_new))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "softmax input")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            kernels::softmax_into(&src[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[n, k], out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Label-smoothed cross-entropy over rows of `logits`.
    ///
    /// The target distribution puts `1 - smoothing` on the target and
    /// `smoothing / (V - 1)` on every other class. Rows whose target is
    /// [`PAD_ID`] are ignored. With `mean` the loss is averaged over the
    /// remaining rows, otherwise summed.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        mean: bool,
    ) -> Result<Var> {
        let (n, v) = self.matrix(logits, "logits")?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Invalid(format!("label smoothing {smoothing}")));
        }
        if v < 2 && smoothing > 0.0 {
            return Err(Error::Invalid("label smoothing needs at least 2 classes".into()));
        }
        let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == PAD_ID {
                continue;
            }
            if t >= v {
                return Err(Error::Invalid(format!("target {t} out of range {v}")));
            }
            let row = &src[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            kernels::softmax_into(row, &mut probs[r * v..(r + 1) * v]);
            let mut loss = 0.0;
            for (k, &x) in row.iter().enumerate() {
                let q = if k == t { 1.0 - smoothing } else { off };
                if q > 0.0 {
                    loss -= q * (x - lse);
                }
            }
            total += loss;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Invalid("no non-padding targets".into()));
        }
        let value = if mean { total / count as f64 } else { total };
        if !value.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
                mean,
            },
            rg,
        ))
    }

    /// Number of non-padding rows counted by a cross-entropy node.
    pub fn token_count(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { count, .. } => *count,
            _ => 0,
        }
    }

    /// Back-propagates from a scalar node and accumulates gradients into `store`.
    ///
    /// Trainable parameters receive `d loss / d theta`; non-trainable ones
    /// are left untouched (zero after [`ParameterStore::zero_grad`]).
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        if !self.nodes[loss.0].value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                let p = store.get_mut(id);
                if p.trainable {
                    for (acc, d) in p.grad.data_mut().iter_mut().zip(&g) {
                        *acc += d;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Gradient buffer for an input, allocated on first use; None if the input needs none.
        fn slot<'g>(
            nodes: &[Node],
            grads: &'g mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) | Op::Affine(a, b, _) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(View::new(g, m, n), View::t(val(*b), k, n), 1.0, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(View::t(val(*a), m, k), View::new(g, m, n), 1.0, gb);
                }
                if let Op::Affine(_, _, bias) = &nodes[i].op {
                    if let Some(gbias) = slot(nodes, grads, *bias) {
                        for r in 0..m {
                            for (acc, d) in gbias.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *acc += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(acc, d)| *acc += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((acc, d), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *acc += d * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((acc, d), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *acc += d * x;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((acc, d), m) in ga.iter_mut().zip(g).zip(mask) {
                        *acc += d * m;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(acc, d)| *acc += d * k);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((acc, d), s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *acc += d * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((acc, d), t) in ga.iter_mut().zip(g).zip(out.data()) {
                        *acc += d * (1.0 - t * t);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for r in 0..out.rows() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (acc, d) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for (acc, d) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *acc += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = nodes[a.0].value.cols();
                let w = end - start;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for r in 0..out.rows() {
                        for j in 0..w {
                            ga[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let c = out.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, d) in gt[id * c..(id + 1) * c].iter_mut().zip(&g[r * c..]) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Stack(steps) => {
                let step_len = nodes[steps[0].0].value.len();
                for (t, s) in steps.iter().enumerate() {
                    if let Some(gs) = slot(nodes, grads, *s) {
                        let src = &g[t * step_len..(t + 1) * step_len];
                        gs.iter_mut().zip(src).for_each(|(acc, d)| *acc += d);
                    }
                }
            }
            Op::SelectSteps(memory, steps) => {
                let n = steps.len();
                let d = out.cols();
                if let Some(gm) = slot(nodes, grads, *memory) {
                    for (b, &t) in steps.iter().enumerate() {
                        for j in 0..d {
                            gm[(t * n + b) * d + j] += g[b * d + j];
                        }
                    }
                }
            }
            Op::Blend(a, b, mask) => {
                let d = out.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, &m) in mask.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += m * g[r * d + j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (r, &m) in mask.iter().enumerate() {
                        for j in 0..d {
                            gb[r * d + j] += (1.0 - m) * g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                query,
                memory,
                lengths,
                weights,
            } => {
                let (n, d) = (out.rows(), out.cols());
                let len = nodes[memory.0].value.rows();
                let (q, mem) = (val(*query), val(*memory));
                let mut dscore = vec![0.0; len];
                let mut gq_local = vec![0.0; n * d];
                let mut gm_local = vec![0.0; mem.len()];
                for b in 0..n {
                    let l = lengths[b];
                    let w = &weights[b * len..b * len + l];
                    let gc = &g[b * d..(b + 1) * d];
                    let mut dot = 0.0;
                    for t in 0..l {
                        let m = &mem[(t * n + b) * d..(t * n + b + 1) * d];
                        let dw: f64 = gc.iter().zip(m).map(|(x, y)| x * y).sum();
                        dscore[t] = dw;
                        dot += w[t] * dw;
                    }
                    for t in 0..l {
                        let ds = w[t] * (dscore[t] - dot);
                        let base = (t * n + b) * d;
                        for j in 0..d {
                            gq_local[b * d + j] += ds * mem[base + j];
                            gm_local[base + j] += w[t] * gc[j] + ds * q[b * d + j];
                        }
                    }
                }
                if let Some(gq) = slot(nodes, grads, *query) {
                    gq.iter_mut().zip(&gq_local).for_each(|(acc, d)| *acc += d);
                }
                if let Some(gm) = slot(nodes, grads, *memory) {
                    gm.iter_mut().zip(&gm_local).for_each(|(acc, d)| *acc += d);
                }
            }
            Op::LstmGates(pre) => {
                let d = out.cols() / 4;
                if let Some(gp) = slot(nodes, grads, *pre) {
                    for (k, ((acc, dy), y)) in gp.iter_mut().zip(g).zip(out.data()).enumerate() {
                        *acc += if (k / d) % 4 == 2 {
                            dy * (1.0 - y * y)
                        } else {
                            dy * y * (1.0 - y)
                        };
                    }
                }
            }
            Op::LstmState { gates, c_prev } => {
                let (n, d) = (out.rows(), out.cols());
                let gt = Gates {
                    act: val(*gates),
                    d,
                };
                let c = val(*c_prev);
                if let Some(gg) = slot(nodes, grads, *gates) {
                    for r in 0..n {
                        let base = r * 4 * d;
                        for j in 0..d {
                            let (i_, _, cand, _) = gt.at(r, j);
                            let dc = g[r * d + j];
                            gg[base + j] += dc * cand;
                            gg[base + d + j] += dc * c[r * d + j];
                            gg[base + 2 * d + j] += dc * i_;
                        }
                    }
                }
                if let Some(gc) = slot(nodes, grads, *c_prev) {
                    for r in 0..n {
                        for j in 0..d {
                            let (_, f, _, _) = gt.at(r, j);
                            gc[r * d + j] += g[r * d + j] * f;
                        }
                    }
                }
            }
            Op::LstmOutput { gates, c } => {
                let (n, d) = (out.rows(), out.cols());
                let gt = Gates {
                    act: val(*gates),
                    d,
                };
                let tc: Vec<f64> = val(*c).iter().map(|x| x.tanh()).collect();
                if let Some(gg) = slot(nodes, grads, *gates) {
                    for r in 0..n {
                        for j in 0..d {
                            gg[r * 4 * d + 3 * d + j] += g[r * d + j] * tc[r * d + j];
                        }
                    }
                }
                if let Some(gc) = slot(nodes, grads, *c) {
                    for r in 0..n {
                        for j in 0..d {
                            let (_, _, _, o) = gt.at(r, j);
                            let t = tc[r * d + j];
                            gc[r * d + j] += g[r * d + j] * o * (1.0 - t * t);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (n, k) = (out.rows(), out.cols());
                if let Some(ga) = slot(nodes, grads, *a) {
                    let p = out.data();
                    for r in 0..n {
                        let row = r * k..(r + 1) * k;
                        let dot: f64 = p[row.clone()].iter().zip(&g[row.clone()]).map(|(x, y)| x * y).sum();
                        for j in row {
                            ga[j] += p[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|acc| *acc += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
                mean,
            } => {
                let v = nodes[logits.0].value.cols();
                let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
                let scale = if *mean { g[0] / *count as f64 } else { g[0] };
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == PAD_ID {
                            continue;
                        }
                        for k in 0..v {
                            let q = if k == t { 1.0 - smoothing } else { off };
                            gl[r * v + k] += scale * (probs[r * v + k] - q);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Component;

    fn store_with(values: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (name, t) in values {
            s.add(name, Component::Encoder, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn square_gradient() {
        let mut store = store_with(&[("theta", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let id = store.id("theta").unwrap();
        let t = g.param(&store, id);
        let sq = g.mul(t, t).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[6.0]);
    }

    #[test]
    fn independent_loss_gives_zero_gradient() {
        let mut store = store_with(&[
            ("theta", Tensor::scalar(3.0)),
            ("other", Tensor::scalar(2.0)),
        ]);
        let mut g = Graph::new();
        let a = g.param(&store, store.id("theta").unwrap());
        let _ = a;
        let b = g.param(&store, store.id("other").unwrap());
        let loss = g.sum(b);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.by_name("theta").unwrap().grad.data(), &[0.0]);
        assert_eq!(store.by_name("other").unwrap().grad.data(), &[1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = store_with(&[("theta", Tensor::scalar(1.0))]);
        let mut g = Graph::new();
        let t = g.param(&store, store.id("theta").unwrap());
        let loss = g.sum(t);
        g.backward(loss, &mut store).unwrap();
        assert!(matches!(g.backward(loss, &mut store), Err(Error::BackwardTwice)));
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn frozen_parameter_gets_exact_zero() {
        let mut store = store_with(&[("theta", Tensor::scalar(3.0))]);
        let id = store.id("theta").unwrap();
        store.get_mut(id).trainable = false;
        let mut g = Graph::new();
        let t = g.param(&store, id);
        let sq = g.mul(t, t).unwrap();
        let loss = g.sum(sq);
        assert!(!g.requires_grad(loss));
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data()[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let b = g.constant(Tensor::vector(&[3.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let x = g.constant(Tensor::zeros(&[3, 2]));
        let w = g.constant(Tensor::from_rows(&[vec![5.0, -1.0], vec![2.0, 7.0]]).unwrap());
        let b = g.constant(Tensor::vector(&[1.0, 2.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

        let w = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.affine(x, w, b).is_err());
    }

    #[test]
    fn cross_entropy_ignores_padding_and_rejects_all_padding() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(logits, &[2, PAD_ID], 0.0, true).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(g.token_count(l), 1);
        assert!(g.cross_entropy(logits, &[PAD_ID, PAD_ID], 0.0, true).is_err());
    }
}
