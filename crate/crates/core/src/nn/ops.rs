//! Tape-free entry points for single operations on plain tensors.

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::kernels;
use crate::nn::Tensor;

/// `x * w + b` for `x [n x i]`, `w [i x o]`, `b [o]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.affine(x, w, b)?;
    Ok(g.value(y).clone())
}

/// Row-wise softmax, max-subtracted.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = kernels::check_matrix(logits, "logits")?;
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        kernels::softmax_into(logits.row(r), &mut out[r * k..(r + 1) * k]);
    }
    Tensor::new(&[n, k], out)
}

/// Weights of one LSTM layer: `w [(i + d) x 4d]` over `[x, h]`, single bias `b [4d]`.
/// Gate order along the `4d` axis is input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    pub w: Tensor,
    pub b: Tensor,
}

/// One LSTM step, returns `(h', c')`.
pub fn lstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, weights: &LstmWeights) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let h = g.constant(h.clone());
    let c = g.constant(c.clone());
    let w = g.constant(weights.w.clone());
    let b = g.constant(weights.b.clone());
    let (h2, c2) = g.lstm_cell(x, h, c, w, b)?;
    Ok((g.value(h2).clone(), g.value(c2).clone()))
}

/// Dot-product attention of one query `[d]` over `states [len x d]`.
/// Returns `(context [d], weights [len])`.
pub fn attention(query: &Tensor, states: &Tensor) -> Result<(Tensor, Tensor)> {
    let (len, d) = kernels::check_matrix(states, "encoder states")?;
    if query.len() != d {
        return Err(Error::Shape(format!("query of {} for states {len}x{d}", query.len())));
    }
    let mut weights = vec![0.0; len];
    let mut ctx = vec![0.0; d];
    kernels::attend_row(query.data(), states.data(), 1, 0, len, &mut weights, &mut ctx);
    Ok((Tensor::vector(&ctx), Tensor::vector(&weights)))
}
