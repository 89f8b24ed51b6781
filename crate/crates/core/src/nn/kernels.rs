//! Raw numeric kernels shared by the tape ops and the pure tensor functions.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// Transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, `out` is row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, beta: f64, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log(sum(exp(row)))`, computed stably.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Gate layout inside a `[n x 4d]` block: input, forget, candidate, output.
pub(crate) struct Gates<'a> {
    /// Activated gate values (sigmoid, sigmoid, tanh, sigmoid).
    pub act: &'a [f64],
    pub d: usize,
}

impl Gates<'_> {
    #[inline]
    pub fn at(&self, row: usize, j: usize) -> (f64, f64, f64, f64) {
        let base = row * 4 * self.d;
        (
            self.act[base + j],
            self.act[base + self.d + j],
            self.act[base + 2 * self.d + j],
            self.act[base + 3 * self.d + j],
        )
    }
}

/// Applies the gate nonlinearities to a `[n x 4d]` pre-activation block.
pub(crate) fn activate_gates(pre: &[f64], d: usize) -> Vec<f64> {
    pre.iter()
        .enumerate()
        .map(|(k, &x)| if (k / d) % 4 == 2 { x.tanh() } else { sigmoid(x) })
        .collect()
}

/// Dot-product attention for one batch row.
///
/// `memory` is `[len x batch x dim]`, only the first `len` steps are attended.
/// Returns the context written into `ctx` and the weights written into `weights`.
pub(crate) fn attend_row(
    query: &[f64],
    memory: &[f64],
    batch: usize,
    b: usize,
    len: usize,
    weights: &mut [f64],
    ctx: &mut [f64],
) {
    let dim = query.len();
    let mut scores = vec![0.0; len];
    for (t, s) in scores.iter_mut().enumerate() {
        let m = &memory[(t * batch + b) * dim..(t * batch + b + 1) * dim];
        *s = m.iter().zip(query).map(|(x, y)| x * y).sum();
    }
    softmax_into(&scores, &mut weights[..len]);
    ctx.iter_mut().for_each(|c| *c = 0.0);
    for (t, &w) in weights[..len].iter().enumerate() {
        let m = &memory[(t * batch + b) * dim..(t * batch + b + 1) * dim];
        for (c, &x) in ctx.iter_mut().zip(m) {
            *c += w * x;
        }
    }
}

pub(crate) fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}
