//! Dense f64 arrays with a reverse-mode tape.
//!
//! Everything the model and the alignment losses differentiate through lives
//! here: a row-major [`Tensor`], the [`Tape`] that records primitive ops, the
//! central-difference checker and the AdamW update.

mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FdReport};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Cross entropy summed over `positions`, evaluated without a tape.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn cross_entropy_at_positions(
    logits: &Tensor,
    targets: &[usize],
    positions: &[usize],
) -> crate::Result<(f64, Tensor)> {
    tape::cross_entropy_value_and_grad(logits, targets, positions)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> crate::Result<Tensor> {
    let (m, n) = x.dims2()?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(crate::Error::Numeric("NaN input to softmax".into()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(vec![m, n], out)
}

/// Euclidean norm of each row.
pub fn l2_norm_rows(x: &Tensor) -> crate::Result<Tensor> {
    let (m, n) = x.dims2()?;
    let norms = (0..m)
        .map(|i| x.data()[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Tensor::new(vec![m], norms)
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(crate::Error::Dimension(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}
