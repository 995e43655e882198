//! Dense tensors, a handful of kernels, and a recorded reverse-mode tape.

pub mod linalg;
mod tape;
mod tensor;

pub use linalg::{apply_kron_factored, kron, matmul, transpose};
pub use tape::{AttentionSpec, Gradients, Precision, Tape, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Row-wise softmax of a `n×c` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2("softmax")?;
    Ok(Tensor::from_parts(alloc::vec![n, c], tape::softmax_rows(logits.data(), n, c)))
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2("log_softmax")?;
    Ok(Tensor::from_parts(alloc::vec![n, c], tape::log_softmax_rows(logits.data(), n, c)))
}

/// Mean row-wise `KL(softmax(p) ‖ softmax(q))`.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::shape("kl_divergence", p_logits.shape(), q_logits.shape()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(p_logits.clone());
    let q = tape.constant(q_logits.clone());
    let kl = tape.kl_divergence(p, q)?;
    Ok(tape.value(kl).data()[0])
}

/// Mean cross-entropy of `logits` against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce).data()[0])
}
