//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Trainable
//! tensors live in a [`ParamStore`] outside the tape so that the same
//! parameters can be read by many short-lived tapes (one per mini-batch,
//! possibly on different threads).
//!
//! ```
//! use graphpool::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::column(&[1.0, 2.0]).with_requires_grad(true));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{DenseNorm, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Indices of the `k` largest scores, returned in ascending index order.
///
/// Ties are broken in favour of the smaller index. The selection itself is
/// not differentiable; gradients reach the scores only through whatever
/// gating the caller applies to the selected rows.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
