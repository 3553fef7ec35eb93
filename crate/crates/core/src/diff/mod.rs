//! Minimal reverse-mode differentiable tensor engine.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;


pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{Gradients, Graph, Unary, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Indices of the `k` largest entries of `x`, ordered by descending value;
/// ties go to the lower index. Not recorded on any tape.
pub fn topk_indices(x: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > x.len() {
        return Err(Error::Argument(alloc::format!(
            "top-k needs 1 <= k <= {}, got {k}",
            x.len()
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
