//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Everything is 64-bit and deterministic: reductions run in a fixed
//! left-to-right order, relu's subgradient at 0 is 0, and top-K / argmax
//! ties break toward the lowest index. Identical inputs give bit-identical
//! outputs, which is what makes whole training runs a function of the seed.

mod grad_check;
mod graph;
mod tensor;

pub use grad_check::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Indices of the `k` largest entries (or all of them when `k >= len`),
/// ordered by descending value with ties broken by lowest index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("non-finite score in top_k_indices")
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(values.len()));
    idx
}

/// Index of the largest entry, ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    top_k_indices(values, 1)[0]
}
