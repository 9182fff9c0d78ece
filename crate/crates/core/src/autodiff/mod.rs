//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op applied during a forward pass; [`Tape::backward`]
//! replays it in reverse. Ops outside the built-in set plug in through the
//! [`Function`] trait. One tape per forward pass, confined to one thread.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheck, GradCheckReport};
pub use tape::{Function, Gradients, Op, Operand, Precision, Tape, Var};
pub use tensor::Tensor;

/// Indices of the `k` largest entries, ascending. Ties go to the lower index.
///
/// Not differentiable; callers treat the result as a constant of the forward pass.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::top_k_indices;

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.2, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.4, 0.3, 0.2, 0.1], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.4, 0.6], 5), vec![0, 1]);
    }
}
