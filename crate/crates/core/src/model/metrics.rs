//! Perplexity and bits-per-character.

use crate::scalar::Scalar;

/// `exp(-mean(log p))` over per-token natural-log probabilities.
///
/// An empty slice has perplexity 1.
pub fn perplexity<T: Scalar>(log_probs: &[T]) -> T {
    if log_probs.is_empty() {
        return T::one();
    }
    let sum = log_probs.iter().fold(T::zero(), |a, &v| a + v);
    (-sum / T::from_usize_lossy(log_probs.len())).exp()
}

/// Converts a mean natural-log cross-entropy to bits.
pub fn bits_per_character<T: Scalar>(mean_cross_entropy: T) -> T {
    mean_cross_entropy / T::LN_2()
}
