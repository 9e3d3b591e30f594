//! Ordinal classification over K levels via K-1 cumulative binary targets:
//! target i answers "is the class above level i?". Decoding counts
//! positive answers, so adjacent-level mistakes cost one bit, distant ones
//! several.

use super::ModelError;
use crate::tensor::ops::sigmoid_bce_mean;
use crate::tensor::{Scalar, Tensor};

/// Cumulative binary targets of class `c` among `k` levels:
/// t_i = 1 iff c > i, for i in 0..k-1.
pub fn ordinal_encode(class: usize, k: usize) -> Result<Vec<u8>, ModelError> {
    if class >= k {
        return Err(ModelError::ClassOutOfRange { class, k });
    }
    Ok((0..k - 1).map(|i| u8::from(class > i)).collect())
}

/// Targets as scalars, for loss computation.
pub fn ordinal_targets<T: Scalar>(class: usize, k: usize) -> Result<Vec<T>, ModelError> {
    Ok(ordinal_encode(class, k)?
        .into_iter()
        .map(|b| if b == 1 { T::ONE } else { T::ZERO })
        .collect())
}

/// Class index from K-1 sigmoid probabilities: the number of entries
/// above 0.5.
pub fn ordinal_decode(probs: &[f64]) -> usize {
    probs.iter().filter(|&&p| p > 0.5).count()
}

/// Same decode rule applied directly to logits (sigma(z) > 0.5 iff z > 0).
pub fn ordinal_decode_logits<T: Scalar>(logits: &[T]) -> usize {
    logits.iter().filter(|&&z| z > T::ZERO).count()
}

/// Mean binary cross-entropy between sigmoid(logits) and the cumulative
/// targets of `classes`. Logits are [n, k-1].
pub fn ordinal_loss<T: Scalar>(
    logits: &Tensor<T>,
    classes: &[usize],
    k: usize,
) -> Result<Tensor<T>, ModelError> {
    let (n, width) = logits.dims2()?;
    if width != k - 1 || n != classes.len() {
        return Err(ModelError::BadConfig(format!(
            "ordinal loss expects [{}, {}] logits, got [{n}, {width}]",
            classes.len(),
            k - 1
        )));
    }
    let mut targets = Vec::with_capacity(n * width);
    for &c in classes {
        targets.extend(ordinal_targets::<T>(c, k)?);
    }
    Ok(sigmoid_bce_mean(logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_matches_cumulative_definition() {
        assert_eq!(ordinal_encode(0, 9).unwrap(), vec![0; 8]);
        assert_eq!(ordinal_encode(8, 9).unwrap(), vec![1; 8]);
        assert_eq!(
            ordinal_encode(3, 9).unwrap(),
            vec![1, 1, 1, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        assert!(matches!(
            ordinal_encode(9, 9),
            Err(ModelError::ClassOutOfRange { class: 9, k: 9 })
        ));
    }

    #[test]
    fn decode_counts_confident_entries() {
        assert_eq!(ordinal_decode(&[]), 0);
        assert_eq!(ordinal_decode(&[0.1, 0.2]), 0);
        assert_eq!(
            ordinal_decode(&[0.9, 0.8, 0.6, 0.4, 0.2, 0.1, 0.1, 0.1]),
            3
        );
    }

    #[test]
    fn decode_inverts_encode_for_all_k_up_to_16() {
        for k in 2..=16 {
            for c in 0..k {
                // Saturate the targets into confident probabilities.
                let probs: Vec<f64> = ordinal_encode(c, k)
                    .unwrap()
                    .iter()
                    .map(|&t| if t == 1 { 0.999 } else { 0.001 })
                    .collect();
                assert_eq!(ordinal_decode(&probs), c, "k={k} c={c}");
            }
        }
    }

    #[test]
    fn matched_saturated_logits_vanish_the_loss() {
        let targets = ordinal_encode(3, 9).unwrap();
        let logits: Vec<f64> = targets
            .iter()
            .map(|&t| if t == 1 { 20.0 } else { -20.0 })
            .collect();
        let loss = ordinal_loss(&Tensor::new(vec![1, 8], logits), &[3], 9).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn zero_logits_cost_ln_2() {
        let loss = ordinal_loss(&Tensor::new(vec![1, 8], vec![0.0f64; 8]), &[5], 9).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
