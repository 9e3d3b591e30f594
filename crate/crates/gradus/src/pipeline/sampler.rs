//! Batch sampling for fine-tuning. The balanced mode draws classes
//! uniformly (pieces uniformly within the class, with replacement), which
//! oversamples minorities; the natural mode preserves the empirical label
//! frequencies by shuffling the split.

use super::PipelineError;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Balanced,
    Natural,
}

/// One epoch of batches as positions into `labels`. Epoch length is
/// ceil(N / batch_size) batches either way; the natural mode keeps a short
/// final batch, the balanced mode always fills batches by sampling.
pub fn epoch_batches(
    labels: &[usize],
    batch_size: usize,
    mode: SamplerMode,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>, PipelineError> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let n = labels.len();
    if n == 0 {
        return Err(PipelineError::EmptySplit);
    }
    let n_batches = n.div_ceil(batch_size);
    match mode {
        SamplerMode::Balanced => {
            let mut classes: Vec<usize> = labels.to_vec();
            classes.sort_unstable();
            classes.dedup();
            let members: Vec<Vec<usize>> = classes
                .iter()
                .map(|&c| {
                    (0..n)
                        .filter(|&i| labels[i] == c)
                        .collect()
                })
                .collect();
            let batches = (0..n_batches)
                .map(|_| {
                    (0..batch_size)
                        .map(|_| {
                            let class = rng::uniform_usize(rng, members.len());
                            let within = rng::uniform_usize(rng, members[class].len());
                            members[class][within]
                        })
                        .collect()
                })
                .collect();
            Ok(batches)
        }
        SamplerMode::Natural => {
            let mut order: Vec<usize> = (0..n).collect();
            rng::shuffle(rng, &mut order);
            Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_mode_equalizes_a_90_10_split() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let mut rng = crate::rng::seeded(3);
        let mut hits = 0usize;
        let mut total = 0usize;
        while total < 1000 {
            let batches = epoch_batches(&labels, 10, SamplerMode::Balanced, &mut rng).unwrap();
            for b in &batches {
                for &i in b {
                    total += 1;
                    hits += usize::from(labels[i] == 1);
                }
            }
        }
        let share = hits as f64 / total as f64;
        assert!((share - 0.5).abs() < 0.05, "minority share {share}");
    }

    #[test]
    fn natural_mode_preserves_frequencies() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let mut rng = crate::rng::seeded(4);
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..10 {
            let batches = epoch_batches(&labels, 16, SamplerMode::Natural, &mut rng).unwrap();
            for b in &batches {
                for &i in b {
                    total += 1;
                    hits += usize::from(labels[i] == 0);
                }
            }
        }
        let share = hits as f64 / total as f64;
        assert!((share - 0.9).abs() < 0.03, "majority share {share}");
    }

    #[test]
    fn single_class_dataset_draws_only_that_class() {
        let labels = vec![2usize; 17];
        let mut rng = crate::rng::seeded(5);
        let batches = epoch_batches(&labels, 4, SamplerMode::Balanced, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        for b in &batches {
            assert_eq!(b.len(), 4);
            for &i in b {
                assert_eq!(labels[i], 2);
            }
        }
    }

    #[test]
    fn natural_mode_keeps_the_short_final_batch() {
        let labels = vec![0usize; 10];
        let mut rng = crate::rng::seeded(6);
        let batches = epoch_batches(&labels, 4, SamplerMode::Natural, &mut rng).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 2);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut rng = crate::rng::seeded(7);
        assert!(matches!(
            epoch_batches(&[], 4, SamplerMode::Balanced, &mut rng),
            Err(PipelineError::EmptySplit)
        ));
    }
}
