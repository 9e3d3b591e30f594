//! Stratified 5-fold cross-validation splits: per fold, one stratum is the
//! test set, the next one the validation set, the remaining three the
//! training set (roughly 60/20/20).

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::dataset::DatasetManifest;
use crate::rng;

pub const N_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CvPlan {
    pub folds: Vec<CvSplit>,
    pub warnings: Vec<String>,
}

/// Deterministic for (manifest, seed). Within each class the pieces are
/// shuffled and dealt round-robin into five strata through a global
/// cursor, so both the strata sizes and every class's spread stay as even
/// as the counts allow.
pub fn make_cv_splits(manifest: &DatasetManifest, seed: u64) -> Result<CvPlan, PipelineError> {
    let n = manifest.pieces.len();
    if n < N_FOLDS {
        return Err(PipelineError::TooFewPieces(manifest.name.clone(), n));
    }
    let mut rng = rng::derive(seed, 0x5917);
    let mut strata: Vec<Vec<String>> = vec![Vec::new(); N_FOLDS];
    let mut warnings = Vec::new();
    let mut cursor = 0usize;
    for class in 0..manifest.num_classes {
        let mut members: Vec<&str> = manifest
            .pieces
            .iter()
            .filter(|p| p.label == class)
            .map(|p| p.piece_id.as_str())
            .collect();
        if members.is_empty() {
            warnings.push(format!(
                "class {class} has no pieces and is skipped from stratification"
            ));
            continue;
        }
        rng::shuffle(&mut rng, &mut members);
        for id in members {
            strata[cursor % N_FOLDS].push(id.to_owned());
            cursor += 1;
        }
    }

    let folds = (0..N_FOLDS)
        .map(|i| {
            let mut train = Vec::new();
            for off in 2..N_FOLDS {
                train.extend(strata[(i + off) % N_FOLDS].iter().cloned());
            }
            CvSplit {
                fold: i,
                train,
                validation: strata[(i + 1) % N_FOLDS].clone(),
                test: strata[i].clone(),
            }
        })
        .collect();
    Ok(CvPlan { folds, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PieceEntry;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    fn manifest(labels: &[usize], k: usize) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            num_classes: k,
            pieces: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| PieceEntry {
                    piece_id: format!("p{i:03}"),
                    path: format!("p{i:03}.bsc"),
                    label,
                    composer: None,
                })
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn balanced_hundred_splits_exactly_60_20_20() {
        let labels: Vec<usize> = (0..100).map(|i| i / 20).collect();
        let plan = make_cv_splits(&manifest(&labels, 5), 3).unwrap();
        assert!(plan.warnings.is_empty());
        for split in &plan.folds {
            assert_eq!(split.train.len(), 60);
            assert_eq!(split.validation.len(), 20);
            assert_eq!(split.test.len(), 20);
        }
    }

    #[test]
    fn test_sets_partition_the_corpus() {
        let labels: Vec<usize> = (0..83).map(|i| i % 4).collect();
        let plan = make_cv_splits(&manifest(&labels, 4), 11).unwrap();
        let mut all = BTreeSet::new();
        let mut total = 0;
        for split in &plan.folds {
            total += split.test.len();
            for id in &split.test {
                assert!(all.insert(id.clone()), "duplicate test id {id}");
            }
            // Disjointness within the fold.
            let train: BTreeSet<_> = split.train.iter().collect();
            let val: BTreeSet<_> = split.validation.iter().collect();
            for id in &split.test {
                assert!(!train.contains(id) && !val.contains(id));
            }
            for id in &split.validation {
                assert!(!train.contains(id));
            }
            assert_eq!(
                split.train.len() + split.validation.len() + split.test.len(),
                83
            );
        }
        assert_eq!(total, 83);
        assert_eq!(all.len(), 83);
    }

    #[test]
    fn same_seed_same_splits() {
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let m = manifest(&labels, 3);
        let a = make_cv_splits(&m, 7).unwrap();
        let b = make_cv_splits(&m, 7).unwrap();
        assert_eq!(a.folds, b.folds);
        let c = make_cv_splits(&m, 8).unwrap();
        assert_ne!(a.folds, c.folds);
    }

    #[test]
    fn stratification_spreads_each_class() {
        let labels: Vec<usize> = (0..50).map(|i| i / 10).collect();
        let plan = make_cv_splits(&manifest(&labels, 5), 1).unwrap();
        // 10 pieces per class over 5 folds: every test fold carries exactly
        // 2 of each class.
        for split in &plan.folds {
            for class in 0..5 {
                let in_test = split
                    .test
                    .iter()
                    .filter(|id| {
                        let idx: usize = id[1..].parse().unwrap();
                        idx / 10 == class
                    })
                    .count();
                assert_eq!(in_test, 2, "fold {} class {class}", split.fold);
            }
        }
    }

    #[test]
    fn empty_class_warns_but_splits() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect(); // class 2 empty
        let plan = make_cv_splits(&manifest(&labels, 3), 2).unwrap();
        assert_eq!(plan.warnings.len(), 1);
        assert!(plan.warnings[0].contains("class 2"));
    }

    #[test]
    fn too_few_pieces_is_an_error() {
        let labels = vec![0, 1, 0];
        assert!(matches!(
            make_cv_splits(&manifest(&labels, 2), 1),
            Err(PipelineError::TooFewPieces(_, 3))
        ));
    }
}
