//! The full evaluation protocol: stratified 5-fold splits per dataset,
//! fresh heads on the pretrained body per fold, tail fine-tuning, test
//! evaluation, and mean(std) aggregation across folds.

use std::collections::BTreeMap;

use serde::Serialize;

use super::finetune::{finetune, FinetuneDataset, FinetuneOptions, FinetunePiece, HistoryRecord};
use super::splits::{make_cv_splits, CvPlan};
use super::PipelineError;
use crate::bootleg::BootlegScore;
use crate::dataset::{load_scores, DatasetManifest};
use crate::eval::{self, FoldMetrics, MetricSummary, Prediction, TableRow};
use crate::model::{GptModel, HeadSpec};

/// A manifest with its scores loaded into memory.
pub struct ProtocolDataset {
    pub manifest: DatasetManifest,
    pub pieces: Vec<(String, BootlegScore, usize)>,
}

impl ProtocolDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self, PipelineError> {
        let pieces = load_scores(&manifest)?;
        Ok(ProtocolDataset { manifest, pieces })
    }

    pub fn from_memory(manifest: DatasetManifest, pieces: Vec<(String, BootlegScore, usize)>) -> Self {
        ProtocolDataset { manifest, pieces }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// How many of the five folds to run.
    pub folds: usize,
    pub seed: u64,
    pub finetune: FinetuneOptions,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            folds: super::splits::N_FOLDS,
            seed: 0,
            finetune: FinetuneOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldPredictions {
    pub fold: usize,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetBlock {
    pub dataset: String,
    pub num_classes: usize,
    pub air: f64,
    pub fold_metrics: Vec<FoldMetrics>,
    pub summary: MetricSummary,
    pub predictions: Vec<FoldPredictions>,
}

#[derive(Clone, Serialize)]
pub struct ProtocolReport {
    pub folds_run: usize,
    pub seed: u64,
    pub datasets: Vec<DatasetBlock>,
    #[serde(skip)]
    pub histories: Vec<Vec<HistoryRecord>>,
    #[serde(skip)]
    pub plans: Vec<CvPlan>,
    #[serde(skip)]
    pub models: Vec<GptModel<f32>>,
}

impl ProtocolReport {
    /// Results table in the mean(std) layout.
    pub fn table(&self) -> String {
        let rows: Vec<TableRow> = self
            .datasets
            .iter()
            .map(|d| TableRow {
                label: d.dataset.clone(),
                summary: d.summary,
            })
            .collect();
        eval::render_table(&rows)
    }
}

/// Runs `opts.folds` folds of the protocol on a pretrained body. Heads are
/// freshly initialized per fold; the same fold index shares splits across
/// datasets only in the sense that each dataset's own stratified plan is
/// indexed by it.
pub fn run_protocol(
    base: &GptModel<f32>,
    datasets: &[ProtocolDataset],
    opts: &ProtocolOptions,
) -> Result<ProtocolReport, PipelineError> {
    assert!(
        opts.folds >= 1 && opts.folds <= super::splits::N_FOLDS,
        "folds must be in 1..=5"
    );
    if datasets.is_empty() {
        return Err(PipelineError::EmptySplit);
    }

    let plans: Vec<CvPlan> = datasets
        .iter()
        .map(|ds| make_cv_splits(&ds.manifest, opts.seed))
        .collect::<Result<_, _>>()?;
    let specs: Vec<HeadSpec> = datasets
        .iter()
        .map(|ds| HeadSpec {
            dataset_id: ds.manifest.name.clone(),
            num_classes: ds.manifest.num_classes,
        })
        .collect();

    let mut fold_metrics: Vec<Vec<FoldMetrics>> = vec![Vec::new(); datasets.len()];
    let mut fold_predictions: Vec<Vec<FoldPredictions>> = vec![Vec::new(); datasets.len()];
    let mut histories = Vec::with_capacity(opts.folds);
    let mut models = Vec::with_capacity(opts.folds);

    for fold in 0..opts.folds {
        let mut model = base.clone();
        model.add_heads(&specs, opts.seed.wrapping_add(1000 + fold as u64))?;

        let mut ft_datasets = Vec::with_capacity(datasets.len());
        let mut test_sets = Vec::with_capacity(datasets.len());
        for (ds, plan) in datasets.iter().zip(&plans) {
            let by_id: BTreeMap<&str, &(String, BootlegScore, usize)> = ds
                .pieces
                .iter()
                .map(|p| (p.0.as_str(), p))
                .collect();
            let gather = |ids: &[String]| -> Vec<FinetunePiece> {
                ids.iter()
                    .map(|id| {
                        let (pid, score, label) = by_id[id.as_str()];
                        FinetunePiece {
                            piece_id: pid.clone(),
                            score: score.clone(),
                            label: *label,
                        }
                    })
                    .collect()
            };
            let split = &plan.folds[fold];
            ft_datasets.push(FinetuneDataset {
                dataset_id: ds.manifest.name.clone(),
                num_classes: ds.manifest.num_classes,
                train: gather(&split.train),
                validation: gather(&split.validation),
            });
            test_sets.push(
                split
                    .test
                    .iter()
                    .map(|id| {
                        let (pid, score, label) = by_id[id.as_str()];
                        (pid.clone(), score.clone(), *label)
                    })
                    .collect::<Vec<_>>(),
            );
        }

        let mut fold_opts = opts.finetune.clone();
        fold_opts.seed = opts.finetune.seed.wrapping_add(fold as u64);
        let result = finetune(model, &ft_datasets, &fold_opts)?;

        for (di, ds) in datasets.iter().enumerate() {
            let outcome =
                eval::evaluate_model(&result.model, &test_sets[di], &ds.manifest.name)?;
            fold_metrics[di].push(outcome.metrics);
            fold_predictions[di].push(FoldPredictions {
                fold,
                predictions: outcome.predictions,
            });
        }
        histories.push(result.history);
        models.push(result.model);
    }

    let mut blocks = Vec::with_capacity(datasets.len());
    for (di, ds) in datasets.iter().enumerate() {
        let labels: Vec<usize> = ds.pieces.iter().map(|p| p.2).collect();
        blocks.push(DatasetBlock {
            dataset: ds.manifest.name.clone(),
            num_classes: ds.manifest.num_classes,
            air: eval::air(&labels, ds.manifest.num_classes)?,
            fold_metrics: fold_metrics[di].clone(),
            summary: eval::summarize(&fold_metrics[di]),
            predictions: fold_predictions[di].clone(),
        });
    }
    Ok(ProtocolReport {
        folds_run: opts.folds,
        seed: opts.seed,
        datasets: blocks,
        histories,
        plans,
        models,
    })
}
