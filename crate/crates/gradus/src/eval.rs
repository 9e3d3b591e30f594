//! Evaluation: macro-averaged accuracy-within-n and MSE over difficulty
//! classes, average imbalance ratio, Stuart's tau-c rank correlation,
//! first-component PCA for zero-shot ranking, and plain-text report
//! rendering in the mean(std) table style.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootleg::BootlegScore;
use crate::model::ordinal::ordinal_decode_logits;
use crate::model::{GptModel, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("empty input")]
    Empty,
    #[error("correlation undefined: fewer than 2 distinct classes present")]
    UndefinedCorrelation,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("at least {0} samples required")]
    TooFewSamples(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_pairs(preds: &[usize], truths: &[usize], k: usize) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    for &v in preds.iter().chain(truths) {
        if v >= k {
            return Err(EvalError::LabelOutOfRange { label: v, k });
        }
    }
    Ok(())
}

/// Fraction of pieces predicted within `n` levels of the truth, computed
/// per class and macro-averaged over the classes present in `truths`.
pub fn acc_within_n(
    preds: &[usize],
    truths: &[usize],
    k: usize,
    n: usize,
) -> Result<f64, EvalError> {
    check_pairs(preds, truths, k)?;
    let mut total = 0.0;
    let mut present = 0usize;
    for class in 0..k {
        let mut count = 0usize;
        let mut hit = 0usize;
        for (&p, &t) in preds.iter().zip(truths) {
            if t == class {
                count += 1;
                if p.abs_diff(t) <= n {
                    hit += 1;
                }
            }
        }
        if count > 0 {
            present += 1;
            total += hit as f64 / count as f64;
        }
    }
    if present == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total / present as f64)
}

/// Per-class mean squared class-index error, macro-averaged over the
/// classes present in `truths`.
pub fn macro_mse(preds: &[usize], truths: &[usize], k: usize) -> Result<f64, EvalError> {
    check_pairs(preds, truths, k)?;
    let mut total = 0.0;
    let mut present = 0usize;
    for class in 0..k {
        let mut count = 0usize;
        let mut sq = 0.0;
        for (&p, &t) in preds.iter().zip(truths) {
            if t == class {
                count += 1;
                let d = p as f64 - t as f64;
                sq += d * d;
            }
        }
        if count > 0 {
            present += 1;
            total += sq / count as f64;
        }
    }
    if present == 0 {
        return Err(EvalError::Empty);
    }
    Ok(total / present as f64)
}

/// Stuart's tau-c between continuous scores and ordinal class labels:
/// 2m(P-Q) / (n^2 (m-1)) with m the number of distinct labels present.
/// Pairs tied on either variable count toward neither P nor Q.
pub fn kendall_tau_c(scores: &[f64], classes: &[usize]) -> Result<f64, EvalError> {
    if scores.len() != classes.len() {
        return Err(EvalError::LengthMismatch(scores.len(), classes.len()));
    }
    let n = scores.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(2));
    }
    let mut distinct: Vec<usize> = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let m = distinct.len();
    if m < 2 {
        return Err(EvalError::UndefinedCorrelation);
    }
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if classes[i] == classes[j] || scores[i] == scores[j] {
                continue;
            }
            let class_up = classes[i] < classes[j];
            let score_up = scores[i] < scores[j];
            if class_up == score_up {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let p_minus_q = concordant as f64 - discordant as f64;
    Ok(2.0 * m as f64 * p_minus_q / ((n * n) as f64 * (m - 1) as f64))
}

/// Average imbalance ratio: mean over the classes present of
/// count(class) / count(majority class).
pub fn air(labels: &[usize], k: usize) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(EvalError::LabelOutOfRange { label: l, k });
        }
        counts[l] += 1;
    }
    let max = *counts.iter().max().unwrap() as f64;
    let present: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / max)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// First principal component and the projections onto it.
#[derive(Debug, Clone)]
pub struct Pca {
    pub scores: Vec<f64>,
    pub component: Vec<f64>,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 1000;

/// Mean-centers the rows and extracts the first principal direction by
/// power iteration on the covariance; the start vector is the
/// largest-norm centered row. The component is unit length with its
/// largest-magnitude coordinate made positive.
pub fn pca_first_component(rows: &[Vec<f64>]) -> Result<Pca, EvalError> {
    let n = rows.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(2));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(EvalError::DegenerateData("ragged embedding rows".into()));
    }

    let mut mean = vec![0.0; d];
    for row in rows {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            centered[i * d + j] = row[j] - mean[j];
        }
    }

    // Start vector: the centered row of largest norm (first among ties).
    let mut best = (0usize, -1.0f64);
    for i in 0..n {
        let sq: f64 = centered[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
        if sq > best.1 {
            best = (i, sq);
        }
    }
    if best.1 <= 0.0 {
        return Err(EvalError::DegenerateData(
            "zero variance: all rows identical".into(),
        ));
    }
    let norm = best.1.sqrt();
    let mut v: Vec<f64> = centered[best.0 * d..(best.0 + 1) * d]
        .iter()
        .map(|x| x / norm)
        .collect();

    // Power iteration on C = X^T X without materializing C: C v = X^T (X v).
    let mut xv = vec![0.0; n];
    let mut w = vec![0.0; d];
    for _ in 0..PCA_MAX_ITERS {
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += centered[i * d + j] * v[j];
            }
            xv[i] = s;
        }
        for wj in &mut w {
            *wj = 0.0;
        }
        for i in 0..n {
            let s = xv[i];
            for j in 0..d {
                w[j] += centered[i * d + j] * s;
            }
        }
        let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return Err(EvalError::DegenerateData(
                "power iteration collapsed to zero".into(),
            ));
        }
        let mut delta = 0.0f64;
        for j in 0..d {
            let next = w[j] / wnorm;
            delta = delta.max((next - v[j]).abs());
            v[j] = next;
        }
        if delta <= PCA_TOL {
            break;
        }
    }

    // Deterministic sign: largest-magnitude coordinate positive.
    let mut idx = 0;
    for j in 1..d {
        if v[j].abs() > v[idx].abs() {
            idx = j;
        }
    }
    if v[idx] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }

    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..d {
                s += centered[i * d + j] * v[j];
            }
            s
        })
        .collect();
    Ok(Pca {
        scores,
        component: v,
    })
}

/// Accuracy/MSE triple of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub acc0: f64,
    pub acc1: f64,
    pub mse: f64,
}

/// Mean and population standard deviation.
pub fn fold_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
}

pub fn summarize(folds: &[FoldMetrics]) -> MetricSummary {
    let (acc0_m, acc0_s) = fold_mean_std(&folds.iter().map(|f| f.acc0).collect::<Vec<_>>());
    let (acc1_m, acc1_s) = fold_mean_std(&folds.iter().map(|f| f.acc1).collect::<Vec<_>>());
    let (mse_m, mse_s) = fold_mean_std(&folds.iter().map(|f| f.mse).collect::<Vec<_>>());
    MetricSummary {
        mean: FoldMetrics {
            acc0: acc0_m,
            acc1: acc1_m,
            mse: mse_m,
        },
        std: FoldMetrics {
            acc0: acc0_s,
            acc1: acc1_s,
            mse: mse_s,
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub piece_id: String,
    pub truth: usize,
    pub pred: usize,
}

/// Metrics plus per-piece predictions of one model on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldEval {
    pub metrics: FoldMetrics,
    pub predictions: Vec<Prediction>,
}

/// Decodes every piece through the model's head for `dataset_id` and
/// computes the macro metrics.
pub fn evaluate_model(
    model: &GptModel<f32>,
    pieces: &[(String, BootlegScore, usize)],
    dataset_id: &str,
) -> Result<FoldEval, EvalError> {
    let spec = model
        .head_spec(dataset_id)
        .ok_or_else(|| ModelError::UnknownHead(dataset_id.to_owned()))?;
    let k = spec.num_classes;
    let mut predictions = Vec::with_capacity(pieces.len());
    for (piece_id, score, truth) in pieces {
        let out = model.forward_classify(score, dataset_id)?;
        let pred = ordinal_decode_logits(out.logits.data());
        predictions.push(Prediction {
            piece_id: piece_id.clone(),
            truth: *truth,
            pred,
        });
    }
    let preds: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let truths: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
    let metrics = FoldMetrics {
        acc0: acc_within_n(&preds, &truths, k, 0)?,
        acc1: acc_within_n(&preds, &truths, k, 1)?,
        mse: macro_mse(&preds, &truths, k)?,
    };
    Ok(FoldEval {
        metrics,
        predictions,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankOutcome {
    pub tau_c: f64,
    pub scores: Vec<f64>,
    pub own_predictions: Vec<usize>,
}

/// Zero-shot ranking: projection-layer embeddings of every piece reduced
/// to one dimension by PCA, the component sign oriented against the
/// model's own decoded predictions (never the ground truth), then scored
/// against the true labels with tau-c.
pub fn zero_shot_rank(
    model: &GptModel<f32>,
    pieces: &[(BootlegScore, usize)],
    head_dataset_id: &str,
) -> Result<RankOutcome, EvalError> {
    let mut embeddings = Vec::with_capacity(pieces.len());
    let mut own_predictions = Vec::with_capacity(pieces.len());
    for (score, _) in pieces {
        let out = model.forward_classify(score, head_dataset_id)?;
        embeddings.push(out.embedding.to_f64_vec());
        own_predictions.push(ordinal_decode_logits(out.logits.data()));
    }
    let mut pca = pca_first_component(&embeddings)?;

    let pred_mean =
        own_predictions.iter().map(|&p| p as f64).sum::<f64>() / own_predictions.len() as f64;
    let score_mean = pca.scores.iter().sum::<f64>() / pca.scores.len() as f64;
    let cov: f64 = pca
        .scores
        .iter()
        .zip(&own_predictions)
        .map(|(&s, &p)| (s - score_mean) * (p as f64 - pred_mean))
        .sum();
    if cov < 0.0 {
        for s in &mut pca.scores {
            *s = -*s;
        }
        for c in &mut pca.component {
            *c = -*c;
        }
    }

    let truths: Vec<usize> = pieces.iter().map(|(_, label)| *label).collect();
    let tau_c = kendall_tau_c(&pca.scores, &truths)?;
    Ok(RankOutcome {
        tau_c,
        scores: pca.scores,
        own_predictions,
    })
}

/// One row of a rendered results table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub summary: MetricSummary,
}

fn fmt_pct(mean: f64, std: f64) -> String {
    format!("{:.1}({:.1})", mean * 100.0, std * 100.0)
}

fn fmt_mse(mean: f64, std: f64) -> String {
    format!("{mean:.1}({std:.1})")
}

/// Plain-text table with Acc0 (%), Acc1 (%) and MSE columns in mean(std)
/// cells; the best value per column (max accuracy, min MSE) is marked
/// with `*`.
pub fn render_table(rows: &[TableRow]) -> String {
    assert!(!rows.is_empty(), "render_table needs at least one row");
    let best_acc0 = rows
        .iter()
        .map(|r| r.summary.mean.acc0)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_acc1 = rows
        .iter()
        .map(|r| r.summary.mean.acc1)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_mse = rows
        .iter()
        .map(|r| r.summary.mean.mse)
        .fold(f64::INFINITY, f64::min);

    let mark = |is_best: bool, cell: String| {
        if is_best {
            format!("*{cell}")
        } else {
            cell
        }
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>12} {:>12} {:>12}\n",
        "Model", "Acc0 (%)", "Acc1 (%)", "MSE"
    ));
    for row in rows {
        let m = &row.summary;
        out.push_str(&format!(
            "{:<24} {:>12} {:>12} {:>12}\n",
            row.label,
            mark(m.mean.acc0 == best_acc0, fmt_pct(m.mean.acc0, m.std.acc0)),
            mark(m.mean.acc1 == best_acc1, fmt_pct(m.mean.acc1, m.std.acc1)),
            mark(m.mean.mse == best_mse, fmt_mse(m.mean.mse, m.std.mse)),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_perfect_predictions() {
        let t = [0, 1, 2, 1];
        assert_eq!(acc_within_n(&t, &t, 3, 0).unwrap(), 1.0);
        assert_eq!(acc_within_n(&t, &t, 3, 2).unwrap(), 1.0);
    }

    #[test]
    fn acc_macro_hand_example() {
        let truths = [0, 0, 1, 1];
        let preds = [0, 1, 1, 1];
        assert_eq!(acc_within_n(&preds, &truths, 2, 0).unwrap(), 0.75);
        assert_eq!(acc_within_n(&preds, &truths, 2, 1).unwrap(), 1.0);
    }

    #[test]
    fn acc_length_mismatch() {
        assert!(matches!(
            acc_within_n(&[0], &[0, 1], 2, 0),
            Err(EvalError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn mse_hand_examples() {
        let truths = [0, 0, 1, 1];
        let preds = [0, 1, 1, 1];
        assert_eq!(macro_mse(&preds, &truths, 2).unwrap(), 0.25);

        // Constant class-0 predictor on balanced truths {0, 2}.
        let truths = [0, 0, 2, 2];
        let preds = [0, 0, 0, 0];
        assert_eq!(macro_mse(&preds, &truths, 3).unwrap(), 2.0);

        assert_eq!(macro_mse(&truths, &truths, 3).unwrap(), 0.0);
    }

    #[test]
    fn tau_c_concordant_balanced_is_one() {
        let tau = kendall_tau_c(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap();
        assert_eq!(tau, 1.0);
    }

    #[test]
    fn tau_c_hand_example_is_minus_half() {
        let tau = kendall_tau_c(&[0.4, 0.3, 0.2, 0.1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(tau, -0.5);
    }

    #[test]
    fn tau_c_antisymmetric_under_reversal() {
        let tau = kendall_tau_c(&[0.4, 0.3, 0.2, 0.1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(tau, -1.0);
    }

    #[test]
    fn tau_c_single_class_is_undefined() {
        assert!(matches!(
            kendall_tau_c(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::UndefinedCorrelation)
        ));
    }

    #[test]
    fn air_examples() {
        assert_eq!(air(&[0, 0, 1, 1, 2, 2], 3).unwrap(), 1.0);
        assert_eq!(air(&[0, 0, 0, 0, 1], 2).unwrap(), 0.625);
        assert_eq!(air(&[1, 1, 1], 4).unwrap(), 1.0);
    }

    #[test]
    fn pca_recovers_the_diagonal_axis() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let pca = pca_first_component(&rows).unwrap();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((pca.component[0] - inv_sqrt2).abs() < 1e-9);
        assert!((pca.component[1] - inv_sqrt2).abs() < 1e-9);
        for w in pca.scores.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn pca_beats_random_directions() {
        let mut rng = crate::rng::seeded(17);
        let weights = [0.5, -0.2, 0.1, 0.7, -0.4, 0.3, 0.0, 0.2];
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let main = crate::rng::standard_normal(&mut rng) * 3.0;
                weights
                    .iter()
                    .map(|w| main * w + crate::rng::standard_normal(&mut rng) * 0.3)
                    .collect()
            })
            .collect();
        let pca = pca_first_component(&rows).unwrap();
        let n = rows.len() as f64;
        let var_of = |scores: &[f64]| {
            let m = scores.iter().sum::<f64>() / n;
            scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / n
        };
        let pca_var = var_of(&pca.scores);
        for _ in 0..100 {
            let dir: Vec<f64> = (0..8)
                .map(|_| crate::rng::standard_normal(&mut rng))
                .collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scores: Vec<f64> = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(&dir)
                        .map(|(a, b)| a * b / norm)
                        .sum::<f64>()
                })
                .collect();
            assert!(pca_var >= var_of(&scores) - 1e-9);
        }
    }

    #[test]
    fn pca_rejects_duplicate_rows() {
        let rows = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(
            pca_first_component(&rows),
            Err(EvalError::DegenerateData(_))
        ));
    }

    #[test]
    fn fold_aggregation_uses_population_std() {
        let (mean, std) = fold_mean_std(&[0.3, 0.4, 0.5]);
        assert!((mean - 0.4).abs() < 1e-12);
        assert!((std - 0.081_649_658_092_772_6).abs() < 1e-9);
    }

    #[test]
    fn constant_predictor_on_balanced_k3_scores_third() {
        let truths = [0, 0, 1, 1, 2, 2];
        let preds = [1, 1, 1, 1, 1, 1];
        assert!((acc_within_n(&preds, &truths, 3, 0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_marks_best_columns() {
        let summary = |acc0: f64, acc1: f64, mse: f64, s0: f64, s1: f64, s2: f64| MetricSummary {
            mean: FoldMetrics { acc0, acc1, mse },
            std: FoldMetrics {
                acc0: s0,
                acc1: s1,
                mse: s2,
            },
        };
        let rows = vec![
            TableRow {
                label: "a".into(),
                summary: summary(0.403_35, 0.82, 1.3, 0.043, 0.014, 0.1),
            },
            TableRow {
                label: "b".into(),
                summary: summary(0.349, 0.814, 1.4, 0.05, 0.013, 0.1),
            },
        ];
        let table = render_table(&rows);
        assert!(table.contains("*40.3(4.3)"), "table was:\n{table}");
        assert!(table.contains("*82.0(1.4)"));
        assert!(table.contains("*1.3(0.1)"));
        assert!(table.contains("34.9(5.0)"));
        assert!(!table.contains("*34.9"));
    }

    #[test]
    fn single_row_table_is_trivially_best() {
        let rows = vec![TableRow {
            label: "only".into(),
            summary: MetricSummary {
                mean: FoldMetrics {
                    acc0: 0.5,
                    acc1: 0.9,
                    mse: 1.0,
                },
                std: FoldMetrics {
                    acc0: 0.0,
                    acc1: 0.0,
                    mse: 0.0,
                },
            },
        }];
        let table = render_table(&rows);
        assert_eq!(table.matches('*').count(), 3);
    }
}
