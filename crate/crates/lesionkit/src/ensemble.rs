//! Greedy with-replacement ensemble selection over validation predictions,
//! plus per-finding averaging of multi-view probabilities.

use crate::metrics::{self, MetricsError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no predictions to group")]
    EmptyGroup,
    #[error("unknown model id {0}")]
    UnknownModelId(String),
    #[error("inconsistent prediction table: {0}")]
    TableMismatch(String),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Validation probabilities of several models over the same lesions.
#[derive(Debug, Clone)]
pub struct PredictionTable {
    model_ids: Vec<String>,
    matrix: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

impl PredictionTable {
    /// One row per model, aligned to one label per lesion. Probabilities
    /// must be finite and within [0, 1]; model ids must be unique.
    pub fn new(
        model_ids: Vec<String>,
        matrix: Vec<Vec<f64>>,
        labels: Vec<u8>,
    ) -> Result<Self, EnsembleError> {
        if model_ids.is_empty() {
            return Err(EnsembleError::TableMismatch("no models".into()));
        }
        if model_ids.len() != matrix.len() {
            return Err(EnsembleError::TableMismatch(format!(
                "{} model ids but {} prediction rows",
                model_ids.len(),
                matrix.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &model_ids {
            if !seen.insert(id) {
                return Err(EnsembleError::TableMismatch(format!("duplicate model id {id}")));
            }
        }
        if labels.is_empty() {
            return Err(EnsembleError::TableMismatch("no lesions".into()));
        }
        for (id, row) in model_ids.iter().zip(&matrix) {
            if row.len() != labels.len() {
                return Err(EnsembleError::TableMismatch(format!(
                    "model {id} has {} predictions for {} lesions",
                    row.len(),
                    labels.len()
                )));
            }
            if let Some(bad) = row.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
                return Err(EnsembleError::TableMismatch(format!(
                    "model {id} has probability {bad} outside [0, 1]"
                )));
            }
        }
        Ok(PredictionTable { model_ids, matrix, labels })
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn predictions(&self, model_index: usize) -> &[f64] {
        &self.matrix[model_index]
    }
}

/// Result of greedy selection: per-model pick counts, the weights they
/// imply (count / total picks), and the accepted-AUC trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub model_ids: Vec<String>,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub auc_trace: Vec<f64>,
}

/// Greedy selection with replacement. Each iteration scores, for every
/// candidate model, the validation AUC of the count-weighted mean with one
/// more copy of that model, and accepts the best candidate (ties go to the
/// lowest model index) unless it would lower the current AUC. Stops after
/// `patience` consecutive iterations whose improvement stays below 1e-6, or
/// at `max_iters`.
pub fn greedy_select(
    table: &PredictionTable,
    max_iters: usize,
    patience: usize,
) -> Result<EnsembleWeights, EnsembleError> {
    let n_models = table.model_ids.len();
    let n_lesions = table.labels.len();
    let mut counts = vec![0u64; n_models];
    let mut sums = vec![0.0f64; n_lesions];
    let mut total = 0u64;
    let mut current_auc = f64::NEG_INFINITY;
    let mut auc_trace = Vec::new();
    let mut stale = 0usize;

    let mut candidate = vec![0.0f64; n_lesions];
    for _ in 0..max_iters {
        let mut best: Option<(f64, usize)> = None;
        for m in 0..n_models {
            let denom = (total + 1) as f64;
            for (c, (s, p)) in candidate.iter_mut().zip(sums.iter().zip(&table.matrix[m])) {
                *c = (s + p) / denom;
            }
            let auc = metrics::auc(&candidate, &table.labels)?;
            if best.map_or(true, |(b, _)| auc > b) {
                best = Some((auc, m));
            }
        }
        let (best_auc, best_model) = best.expect("at least one model");
        if best_auc >= current_auc {
            let improvement = best_auc - current_auc;
            counts[best_model] += 1;
            total += 1;
            for (s, p) in sums.iter_mut().zip(&table.matrix[best_model]) {
                *s += p;
            }
            current_auc = best_auc;
            auc_trace.push(best_auc);
            if improvement < 1e-6 {
                stale += 1;
            } else {
                stale = 0;
            }
        } else {
            stale += 1;
        }
        if stale >= patience {
            break;
        }
    }

    let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(EnsembleWeights { model_ids: table.model_ids.clone(), counts, weights, auc_trace })
}

/// Count-weighted mean of per-model predictions. Every model with a nonzero
/// count must appear in `predictions`, each with equally many entries.
pub fn ensemble_predict(
    weights: &EnsembleWeights,
    predictions: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<f64>, EnsembleError> {
    let total: u64 = weights.counts.iter().sum();
    if total == 0 {
        return Err(EnsembleError::TableMismatch("ensemble has no picks".into()));
    }
    let mut blended: Option<Vec<f64>> = None;
    for (id, &count) in weights.model_ids.iter().zip(&weights.counts) {
        if count == 0 {
            continue;
        }
        let preds = predictions
            .get(id)
            .ok_or_else(|| EnsembleError::UnknownModelId(id.clone()))?;
        let acc = blended.get_or_insert_with(|| vec![0.0; preds.len()]);
        if acc.len() != preds.len() {
            return Err(EnsembleError::TableMismatch(format!(
                "model {id} has {} predictions, expected {}",
                preds.len(),
                acc.len()
            )));
        }
        // Weighting by count/total keeps a single-member blend identical to
        // that member's own predictions.
        let w = count as f64 / total as f64;
        for (b, p) in acc.iter_mut().zip(preds) {
            *b += w * p;
        }
    }
    Ok(blended.expect("total > 0 implies at least one counted model"))
}

/// One model's probability for one view of one finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub case_id: String,
    pub finding_id: u32,
    pub view_index: u32,
    pub probability: f64,
}

/// Per-finding score after view averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct FindingScore {
    pub case_id: String,
    pub finding_id: u32,
    pub score: f64,
}

/// Unweighted mean probability per (case, finding). Summation runs in
/// ascending view-index order, so any permutation of the input produces a
/// bit-identical result. Output is sorted by (case, finding).
pub fn multiview_average(preds: &[ViewPrediction]) -> Result<Vec<FindingScore>, EnsembleError> {
    if preds.is_empty() {
        return Err(EnsembleError::EmptyGroup);
    }
    let mut sorted: Vec<&ViewPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.case_id, a.finding_id, a.view_index).cmp(&(&b.case_id, b.finding_id, b.view_index))
    });
    let mut out: Vec<FindingScore> = Vec::new();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, p) in sorted.iter().enumerate() {
        sum += p.probability;
        count += 1;
        let next = sorted.get(i + 1);
        let group_ends = next.map_or(true, |n| {
            (&n.case_id, n.finding_id) != (&p.case_id, p.finding_id)
        });
        if group_ends {
            out.push(FindingScore {
                case_id: p.case_id.clone(),
                finding_id: p.finding_id,
                score: sum / count as f64,
            });
            sum = 0.0;
            count = 0;
        }
    }
    Ok(out)
}

/// A prediction-exchange row: one model, one view of one finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub model_id: String,
    pub case_id: String,
    pub finding_id: u32,
    pub view_index: u32,
    pub probability: f64,
}

pub fn write_predictions_csv(rows: &[PredictionRow], path: &Path) -> Result<(), EnsembleError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>, EnsembleError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(csv_err)?);
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> EnsembleError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EnsembleError::Io(io),
        other => EnsembleError::MalformedFile(format!("{other:?}")),
    }
}

pub fn write_weights(weights: &EnsembleWeights, path: &Path) -> Result<(), EnsembleError> {
    let json = serde_json::to_string_pretty(weights)
        .map_err(|e| EnsembleError::MalformedFile(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<EnsembleWeights, EnsembleError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EnsembleError::MalformedFile(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(matrix: Vec<Vec<f64>>, labels: Vec<u8>) -> PredictionTable {
        let ids = (0..matrix.len()).map(|i| format!("m{i}")).collect();
        PredictionTable::new(ids, matrix, labels).unwrap()
    }

    #[test]
    fn single_model_gets_weight_one_and_its_own_auc() {
        let t = table(vec![vec![0.9, 0.8, 0.2, 0.1]], vec![1, 1, 0, 0]);
        let w = greedy_select(&t, 50, 5).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert!((w.auc_trace[0] - 1.0).abs() < 1e-12);
        assert!(w.auc_trace.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn perfect_model_is_picked_first_and_final_auc_is_one() {
        let t = table(
            vec![
                vec![0.6, 0.4, 0.5, 0.5],
                vec![0.9, 0.8, 0.2, 0.1],
                vec![0.5, 0.5, 0.5, 0.5],
            ],
            vec![1, 1, 0, 0],
        );
        let w = greedy_select(&t, 60, 5).unwrap();
        assert!(w.counts[1] >= 1);
        assert!((w.auc_trace[0] - 1.0).abs() < 1e-12, "first pick must reach AUC 1.0");
        assert!((w.auc_trace.last().unwrap() - 1.0).abs() < 1e-12);
    }

    /// Independent step-by-step simulation with its own pair-count AUC.
    fn simulate_greedy(
        matrix: &[Vec<f64>],
        labels: &[u8],
        max_iters: usize,
        patience: usize,
    ) -> (Vec<u64>, Vec<f64>) {
        let pair_auc = |scores: &[f64]| {
            let (mut num, mut pairs) = (0.0f64, 0u64);
            for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
                for (&sj, &lj) in scores[i + 1..].iter().zip(&labels[i + 1..]) {
                    let (sp, sn) = match (li, lj) {
                        (1, 0) => (si, sj),
                        (0, 1) => (sj, si),
                        _ => continue,
                    };
                    pairs += 1;
                    if sp > sn {
                        num += 1.0;
                    } else if sp == sn {
                        num += 0.5;
                    }
                }
            }
            num / pairs as f64
        };
        let n = labels.len();
        let mut counts = vec![0u64; matrix.len()];
        let mut trace = Vec::new();
        let mut current = f64::NEG_INFINITY;
        let mut stale = 0usize;
        for _ in 0..max_iters {
            let total: u64 = counts.iter().sum();
            let mut best: Option<(f64, usize)> = None;
            for (m, row) in matrix.iter().enumerate() {
                let cand: Vec<f64> = (0..n)
                    .map(|l| {
                        let mut s = row[l];
                        for (mm, rr) in matrix.iter().enumerate() {
                            s += counts[mm] as f64 * rr[l];
                        }
                        s / (total + 1) as f64
                    })
                    .collect();
                let a = pair_auc(&cand);
                if best.map_or(true, |(b, _)| a > b) {
                    best = Some((a, m));
                }
            }
            let (a, m) = best.unwrap();
            if a >= current {
                let improvement = a - current;
                counts[m] += 1;
                current = a;
                trace.push(a);
                if improvement < 1e-6 {
                    stale += 1;
                } else {
                    stale = 0;
                }
            } else {
                stale += 1;
            }
            if stale >= patience {
                break;
            }
        }
        (counts, trace)
    }

    #[test]
    fn greedy_matches_the_independent_simulation_on_a_hand_table() {
        let matrix = vec![
            vec![0.62, 0.55, 0.48, 0.71, 0.30, 0.45, 0.52, 0.38],
            vec![0.80, 0.40, 0.60, 0.55, 0.35, 0.50, 0.45, 0.42],
            vec![0.58, 0.70, 0.30, 0.65, 0.45, 0.25, 0.60, 0.33],
        ];
        let labels = vec![1u8, 1, 0, 1, 0, 0, 1, 0];
        let t = table(matrix.clone(), labels.clone());
        let w = greedy_select(&t, 40, 5).unwrap();
        let (sim_counts, sim_trace) = simulate_greedy(&matrix, &labels, 40, 5);
        assert_eq!(w.counts, sim_counts);
        assert_eq!(w.auc_trace.len(), sim_trace.len());
        for (a, b) in w.auc_trace.iter().zip(&sim_trace) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(w.auc_trace.windows(2).all(|p| p[1] >= p[0]));
        // Final AUC beats or ties every singleton.
        for row in &matrix {
            let single = metrics::auc(row, &labels).unwrap();
            assert!(w.auc_trace.last().unwrap() >= &(single - 1e-9));
        }
        let total: u64 = w.counts.iter().sum();
        for (c, wt) in w.counts.iter().zip(&w.weights) {
            assert_eq!(*wt, *c as f64 / total as f64);
        }
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let t = table(vec![vec![0.2, 0.4]], vec![1, 1]);
        assert!(matches!(
            greedy_select(&t, 10, 5),
            Err(EnsembleError::Metrics(MetricsError::SingleClassLabels))
        ));
    }

    #[test]
    fn table_validation_rejects_bad_probabilities_and_shapes() {
        assert!(PredictionTable::new(
            vec!["a".into()],
            vec![vec![0.5, 1.5]],
            vec![0, 1]
        )
        .is_err());
        assert!(PredictionTable::new(vec!["a".into()], vec![vec![0.5]], vec![0, 1]).is_err());
        assert!(PredictionTable::new(
            vec!["a".into(), "a".into()],
            vec![vec![0.5], vec![0.5]],
            vec![0]
        )
        .is_err());
    }

    #[test]
    fn predict_with_unit_weight_reproduces_the_model() {
        let w = EnsembleWeights {
            model_ids: vec!["a".into(), "b".into()],
            counts: vec![3, 0],
            weights: vec![1.0, 0.0],
            auc_trace: vec![],
        };
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), vec![0.1, 0.7, 0.9]);
        let out = ensemble_predict(&w, &preds).unwrap();
        assert_eq!(out, vec![0.1, 0.7, 0.9]);
    }

    #[test]
    fn equal_weights_average_two_models() {
        let w = EnsembleWeights {
            model_ids: vec!["a".into(), "b".into()],
            counts: vec![1, 1],
            weights: vec![0.5, 0.5],
            auc_trace: vec![],
        };
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), vec![0.2]);
        preds.insert("b".to_string(), vec![0.8]);
        let out = ensemble_predict(&w, &preds).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blend_stays_within_per_lesion_prediction_bounds() {
        let w = EnsembleWeights {
            model_ids: vec!["a".into(), "b".into(), "c".into()],
            counts: vec![2, 5, 1],
            weights: vec![0.25, 0.625, 0.125],
            auc_trace: vec![],
        };
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), vec![0.2, 0.9]);
        preds.insert("b".to_string(), vec![0.4, 0.3]);
        preds.insert("c".to_string(), vec![0.6, 0.5]);
        let out = ensemble_predict(&w, &preds).unwrap();
        for (l, &b) in out.iter().enumerate() {
            let column: Vec<f64> = preds.values().map(|v| v[l]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(b >= lo && b <= hi);
        }
    }

    #[test]
    fn missing_model_predictions_are_an_error() {
        let w = EnsembleWeights {
            model_ids: vec!["a".into()],
            counts: vec![1],
            weights: vec![1.0],
            auc_trace: vec![],
        };
        let preds = BTreeMap::new();
        assert!(matches!(
            ensemble_predict(&w, &preds),
            Err(EnsembleError::UnknownModelId(_))
        ));
    }

    fn vp(case: &str, finding: u32, view: u32, p: f64) -> ViewPrediction {
        ViewPrediction {
            case_id: case.to_string(),
            finding_id: finding,
            view_index: view,
            probability: p,
        }
    }

    #[test]
    fn identical_view_predictions_average_to_themselves() {
        let preds = vec![vp("c1", 0, 0, 0.37), vp("c1", 0, 1, 0.37), vp("c1", 0, 2, 0.37)];
        let out = multiview_average(&preds).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.37).abs() < 1e-15);
    }

    #[test]
    fn three_views_average_arithmetically() {
        let preds = vec![vp("c1", 2, 0, 0.2), vp("c1", 2, 1, 0.4), vp("c1", 2, 2, 0.9)];
        let out = multiview_average(&preds).unwrap();
        assert!((out[0].score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn view_permutation_gives_bitwise_identical_scores() {
        let mut preds = vec![
            vp("c2", 1, 0, 0.11),
            vp("c2", 1, 1, 0.52),
            vp("c1", 0, 0, 0.93),
            vp("c2", 1, 2, 0.78),
            vp("c1", 0, 1, 0.05),
        ];
        let a = multiview_average(&preds).unwrap();
        preds.reverse();
        let b = multiview_average(&preds).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.case_id, y.case_id);
            assert_eq!(x.finding_id, y.finding_id);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
    }

    #[test]
    fn empty_prediction_list_is_an_error() {
        assert!(matches!(multiview_average(&[]), Err(EnsembleError::EmptyGroup)));
    }

    #[test]
    fn prediction_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let rows = vec![
            PredictionRow {
                model_id: "cnn_dak".into(),
                case_id: "case001".into(),
                finding_id: 1,
                view_index: 0,
                probability: 0.625,
            },
            PredictionRow {
                model_id: "cnn_dak".into(),
                case_id: "case001".into(),
                finding_id: 1,
                view_index: 1,
                probability: 0.125,
            },
        ];
        write_predictions_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model_id,case_id,finding_id,view_index,probability\n"));
        let back = read_predictions_csv(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn weights_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let w = EnsembleWeights {
            model_ids: vec!["a".into(), "b".into()],
            counts: vec![3, 1],
            weights: vec![0.75, 0.25],
            auc_trace: vec![0.8, 0.85, 0.85, 0.85],
        };
        write_weights(&w, &path).unwrap();
        assert_eq!(read_weights(&path).unwrap(), w);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn greedy_trace_is_non_decreasing_and_beats_singletons(
            rows in proptest::collection::vec(
                proptest::collection::vec(0.0f64..=1.0, 6),
                1..4
            ),
            labels in proptest::collection::vec(0u8..=1, 6),
        ) {
            prop_assume!(labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1));
            let t = table(rows.clone(), labels.clone());
            let w = greedy_select(&t, 30, 5).unwrap();
            prop_assert!(w.auc_trace.windows(2).all(|p| p[1] >= p[0]));
            let last = *w.auc_trace.last().unwrap();
            for row in &rows {
                let single = metrics::auc(row, &labels).unwrap();
                prop_assert!(last >= single - 1e-9);
            }
            let total: u64 = w.counts.iter().sum();
            let sum: f64 = w.weights.iter().sum();
            prop_assert!(total > 0);
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
