//! Gradient-boosted decision trees for binary classification, trained with
//! exact greedy splits on first- and second-order loss statistics, plus
//! stratified cross-validation and backward feature elimination.

use crate::metrics::{self, MetricsError};
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("model expects {expected} features, got {got}")]
    FeatureCountMismatch { expected: usize, got: usize },
    #[error("labels must be 0 or 1, found {0}")]
    BadLabel(u8),
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("label/sample count mismatch: {labels} labels for {rows} rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("unsupported model format version {0}")]
    VersionMismatch(u32),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which child receives rows whose split feature is NaN at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
}

/// A regression tree node. Rows with feature value strictly below the
/// threshold go left, the rest go right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
        default_branch: Branch,
    },
    Leaf {
        weight: f64,
    },
}

impl TreeNode {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        match self {
            TreeNode::Leaf { weight } => *weight,
            TreeNode::Split { feature_index, threshold, left, right, default_branch } => {
                let v = row[*feature_index];
                let go_left = if v.is_nan() {
                    *default_branch == Branch::Left
                } else {
                    v < *threshold
                };
                if go_left {
                    left.predict_row(row)
                } else {
                    right.predict_row(row)
                }
            }
        }
    }

    fn count_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.count_leaves() + right.count_leaves(),
        }
    }
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub min_child_hessian: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            n_trees: 60,
            max_depth: 3,
            learning_rate: 0.1,
            l2_lambda: 1.0,
            min_child_hessian: 1e-3,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<(), GbmError> {
        if self.n_trees == 0 {
            return Err(GbmError::InvalidConfig("n_trees must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(GbmError::InvalidConfig("max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbmError::InvalidConfig(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(GbmError::InvalidConfig(format!(
                "l2_lambda must be non-negative, got {}",
                self.l2_lambda
            )));
        }
        if !(self.min_child_hessian >= 0.0 && self.min_child_hessian.is_finite()) {
            return Err(GbmError::InvalidConfig(format!(
                "min_child_hessian must be non-negative, got {}",
                self.min_child_hessian
            )));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(GbmError::InvalidConfig(format!(
                "subsample must be in (0, 1], got {}",
                self.subsample
            )));
        }
        Ok(())
    }

    /// Compact key=value rendering for summaries and model ids.
    pub fn describe(&self) -> String {
        format!(
            "trees={} depth={} lr={} lambda={} min_h={} subsample={}",
            self.n_trees,
            self.max_depth,
            self.learning_rate,
            self.l2_lambda,
            self.min_child_hessian,
            self.subsample
        )
    }
}

/// The hyperparameter combinations explored by the model zoo: tree depth
/// {2, 3, 4} by learning rate {0.05, 0.1, 0.3} by L2 strength {1, 5}.
pub fn hyperparameter_grid() -> Vec<BoostConfig> {
    let mut grid = Vec::new();
    for &max_depth in &[2usize, 3, 4] {
        for &learning_rate in &[0.05f64, 0.1, 0.3] {
            for &l2_lambda in &[1.0f64, 5.0] {
                grid.push(BoostConfig { max_depth, learning_rate, l2_lambda, ..BoostConfig::default() });
            }
        }
    }
    grid
}

fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m).exp())
}

/// A fitted boosted-tree model.
#[derive(Debug, Clone)]
pub struct BoostedModel {
    base_score: f64,
    trees: Vec<TreeNode>,
    n_features: usize,
    feature_names: Vec<String>,
    config: BoostConfig,
    train_loss: Vec<f64>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    base_score: f64,
    n_features: usize,
    feature_names: Vec<String>,
    config: BoostConfig,
    trees: Vec<TreeNode>,
}

struct SplitChoice {
    feature_index: usize,
    threshold: f64,
    gain: f64,
    left_rows: Vec<usize>,
    right_rows: Vec<usize>,
    default_branch: Branch,
}

fn best_split(
    x: &Array2<f64>,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    cfg: &BoostConfig,
) -> Option<SplitChoice> {
    let lambda = cfg.l2_lambda;
    let (mut g_total, mut h_total) = (0.0f64, 0.0f64);
    for &r in rows {
        g_total += grad[r];
        h_total += hess[r];
    }
    let parent_score = g_total * g_total / (h_total + lambda);

    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = Vec::with_capacity(rows.len());
    for f in 0..x.ncols() {
        order.clear();
        order.extend_from_slice(rows);
        order.sort_unstable_by(|&a, &b| {
            x[[a, f]].partial_cmp(&x[[b, f]]).expect("features are finite")
        });
        let (mut gl, mut hl) = (0.0f64, 0.0f64);
        for i in 0..order.len() - 1 {
            gl += grad[order[i]];
            hl += hess[order[i]];
            let v = x[[order[i], f]];
            let v_next = x[[order[i + 1], f]];
            if !(v_next > v) {
                continue;
            }
            let (gr, hr) = (g_total - gl, h_total - hl);
            if hl < cfg.min_child_hessian || hr < cfg.min_child_hessian {
                continue;
            }
            let gain = 0.5
                * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score);
            if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                let threshold = v + 0.5 * (v_next - v);
                best = Some(SplitChoice {
                    feature_index: f,
                    threshold,
                    gain,
                    left_rows: Vec::new(),
                    right_rows: Vec::new(),
                    default_branch: if hl >= hr { Branch::Left } else { Branch::Right },
                });
            }
        }
    }

    best.map(|mut choice| {
        for &r in rows {
            if x[[r, choice.feature_index]] < choice.threshold {
                choice.left_rows.push(r);
            } else {
                choice.right_rows.push(r);
            }
        }
        choice
    })
}

fn build_node(
    x: &Array2<f64>,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    depth: usize,
    cfg: &BoostConfig,
) -> TreeNode {
    let leaf = |rows: &[usize]| {
        let g: f64 = rows.iter().map(|&r| grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| hess[r]).sum();
        TreeNode::Leaf { weight: -g / (h + cfg.l2_lambda) }
    };
    if depth >= cfg.max_depth || rows.len() < 2 {
        return leaf(rows);
    }
    match best_split(x, rows, grad, hess, cfg) {
        Some(choice) => TreeNode::Split {
            feature_index: choice.feature_index,
            threshold: choice.threshold,
            left: Box::new(build_node(x, &choice.left_rows, grad, hess, depth + 1, cfg)),
            right: Box::new(build_node(x, &choice.right_rows, grad, hess, depth + 1, cfg)),
            default_branch: choice.default_branch,
        },
        None => leaf(rows),
    }
}

fn validate_inputs(x: &Array2<f64>, y: &[u8]) -> Result<(), GbmError> {
    if x.nrows() != y.len() {
        return Err(GbmError::LengthMismatch { labels: y.len(), rows: x.nrows() });
    }
    if x.nrows() < 4 {
        return Err(GbmError::TooFewSamples { needed: 4, got: x.nrows() });
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 1) {
        return Err(GbmError::BadLabel(bad));
    }
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(GbmError::NonFiniteFeature { row, col });
        }
    }
    Ok(())
}

fn mean_log_loss(margins: &[f64], y: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &l)| {
            let p = sigmoid(m).clamp(1e-15, 1.0 - 1e-15);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / y.len() as f64
}

/// Fit a boosted-tree classifier. Single-class labels produce a constant
/// model at the smoothed class-prior log-odds, with no trees.
pub fn fit(x: &Array2<f64>, y: &[u8], cfg: &BoostConfig) -> Result<BoostedModel, GbmError> {
    cfg.validate()?;
    validate_inputs(x, y)?;
    let n = y.len();
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let default_names = (0..x.ncols()).map(|f| format!("f{f}")).collect();

    if n_pos == 0 || n_pos == n {
        let base = ((n_pos as f64 + 0.5) / ((n - n_pos) as f64 + 0.5)).ln();
        return Ok(BoostedModel {
            base_score: base,
            trees: Vec::new(),
            n_features: x.ncols(),
            feature_names: default_names,
            config: cfg.clone(),
            train_loss: Vec::new(),
        });
    }

    let prior = n_pos as f64 / n as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut train_loss = vec![mean_log_loss(&margins, y)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i] as f64;
            hess[i] = p * (1.0 - p);
        }
        let rows: Vec<usize> = if cfg.subsample < 1.0 {
            let take = ((cfg.subsample * n as f64).floor() as usize).max(1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(take);
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let tree = build_node(x, &rows, &grad, &hess, 0, cfg);
        for i in 0..n {
            margins[i] += cfg.learning_rate * tree.predict_row(x.row(i));
        }
        train_loss.push(mean_log_loss(&margins, y));
        trees.push(tree);
    }

    Ok(BoostedModel {
        base_score,
        trees,
        n_features: x.ncols(),
        feature_names: default_names,
        config: cfg.clone(),
        train_loss,
    })
}

impl BoostedModel {
    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn config(&self) -> &BoostConfig {
        &self.config
    }

    /// Mean logistic loss on the training set, one entry before boosting
    /// and one after each tree. Empty for constant models and loaded models.
    pub fn train_loss(&self) -> &[f64] {
        &self.train_loss
    }

    pub fn total_leaves(&self) -> usize {
        self.trees.iter().map(TreeNode::count_leaves).sum()
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self, GbmError> {
        if names.len() != self.n_features {
            return Err(GbmError::FeatureCountMismatch {
                expected: self.n_features,
                got: names.len(),
            });
        }
        self.feature_names = names;
        Ok(self)
    }

    /// Raw additive score: base plus learning-rate-scaled tree outputs.
    pub fn predict_margin(&self, x: &Array2<f64>) -> Result<Vec<f64>, GbmError> {
        if x.ncols() != self.n_features {
            return Err(GbmError::FeatureCountMismatch {
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        let lr = self.config.learning_rate;
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let tree_sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
                self.base_score + lr * tree_sum
            })
            .collect())
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Vec<f64>, GbmError> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), GbmError> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            base_score: self.base_score,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            config: self.config.clone(),
            trees: self.trees.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| GbmError::MalformedModel(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BoostedModel, GbmError> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GbmError::MalformedModel(e.to_string()))?;
        let version = value["format_version"]
            .as_u64()
            .ok_or_else(|| GbmError::MalformedModel("missing format_version".into()))?;
        if version != MODEL_FORMAT_VERSION as u64 {
            return Err(GbmError::VersionMismatch(version as u32));
        }
        let file: ModelFile = serde_json::from_value(value)
            .map_err(|e| GbmError::MalformedModel(e.to_string()))?;
        if file.feature_names.len() != file.n_features {
            return Err(GbmError::MalformedModel(format!(
                "{} feature names for {} features",
                file.feature_names.len(),
                file.n_features
            )));
        }
        file.config.validate()?;
        Ok(BoostedModel {
            base_score: file.base_score,
            trees: file.trees,
            n_features: file.n_features,
            feature_names: file.feature_names,
            config: file.config,
            train_loss: Vec::new(),
        })
    }
}

/// Cross-validation outcome: per-fold validation AUCs and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

/// Deterministic stratified k-fold assignment: within each class the
/// indices are shuffled under the config seed and dealt round-robin.
fn fold_assignment(y: &[u8], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in y.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for class_rows in &mut by_class {
        class_rows.shuffle(&mut rng);
        for (pos, &idx) in class_rows.iter().enumerate() {
            folds[pos % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

/// Stratified k-fold cross-validation AUC with the given hyperparameters.
/// Each class must supply at least one sample per fold.
pub fn kfold_cv(x: &Array2<f64>, y: &[u8], cfg: &BoostConfig, k: usize) -> Result<CvResult, GbmError> {
    cfg.validate()?;
    validate_inputs(x, y)?;
    if k < 2 {
        return Err(GbmError::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let minority = n_pos.min(y.len() - n_pos);
    if minority < k {
        return Err(GbmError::TooFewSamples { needed: k, got: minority });
    }

    let folds = fold_assignment(y, k, cfg.seed);
    let mut fold_aucs = Vec::with_capacity(k);
    for fold in &folds {
        let in_fold: std::collections::BTreeSet<usize> = fold.iter().copied().collect();
        let train_rows: Vec<usize> = (0..y.len()).filter(|i| !in_fold.contains(i)).collect();
        let x_train = x.select(Axis(0), &train_rows);
        let y_train: Vec<u8> = train_rows.iter().map(|&i| y[i]).collect();
        let x_test = x.select(Axis(0), fold);
        let y_test: Vec<u8> = fold.iter().map(|&i| y[i]).collect();
        let model = fit(&x_train, &y_train, cfg)?;
        let probs = model.predict_proba(&x_test)?;
        fold_aucs.push(metrics::auc(&probs, &y_test)?);
    }
    let mean_auc = fold_aucs.iter().sum::<f64>() / k as f64;
    Ok(CvResult { fold_aucs, mean_auc })
}

/// One elimination step: which original feature was dropped and the mean
/// CV AUC of the remaining subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStep {
    pub removed_feature: usize,
    pub mean_auc: f64,
}

/// Outcome of backward elimination.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub baseline_auc: f64,
    pub steps: Vec<SelectionStep>,
    pub best_subset: Vec<usize>,
    pub best_auc: f64,
}

/// Backward feature elimination: starting from all features, repeatedly
/// drop the feature whose removal maximizes the mean CV AUC (ties to the
/// lowest index), down to `min_features`. The best subset along the way
/// wins; ties keep the earlier, larger subset.
pub fn backward_feature_selection(
    x: &Array2<f64>,
    y: &[u8],
    cfg: &BoostConfig,
    k: usize,
    min_features: usize,
) -> Result<SelectionResult, GbmError> {
    let min_features = min_features.max(1);
    if x.ncols() < min_features {
        return Err(GbmError::InvalidConfig(format!(
            "cannot keep {min_features} of {} features",
            x.ncols()
        )));
    }
    let baseline_auc = kfold_cv(x, y, cfg, k)?.mean_auc;
    let mut current: Vec<usize> = (0..x.ncols()).collect();
    let mut best_subset = current.clone();
    let mut best_auc = baseline_auc;
    let mut steps = Vec::new();

    while current.len() > min_features {
        let candidates: Vec<Vec<usize>> = (0..current.len())
            .map(|drop| {
                current
                    .iter()
                    .enumerate()
                    .filter(|(pos, _)| *pos != drop)
                    .map(|(_, &f)| f)
                    .collect()
            })
            .collect();
        let aucs: Vec<Result<f64, GbmError>> = candidates
            .par_iter()
            .map(|subset| {
                let x_sub = x.select(Axis(1), subset);
                Ok(kfold_cv(&x_sub, y, cfg, k)?.mean_auc)
            })
            .collect();
        let mut best_drop: Option<(f64, usize)> = None;
        for (drop, auc) in aucs.into_iter().enumerate() {
            let auc = auc?;
            if best_drop.map_or(true, |(b, _)| auc > b) {
                best_drop = Some((auc, drop));
            }
        }
        let (auc, drop) = best_drop.expect("at least one candidate");
        let removed = current.remove(drop);
        steps.push(SelectionStep { removed_feature: removed, mean_auc: auc });
        if auc > best_auc {
            best_auc = auc;
            best_subset = current.clone();
        }
    }

    Ok(SelectionResult { baseline_auc, steps, best_subset, best_auc })
}

/// One model-zoo row for the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ZooEntry {
    pub model_id: String,
    pub hyperparameters: String,
    pub mean_cv_auc: f64,
    pub selected_features: Vec<String>,
}

/// Write the zoo summary CSV with header
/// `model_id,hyperparameters,mean_cv_auc,selected_features`; feature names
/// are joined with semicolons.
pub fn write_zoo_summary(entries: &[ZooEntry], path: &Path) -> Result<(), GbmError> {
    let mut writer = csv::Writer::from_path(path).map_err(zoo_csv_err)?;
    writer
        .write_record(["model_id", "hyperparameters", "mean_cv_auc", "selected_features"])
        .map_err(zoo_csv_err)?;
    for e in entries {
        writer
            .write_record([
                e.model_id.as_str(),
                e.hyperparameters.as_str(),
                &e.mean_cv_auc.to_string(),
                &e.selected_features.join(";"),
            ])
            .map_err(zoo_csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn zoo_csv_err(e: csv::Error) -> GbmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GbmError::Io(io),
        other => GbmError::MalformedModel(format!("{other:?}")),
    }
}
