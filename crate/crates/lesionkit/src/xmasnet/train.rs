//! Minibatch training with on-the-fly mirroring and early stopping on the
//! multiview validation AUC: per-view probabilities are averaged per finding
//! before the AUC is computed, matching how the model is used downstream.

use super::{adam_step, layers, AdamState, NetworkConfig, TrainConfig, XmasNet, XmasNetError};
use crate::augment::{SampleTensor, SAMPLE_LEN, SLICE_SIZE};
use crate::ensemble::{multiview_average, ViewPrediction};
use crate::metrics;
use ndarray::{s, Array4, ArrayView1, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// In-memory sample set: one 3x32x32 tensor row per sample plus the
/// provenance needed to group views back into findings.
pub struct Dataset {
    inputs: Array4<f32>,
    labels: Vec<u8>,
    keys: Vec<(String, u32, u32)>,
}

impl Dataset {
    /// Requires every sample to carry a label; samples of one finding must
    /// all agree on it.
    pub fn from_samples(samples: &[SampleTensor]) -> Result<Dataset, XmasNetError> {
        if samples.is_empty() {
            return Err(XmasNetError::BadDataset("no samples".into()));
        }
        let inputs = samples_to_array(samples)?;
        let mut labels = Vec::with_capacity(samples.len());
        let mut keys = Vec::with_capacity(samples.len());
        for sample in samples {
            let label = sample.label.ok_or_else(|| {
                XmasNetError::BadDataset(format!(
                    "sample for case {} finding {} has no label",
                    sample.case_id, sample.finding_id
                ))
            })?;
            labels.push(label);
            keys.push((sample.case_id.clone(), sample.finding_id, sample.view_index));
        }
        let set = Dataset { inputs, labels, keys };
        set.group_labels()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn keys(&self) -> &[(String, u32, u32)] {
        &self.keys
    }

    /// Label per (case, finding) group, rejecting internal disagreement.
    fn group_labels(&self) -> Result<BTreeMap<(String, u32), u8>, XmasNetError> {
        let mut groups = BTreeMap::new();
        for ((case_id, finding_id, _), &label) in self.keys.iter().zip(&self.labels) {
            let prior = groups.insert((case_id.clone(), *finding_id), label);
            if let Some(p) = prior {
                if p != label {
                    return Err(XmasNetError::BadDataset(format!(
                        "case {case_id} finding {finding_id} carries labels {p} and {label}"
                    )));
                }
            }
        }
        Ok(groups)
    }
}

fn samples_to_array(samples: &[SampleTensor]) -> Result<Array4<f32>, XmasNetError> {
    let mut inputs = Array4::<f32>::zeros((samples.len(), 3, SLICE_SIZE, SLICE_SIZE));
    for (i, sample) in samples.iter().enumerate() {
        if sample.data.len() != SAMPLE_LEN {
            return Err(XmasNetError::BadDataset(format!(
                "sample for case {} finding {} has {} scalars, expected {SAMPLE_LEN}",
                sample.case_id,
                sample.finding_id,
                sample.data.len()
            )));
        }
        inputs
            .index_axis_mut(Axis(0), i)
            .as_slice_mut()
            .expect("row contiguous")
            .copy_from_slice(&sample.data);
    }
    Ok(inputs)
}

/// One evaluation point in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Best snapshot by multiview validation AUC, plus the full history.
pub struct TrainedModel {
    pub model: XmasNet<f32>,
    pub best_val_auc: f64,
    pub best_step: u64,
    pub history: Vec<EvalPoint>,
}

/// Softmax probability of class 1, computed at f64 from the logit row.
fn prob_of_class_one(row: ArrayView1<'_, f32>) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    let mut p1 = 0.0f64;
    for (j, &l) in row.iter().enumerate() {
        let e = (f64::from(l) - max).exp();
        denom += e;
        if j == 1 {
            p1 = e;
        }
    }
    p1 / denom
}

/// Class-1 probability per row of `inputs`, evaluated in fixed-size chunks.
pub(crate) fn predict_probs(
    net: &XmasNet<f32>,
    inputs: &Array4<f32>,
    batch_size: usize,
) -> Result<Vec<f64>, XmasNetError> {
    let n = inputs.dim().0;
    let chunk_len = batch_size.max(1);
    let mut probs = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk_len).min(n);
        let chunk = inputs.slice(s![start..end, .., .., ..]).to_owned();
        let logits = net.forward_infer(&chunk)?;
        for i in 0..(end - start) {
            probs.push(prob_of_class_one(logits.row(i)));
        }
        start = end;
    }
    Ok(probs)
}

/// Class-1 probability per sample.
pub fn predict(
    net: &XmasNet<f32>,
    samples: &[SampleTensor],
    batch_size: usize,
) -> Result<Vec<f64>, XmasNetError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = samples_to_array(samples)?;
    predict_probs(net, &inputs, batch_size)
}

fn multiview_val_auc(
    net: &XmasNet<f32>,
    val: &Dataset,
    batch_size: usize,
) -> Result<f64, XmasNetError> {
    let probs = predict_probs(net, &val.inputs, batch_size)?;
    let preds: Vec<ViewPrediction> = val
        .keys
        .iter()
        .zip(&probs)
        .map(|((case_id, finding_id, view_index), &p)| ViewPrediction {
            case_id: case_id.clone(),
            finding_id: *finding_id,
            view_index: *view_index,
            probability: p,
        })
        .collect();
    let scores =
        multiview_average(&preds).map_err(|e| XmasNetError::BadDataset(e.to_string()))?;
    let group_labels = val.group_labels()?;
    let mut ys = Vec::with_capacity(scores.len());
    let mut ss = Vec::with_capacity(scores.len());
    for fs in &scores {
        ys.push(group_labels[&(fs.case_id.clone(), fs.finding_id)]);
        ss.push(fs.score);
    }
    Ok(metrics::auc(&ss, &ys)?)
}

/// Train a fresh network. Batches are drawn from a seeded shuffle that
/// reshuffles per epoch; each drawn sample is mirrored with the configured
/// probability. Every `eval_every` steps the multiview validation AUC is
/// measured; the best snapshot is kept and training stops early after
/// `patience` evaluations without improvement. Bit-identical across runs
/// with the same inputs and config.
pub fn train(
    config: &NetworkConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainedModel, XmasNetError> {
    config.validate()?;
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(XmasNetError::BadDataset("empty training or validation set".into()));
    }
    let val_groups = val_set.group_labels()?;
    if !val_groups.values().any(|&l| l == 0) || !val_groups.values().any(|&l| l == 1) {
        return Err(XmasNetError::Metrics(metrics::MetricsError::SingleClassLabels));
    }

    let mut net = XmasNet::<f32>::new(config.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&net.trainable_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let m = train_set.len();
    let mut order: Vec<usize> = (0..m).collect();
    let mut pos = m;
    let (c, s) = (config.input_channels, config.input_size);
    let mut batch_x = Array4::<f32>::zeros((cfg.batch_size, c, s, s));
    let mut batch_y = vec![0u8; cfg.batch_size];

    let mut best: Option<(f64, u64, XmasNet<f32>)> = None;
    let mut stale = 0u32;
    let mut history = Vec::new();

    for step in 1..=cfg.max_steps {
        for slot in 0..cfg.batch_size {
            if pos == m {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let idx = order[pos];
            pos += 1;
            let mirror = rng.gen_bool(cfg.mirror_probability);
            let src = train_set.inputs.index_axis(Axis(0), idx);
            let mut dst = batch_x.index_axis_mut(Axis(0), slot);
            if mirror {
                dst.assign(&src.slice(s![.., .., ..;-1]));
            } else {
                dst.assign(&src);
            }
            batch_y[slot] = train_set.labels[idx];
        }
        let (logits, cache) = net.forward_train(&batch_x)?;
        let (loss, probs) = layers::softmax_xent(&logits, &batch_y)?;
        let grad_logits = layers::softmax_xent_backward(&probs, &batch_y);
        let grads = net.backward(&cache, &grad_logits)?;
        {
            let mut params = net.trainable_slices_mut();
            adam_step(&mut params, &grads.slices(), &mut adam, cfg)?;
        }

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val_auc = multiview_val_auc(&net, val_set, cfg.batch_size)?;
            history.push(EvalPoint { step, train_loss: f64::from(loss), val_auc });
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_auc > *b);
            if improved {
                best = Some((val_auc, step, net.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (best_val_auc, best_step, model) = best.expect("training always evaluates at least once");
    Ok(TrainedModel { model, best_val_auc, best_step, history })
}
