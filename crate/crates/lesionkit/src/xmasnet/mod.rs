//! A small convolutional classifier for 32x32x3 lesion slices, written
//! directly on ndarray: two conv blocks (each conv -> batchnorm -> relu,
//! twice, then 2x2 max pooling) feeding three fully connected layers and a
//! softmax head. Forward, backward, and the optimizer are all explicit so
//! every gradient can be checked against finite differences.

mod adam;
pub mod gradcheck;
pub mod layers;
mod train;

pub use adam::{adam_step, AdamState};
pub use train::{predict, train, Dataset, EvalPoint, TrainedModel};

use ndarray::{Array1, Array2, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Floating point scalar the network can run at. Training and serialization
/// use f32; gradient checks run the same code at f64.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum XmasNetError {
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch too small for batch statistics")]
    DegenerateBatch,
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported model format version {0}")]
    VersionMismatch(u32),
    #[error("model payload does not match its checksum")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("bad dataset: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-topology network description: four 3x3 convolutions with two 2x2
/// poolings, then three fully connected layers ending in the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub conv_channels: [usize; 4],
    pub fc_sizes: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            input_size: 32,
            conv_channels: [32, 32, 64, 64],
            fc_sizes: [1024, 256, 2],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), XmasNetError> {
        if self.input_channels == 0 {
            return Err(XmasNetError::InvalidConfig("zero input channels".into()));
        }
        if self.input_size < 4 || self.input_size % 4 != 0 {
            return Err(XmasNetError::InvalidConfig(format!(
                "input size {} must be a positive multiple of 4 (two 2x2 poolings)",
                self.input_size
            )));
        }
        if self.conv_channels.contains(&0) || self.fc_sizes.contains(&0) {
            return Err(XmasNetError::InvalidConfig("zero-width layer".into()));
        }
        if self.fc_sizes[2] < 2 {
            return Err(XmasNetError::InvalidConfig("softmax head needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// Flattened feature count entering the first fully connected layer.
    pub fn flat_features(&self) -> usize {
        let s = self.input_size / 4;
        s * s * self.conv_channels[3]
    }

    pub fn num_classes(&self) -> usize {
        self.fc_sizes[2]
    }

    /// Output shape of every layer, spatial entries as (height, width,
    /// channels), fully connected entries as a single width.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let s = self.input_size;
        let c = self.conv_channels;
        vec![
            ("conv1".into(), vec![s, s, c[0]]),
            ("conv2".into(), vec![s, s, c[1]]),
            ("maxpool1".into(), vec![s / 2, s / 2, c[1]]),
            ("conv3".into(), vec![s / 2, s / 2, c[2]]),
            ("conv4".into(), vec![s / 2, s / 2, c[3]]),
            ("maxpool2".into(), vec![s / 4, s / 4, c[3]]),
            ("fc1".into(), vec![self.fc_sizes[0]]),
            ("fc2".into(), vec![self.fc_sizes[1]]),
            ("softmax".into(), vec![self.fc_sizes[2]]),
        ]
    }
}

/// Optimizer and loop settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: u32,
    pub mirror_probability: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_steps: 2000,
            eval_every: 50,
            patience: 10,
            mirror_probability: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), XmasNetError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(XmasNetError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(XmasNetError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(XmasNetError::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(XmasNetError::InvalidConfig("mirror_probability must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(XmasNetError::InvalidConfig(
                "batch_size, max_steps, and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer<T> {
    weight: Array4<T>,
    bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnLayer<T> {
    gamma: Array1<T>,
    beta: Array1<T>,
    running_mean: Array1<T>,
    running_var: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct FcLayer<T> {
    weight: Array2<T>,
    bias: Array1<T>,
}

/// The network: parameters plus batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct XmasNet<T> {
    config: NetworkConfig,
    conv: Vec<ConvLayer<T>>,
    bn: Vec<BnLayer<T>>,
    fc: Vec<FcLayer<T>>,
}

/// Activations the backward pass needs, captured by the training-mode
/// forward pass.
pub struct ForwardCache<T> {
    conv_in: Vec<Array4<T>>,
    bn_caches: Vec<layers::BnCache<T>>,
    bn_out: Vec<Array4<T>>,
    pool_argmax: Vec<Array4<u8>>,
    fc_in: Vec<Array2<T>>,
    fc_pre: Vec<Array2<T>>,
}

/// Gradients for every trainable tensor, flattened, in the same order as
/// [`XmasNet::trainable_slices_mut`].
pub struct Gradients<T> {
    tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn slices(&self) -> Vec<&[T]> {
        self.tensors.iter().map(|t| t.as_slice()).collect()
    }
}

impl<T: Scalar> XmasNet<T> {
    /// Fresh network with He-normal weights, zero biases, unit batchnorm.
    /// Weight draws happen at f64 so every scalar type sees the same values.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, XmasNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeroed(config);
        for layer in &mut net.conv {
            let fan_in = layer.weight.dim().1 * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for w in layer.weight.iter_mut() {
                *w = T::from_f64(dist.sample(&mut rng));
            }
        }
        for layer in &mut net.fc {
            let fan_in = layer.weight.dim().1;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for w in layer.weight.iter_mut() {
                *w = T::from_f64(dist.sample(&mut rng));
            }
        }
        for bn in &mut net.bn {
            bn.gamma.fill(T::one());
            bn.running_var.fill(T::one());
        }
        Ok(net)
    }

    fn zeroed(config: NetworkConfig) -> Self {
        let mut conv = Vec::new();
        let mut bn = Vec::new();
        let mut in_c = config.input_channels;
        for &ch in &config.conv_channels {
            conv.push(ConvLayer {
                weight: Array4::zeros((ch, in_c, 3, 3)),
                bias: Array1::zeros(ch),
            });
            bn.push(BnLayer {
                gamma: Array1::zeros(ch),
                beta: Array1::zeros(ch),
                running_mean: Array1::zeros(ch),
                running_var: Array1::zeros(ch),
            });
            in_c = ch;
        }
        let mut fc = Vec::new();
        let mut in_f = config.flat_features();
        for &f in &config.fc_sizes {
            fc.push(FcLayer {
                weight: Array2::zeros((f, in_f)),
                bias: Array1::zeros(f),
            });
            in_f = f;
        }
        XmasNet { config, conv, bn, fc }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Zero the final fully connected layer so every output is exactly the
    /// uniform distribution.
    pub fn zero_head(&mut self) {
        self.fc[2].weight.fill(T::zero());
        self.fc[2].bias.fill(T::zero());
    }

    fn check_input(&self, input: &Array4<T>) -> Result<(), XmasNetError> {
        let (_, c, h, w) = input.dim();
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(XmasNetError::ShapeMismatch(format!(
                "input {:?} does not match configured ({}, {s}, {s})",
                input.dim(),
                self.config.input_channels
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics normalize, running
    /// statistics update, and every activation the backward pass needs is
    /// cached. Returns logits.
    pub fn forward_train(
        &mut self,
        input: &Array4<T>,
    ) -> Result<(Array2<T>, ForwardCache<T>), XmasNetError> {
        self.check_input(input)?;
        let momentum = T::from_f64(BN_MOMENTUM);
        let eps = T::from_f64(BN_EPS);
        let mut cache = ForwardCache {
            conv_in: Vec::with_capacity(4),
            bn_caches: Vec::with_capacity(4),
            bn_out: Vec::with_capacity(4),
            pool_argmax: Vec::with_capacity(2),
            fc_in: Vec::with_capacity(3),
            fc_pre: Vec::with_capacity(2),
        };
        let mut cur = input.clone();
        for i in 0..4 {
            let conv_out = layers::conv2d_forward(&cur, &self.conv[i].weight, &self.conv[i].bias)?;
            cache.conv_in.push(cur);
            let BnLayer { gamma, beta, running_mean, running_var } = &mut self.bn[i];
            let (bn_out, bn_cache) = layers::batchnorm_forward_train(
                &conv_out,
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            )?;
            cache.bn_caches.push(bn_cache);
            cur = layers::relu_forward(&bn_out);
            cache.bn_out.push(bn_out);
            if i == 1 || i == 3 {
                let (pooled, argmax) = layers::maxpool_forward(&cur)?;
                cache.pool_argmax.push(argmax);
                cur = pooled;
            }
        }
        let n = cur.dim().0;
        let mut flat: Array2<T> = cur
            .into_shape_with_order((n, self.config.flat_features()))
            .expect("pooled activation contiguous");
        for i in 0..3 {
            let pre = layers::fc_forward(&flat, &self.fc[i].weight, &self.fc[i].bias)?;
            cache.fc_in.push(flat);
            if i < 2 {
                flat = layers::relu_forward(&pre);
                cache.fc_pre.push(pre);
            } else {
                flat = pre;
            }
        }
        Ok((flat, cache))
    }

    /// Inference-mode forward pass: running statistics normalize, nothing is
    /// mutated or cached. Returns logits.
    pub fn forward_infer(&self, input: &Array4<T>) -> Result<Array2<T>, XmasNetError> {
        self.check_input(input)?;
        let eps = T::from_f64(BN_EPS);
        let mut cur = input.clone();
        for i in 0..4 {
            let conv_out = layers::conv2d_forward(&cur, &self.conv[i].weight, &self.conv[i].bias)?;
            let bn = &self.bn[i];
            let bn_out = layers::batchnorm_forward_infer(
                &conv_out,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                eps,
            )?;
            cur = layers::relu_forward(&bn_out);
            if i == 1 || i == 3 {
                cur = layers::maxpool_forward(&cur)?.0;
            }
        }
        let n = cur.dim().0;
        let mut flat: Array2<T> = cur
            .into_shape_with_order((n, self.config.flat_features()))
            .expect("pooled activation contiguous");
        for i in 0..3 {
            let pre = layers::fc_forward(&flat, &self.fc[i].weight, &self.fc[i].bias)?;
            flat = if i < 2 { layers::relu_forward(&pre) } else { pre };
        }
        Ok(flat)
    }

    /// Backpropagate a logits gradient through the cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Array2<T>,
    ) -> Result<Gradients<T>, XmasNetError> {
        let mut fc_grads = Vec::with_capacity(3);
        let mut g2 = grad_logits.clone();
        for i in (0..3).rev() {
            let (gi, gw, gb) = layers::fc_backward(&cache.fc_in[i], &self.fc[i].weight, &g2)?;
            fc_grads.push((gw, gb));
            g2 = if i > 0 { layers::relu_backward(&cache.fc_pre[i - 1], &gi) } else { gi };
        }
        fc_grads.reverse();

        let n = g2.dim().0;
        let s4 = self.config.input_size / 4;
        let g_flat = g2
            .into_shape_with_order((n, self.config.conv_channels[3], s4, s4))
            .expect("gradient contiguous");
        let mut g4 = layers::maxpool_backward(&cache.pool_argmax[1], &g_flat)?;

        let mut conv_grads = Vec::with_capacity(4);
        let mut bn_grads = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let g_relu = layers::relu_backward(&cache.bn_out[i], &g4);
            let (g_bn, g_gamma, g_beta) =
                layers::batchnorm_backward(&cache.bn_caches[i], &self.bn[i].gamma, &g_relu)?;
            bn_grads.push((g_gamma, g_beta));
            let (g_in, g_w, g_b) =
                layers::conv2d_backward(&cache.conv_in[i], &self.conv[i].weight, &g_bn)?;
            conv_grads.push((g_w, g_b));
            g4 = if i == 2 {
                layers::maxpool_backward(&cache.pool_argmax[0], &g_in)?
            } else {
                g_in
            };
        }
        conv_grads.reverse();
        bn_grads.reverse();

        let mut tensors = Vec::with_capacity(22);
        for ((cw, cb), (bg, bb)) in conv_grads.into_iter().zip(bn_grads) {
            tensors.push(cw.into_raw_vec_and_offset().0);
            tensors.push(cb.into_raw_vec_and_offset().0);
            tensors.push(bg.into_raw_vec_and_offset().0);
            tensors.push(bb.into_raw_vec_and_offset().0);
        }
        for (fw, fb) in fc_grads {
            tensors.push(fw.into_raw_vec_and_offset().0);
            tensors.push(fb.into_raw_vec_and_offset().0);
        }
        Ok(Gradients { tensors })
    }

    /// Every trainable tensor as a mutable flat slice, in the fixed order
    /// gradients and optimizer state use: per conv block (weight, bias,
    /// gamma, beta), then per fully connected layer (weight, bias).
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(22);
        for (conv, bn) in self.conv.iter_mut().zip(self.bn.iter_mut()) {
            out.push(conv.weight.as_slice_mut().expect("contiguous"));
            out.push(conv.bias.as_slice_mut().expect("contiguous"));
            out.push(bn.gamma.as_slice_mut().expect("contiguous"));
            out.push(bn.beta.as_slice_mut().expect("contiguous"));
        }
        for fc in self.fc.iter_mut() {
            out.push(fc.weight.as_slice_mut().expect("contiguous"));
            out.push(fc.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn trainable_sizes(&mut self) -> Vec<usize> {
        self.trainable_slices_mut().iter().map(|s| s.len()).collect()
    }

    /// Output shape of every layer measured on a live forward pass, in the
    /// same format as [`NetworkConfig::layer_shapes`].
    pub fn activation_shapes(&self, batch: usize) -> Result<Vec<(String, Vec<usize>)>, XmasNetError> {
        let s = self.config.input_size;
        let input = Array4::<T>::zeros((batch, self.config.input_channels, s, s));
        let eps = T::from_f64(BN_EPS);
        let mut shapes = Vec::new();
        let spatial = |name: &str, a: &Array4<T>| {
            let (_, c, h, w) = a.dim();
            (name.to_string(), vec![h, w, c])
        };
        let mut cur = input;
        for i in 0..4 {
            let conv_out = layers::conv2d_forward(&cur, &self.conv[i].weight, &self.conv[i].bias)?;
            shapes.push(spatial(&format!("conv{}", i + 1), &conv_out));
            let bn = &self.bn[i];
            let bn_out = layers::batchnorm_forward_infer(
                &conv_out,
                &bn.gamma,
                &bn.beta,
                &bn.running_mean,
                &bn.running_var,
                eps,
            )?;
            cur = layers::relu_forward(&bn_out);
            if i == 1 || i == 3 {
                cur = layers::maxpool_forward(&cur)?.0;
                shapes.push(spatial(&format!("maxpool{}", if i == 1 { 1 } else { 2 }), &cur));
            }
        }
        let n = cur.dim().0;
        let mut flat: Array2<T> = cur
            .into_shape_with_order((n, self.config.flat_features()))
            .expect("pooled activation contiguous");
        for i in 0..3 {
            let pre = layers::fc_forward(&flat, &self.fc[i].weight, &self.fc[i].bias)?;
            let name = if i < 2 { format!("fc{}", i + 1) } else { "softmax".to_string() };
            shapes.push((name, vec![pre.dim().1]));
            flat = if i < 2 { layers::relu_forward(&pre) } else { pre };
        }
        Ok(shapes)
    }
}

fn tensor_specs(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut in_c = config.input_channels;
    for (i, &ch) in config.conv_channels.iter().enumerate() {
        let n = i + 1;
        specs.push((format!("conv{n}.weight"), vec![ch, in_c, 3, 3]));
        specs.push((format!("conv{n}.bias"), vec![ch]));
        for stat in ["gamma", "beta", "running_mean", "running_var"] {
            specs.push((format!("bn{n}.{stat}"), vec![ch]));
        }
        in_c = ch;
    }
    let mut in_f = config.flat_features();
    for (i, &f) in config.fc_sizes.iter().enumerate() {
        let n = i + 1;
        specs.push((format!("fc{n}.weight"), vec![f, in_f]));
        specs.push((format!("fc{n}.bias"), vec![f]));
        in_f = f;
    }
    specs
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    architecture: NetworkConfig,
    tensor_table: Vec<TensorEntry>,
    payload_sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn model_paths(manifest_path: &Path) -> Result<(PathBuf, PathBuf), XmasNetError> {
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name.strip_suffix(".model.json").ok_or_else(|| {
        XmasNetError::MalformedModel(format!("model path must end in .model.json, got {name:?}"))
    })?;
    let payload = manifest_path.with_file_name(format!("{stem}.model.bin"));
    Ok((manifest_path.to_path_buf(), payload))
}

impl XmasNet<f32> {
    fn serialized_slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(30);
        for (conv, bn) in self.conv.iter().zip(&self.bn) {
            out.push(conv.weight.as_slice().expect("contiguous"));
            out.push(conv.bias.as_slice().expect("contiguous"));
            out.push(bn.gamma.as_slice().expect("contiguous"));
            out.push(bn.beta.as_slice().expect("contiguous"));
            out.push(bn.running_mean.as_slice().expect("contiguous"));
            out.push(bn.running_var.as_slice().expect("contiguous"));
        }
        for fc in &self.fc {
            out.push(fc.weight.as_slice().expect("contiguous"));
            out.push(fc.bias.as_slice().expect("contiguous"));
        }
        out
    }

    fn serialized_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(30);
        for (conv, bn) in self.conv.iter_mut().zip(self.bn.iter_mut()) {
            out.push(conv.weight.as_slice_mut().expect("contiguous"));
            out.push(conv.bias.as_slice_mut().expect("contiguous"));
            out.push(bn.gamma.as_slice_mut().expect("contiguous"));
            out.push(bn.beta.as_slice_mut().expect("contiguous"));
            out.push(bn.running_mean.as_slice_mut().expect("contiguous"));
            out.push(bn.running_var.as_slice_mut().expect("contiguous"));
        }
        for fc in self.fc.iter_mut() {
            out.push(fc.weight.as_slice_mut().expect("contiguous"));
            out.push(fc.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    /// Write the model as a JSON manifest (`.model.json`) plus a raw
    /// little-endian f32 payload (`.model.bin`) covered by a SHA-256.
    pub fn save(&self, manifest_path: &Path) -> Result<(), XmasNetError> {
        let (manifest_path, payload_path) = model_paths(manifest_path)?;
        let specs = tensor_specs(&self.config);
        let slices = self.serialized_slices();
        let mut payload = Vec::new();
        let mut table = Vec::with_capacity(specs.len());
        for ((name, shape), slice) in specs.into_iter().zip(slices) {
            debug_assert_eq!(shape.iter().product::<usize>(), slice.len());
            table.push(TensorEntry { name, shape, offset: payload.len() as u64 });
            for v in slice {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = ModelManifest {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.config.clone(),
            tensor_table: table,
            payload_sha256: sha256_hex(&payload),
        };
        fs::write(payload_path, payload)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| XmasNetError::MalformedModel(e.to_string()))?;
        fs::write(manifest_path, json + "\n")?;
        Ok(())
    }

    /// Read a model written by [`XmasNet::save`], verifying format version,
    /// payload checksum, and every tensor shape.
    pub fn load(manifest_path: &Path) -> Result<XmasNet<f32>, XmasNetError> {
        let (manifest_path, payload_path) = model_paths(manifest_path)?;
        let text = fs::read_to_string(manifest_path)?;
        let manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| XmasNetError::MalformedModel(e.to_string()))?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(XmasNetError::VersionMismatch(manifest.format_version));
        }
        manifest
            .architecture
            .validate()
            .map_err(|e| XmasNetError::MalformedModel(e.to_string()))?;
        let payload = fs::read(payload_path)?;
        if sha256_hex(&payload) != manifest.payload_sha256 {
            return Err(XmasNetError::ChecksumMismatch);
        }
        let specs = tensor_specs(&manifest.architecture);
        if manifest.tensor_table.len() != specs.len() {
            return Err(XmasNetError::MalformedModel(format!(
                "tensor table has {} entries, architecture needs {}",
                manifest.tensor_table.len(),
                specs.len()
            )));
        }
        let mut net = XmasNet::<f32>::zeroed(manifest.architecture.clone());
        let mut expected_offset = 0u64;
        {
            let slices = net.serialized_slices_mut();
            for ((entry, (name, shape)), slice) in
                manifest.tensor_table.iter().zip(specs).zip(slices)
            {
                if entry.name != name {
                    return Err(XmasNetError::MalformedModel(format!(
                        "tensor {} out of order, expected {}",
                        entry.name, name
                    )));
                }
                if entry.shape != shape {
                    return Err(XmasNetError::ShapeMismatch(format!(
                        "tensor {} has shape {:?}, architecture needs {:?}",
                        entry.name, entry.shape, shape
                    )));
                }
                if entry.offset != expected_offset {
                    return Err(XmasNetError::MalformedModel(format!(
                        "tensor {} at offset {}, expected {}",
                        entry.name, entry.offset, expected_offset
                    )));
                }
                let count = shape.iter().product::<usize>();
                let start = entry.offset as usize;
                let end = start + count * 4;
                if end > payload.len() {
                    return Err(XmasNetError::MalformedModel(format!(
                        "tensor {} runs past the payload",
                        entry.name
                    )));
                }
                for (dst, chunk) in slice.iter_mut().zip(payload[start..end].chunks_exact(4)) {
                    *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                }
                expected_offset = end as u64;
            }
        }
        if expected_offset as usize != payload.len() {
            return Err(XmasNetError::MalformedModel(format!(
                "payload has {} bytes, tensors cover {}",
                payload.len(),
                expected_offset
            )));
        }
        Ok(net)
    }
}
