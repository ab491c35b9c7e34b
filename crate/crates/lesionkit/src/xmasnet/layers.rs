//! Layer primitives with exact analytic backward passes.
//!
//! Convolutions are 3x3, stride 1, zero-padding 1, computed as per-sample
//! im2col followed by a matrix product. Backward passes rebuild the column
//! matrix instead of caching it; the products dominate anyway.

use super::{Scalar, XmasNetError};
use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis};

fn shape_err(msg: String) -> XmasNetError {
    XmasNetError::ShapeMismatch(msg)
}

fn im2col3x3<T: Scalar>(sample: ArrayView3<'_, T>, cols: &mut Array2<T>) {
    let (c, h, w) = sample.dim();
    cols.fill(T::zero());
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sample.slice(s![ci, sy as usize, (x_lo + kx - 1)..(x_hi + kx - 1)]);
                    let mut dst = cols.slice_mut(s![row, (y * w + x_lo)..(y * w + x_hi)]);
                    dst.assign(&src);
                }
            }
        }
    }
}

fn col2im3x3_add<T: Scalar>(cols: &Array2<T>, mut sample: ArrayViewMut3<'_, T>) {
    let (c, h, w) = sample.dim();
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = cols.slice(s![row, (y * w + x_lo)..(y * w + x_hi)]);
                    let mut dst =
                        sample.slice_mut(s![ci, sy as usize, (x_lo + kx - 1)..(x_hi + kx - 1)]);
                    dst += &src;
                }
            }
        }
    }
}

/// 3x3/1 convolution with padding 1 (cross-correlation semantics). Input
/// (N,C,H,W), weights (K,C,3,3), bias (K) -> output (N,K,H,W).
pub fn conv2d_forward<T: Scalar>(
    input: &Array4<T>,
    weight: &Array4<T>,
    bias: &Array1<T>,
) -> Result<Array4<T>, XmasNetError> {
    let (n, c, h, w) = input.dim();
    let (k, wc, kh, kw) = weight.dim();
    if wc != c || kh != 3 || kw != 3 {
        return Err(shape_err(format!(
            "conv weights {:?} do not fit input {:?}",
            weight.dim(),
            input.dim()
        )));
    }
    if bias.len() != k {
        return Err(shape_err(format!("conv bias has {} entries, need {k}", bias.len())));
    }
    let w_mat = weight.view().into_shape_with_order((k, c * 9)).expect("weights contiguous");
    let bias_col = bias.view().into_shape_with_order((k, 1)).expect("bias contiguous");
    let mut cols = Array2::<T>::zeros((c * 9, h * w));
    let mut out = Array4::<T>::zeros((n, k, h, w));
    for i in 0..n {
        im2col3x3(input.index_axis(Axis(0), i), &mut cols);
        let prod = w_mat.dot(&cols) + &bias_col;
        out.index_axis_mut(Axis(0), i)
            .assign(&prod.into_shape_with_order((k, h, w)).expect("product contiguous"));
    }
    Ok(out)
}

/// Gradients of conv2d for any scalar loss: returns (grad_input,
/// grad_weights, grad_bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Array4<T>,
    weight: &Array4<T>,
    grad_out: &Array4<T>,
) -> Result<(Array4<T>, Array4<T>, Array1<T>), XmasNetError> {
    let (n, c, h, w) = input.dim();
    let (k, _, _, _) = weight.dim();
    if grad_out.dim() != (n, k, h, w) {
        return Err(shape_err(format!(
            "conv grad_out {:?} does not match output shape {:?}",
            grad_out.dim(),
            (n, k, h, w)
        )));
    }
    let w_mat = weight.view().into_shape_with_order((k, c * 9)).expect("weights contiguous");
    let mut grad_w_mat = Array2::<T>::zeros((k, c * 9));
    let mut grad_b = Array1::<T>::zeros(k);
    let mut grad_in = Array4::<T>::zeros((n, c, h, w));
    let mut cols = Array2::<T>::zeros((c * 9, h * w));
    for i in 0..n {
        im2col3x3(input.index_axis(Axis(0), i), &mut cols);
        let go = grad_out
            .index_axis(Axis(0), i)
            .into_shape_with_order((k, h * w))
            .expect("grad_out subview contiguous");
        grad_w_mat = grad_w_mat + go.dot(&cols.t());
        grad_b += &go.sum_axis(Axis(1));
        let gcols = w_mat.t().dot(&go);
        col2im3x3_add(&gcols, grad_in.index_axis_mut(Axis(0), i));
    }
    let grad_w = grad_w_mat.into_shape_with_order((k, c, 3, 3)).expect("contiguous");
    Ok((grad_in, grad_w, grad_b))
}

/// Per-channel statistics cached by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Array4<T>,
    inv_std: Array1<T>,
}

fn channel_view<T: Scalar>(v: &Array1<T>) -> ndarray::ArrayView4<'_, T> {
    v.view().into_shape_with_order((1, v.len(), 1, 1)).expect("contiguous")
}

/// Batch normalization, training mode: normalize by batch statistics (biased
/// variance), update running statistics in place with momentum 0.9 (running
/// variance stores the unbiased estimate).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train<T: Scalar>(
    input: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &mut Array1<T>,
    running_var: &mut Array1<T>,
    momentum: T,
    eps: T,
) -> Result<(Array4<T>, BnCache<T>), XmasNetError> {
    let (n, c, h, w) = input.dim();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(format!("batchnorm params sized for {} channels, input has {c}", gamma.len())));
    }
    let count = n * h * w;
    if count < 2 {
        return Err(XmasNetError::DegenerateBatch);
    }
    let count_t = T::from_f64(count as f64);
    let mean = input.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / count_t;
    let centered = input - &channel_view(&mean);
    let var = (&centered * &centered).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
        / count_t;
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let x_hat = &centered * &channel_view(&inv_std);
    let out = &x_hat * &channel_view(gamma) + &channel_view(beta);

    let one = T::one();
    let unbiased = var.mapv(|v| v * count_t / (count_t - one));
    running_mean.zip_mut_with(&mean, |r, &m| *r = momentum * *r + (one - momentum) * m);
    running_var.zip_mut_with(&unbiased, |r, &v| *r = momentum * *r + (one - momentum) * v);
    Ok((out, BnCache { x_hat, inv_std }))
}

/// Batch normalization, inference mode: normalize by running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Array4<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: T,
) -> Result<Array4<T>, XmasNetError> {
    let (_, c, _, _) = input.dim();
    if gamma.len() != c {
        return Err(shape_err(format!("batchnorm params sized for {} channels, input has {c}", gamma.len())));
    }
    let inv_std = running_var.mapv(|v| T::one() / (v + eps).sqrt());
    let out = (input - &channel_view(running_mean)) * &channel_view(&inv_std)
        * &channel_view(gamma)
        + &channel_view(beta);
    Ok(out)
}

/// Standard batchnorm gradient (biased batch variance):
/// dx = gamma*inv_std/n * (n*g - sum(g) - x_hat*sum(g*x_hat)).
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Array1<T>,
    grad_out: &Array4<T>,
) -> Result<(Array4<T>, Array1<T>, Array1<T>), XmasNetError> {
    let (n, _, h, w) = grad_out.dim();
    if grad_out.dim() != cache.x_hat.dim() {
        return Err(shape_err(format!(
            "batchnorm grad_out {:?} does not match cached activation {:?}",
            grad_out.dim(),
            cache.x_hat.dim()
        )));
    }
    let count_t = T::from_f64((n * h * w) as f64);
    let grad_beta = grad_out.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    let grad_gamma = (grad_out * &cache.x_hat)
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .sum_axis(Axis(0));
    let scale = gamma
        .iter()
        .zip(cache.inv_std.iter())
        .map(|(&g, &s)| g * s / count_t)
        .collect::<Array1<T>>();
    let grad_in = (grad_out.mapv(|g| g * count_t)
        - &channel_view(&grad_beta)
        - &cache.x_hat * &channel_view(&grad_gamma))
        * &channel_view(&scale);
    Ok((grad_in, grad_gamma, grad_beta))
}

/// Elementwise max(0, x) for any array dimension.
pub fn relu_forward<T: Scalar, D: ndarray::Dimension>(
    input: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    input.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    input: &ndarray::Array<T, D>,
    grad_out: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut grad = grad_out.clone();
    grad.zip_mut_with(input, |g, &x| {
        if x <= T::zero() {
            *g = T::zero();
        }
    });
    grad
}

/// 2x2/2 max pooling. Returns the pooled tensor and, per output cell, which
/// window position won (0..4, row-major; first encountered wins ties).
pub fn maxpool_forward<T: Scalar>(
    input: &Array4<T>,
) -> Result<(Array4<T>, Array4<u8>), XmasNetError> {
    let (n, c, h, w) = input.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("maxpool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut argmax = Array4::<u8>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = input[[i, ci, 2 * oy, 2 * ox]];
                    let mut best_pos = 0u8;
                    for (pos, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = input[[i, ci, 2 * oy + dy, 2 * ox + dx]];
                        if v > best {
                            best = v;
                            best_pos = pos as u8;
                        }
                    }
                    out[[i, ci, oy, ox]] = best;
                    argmax[[i, ci, oy, ox]] = best_pos;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each gradient to the window position recorded by the forward pass.
pub fn maxpool_backward<T: Scalar>(
    argmax: &Array4<u8>,
    grad_out: &Array4<T>,
) -> Result<Array4<T>, XmasNetError> {
    let (n, c, oh, ow) = grad_out.dim();
    if argmax.dim() != (n, c, oh, ow) {
        return Err(shape_err(format!(
            "maxpool grad_out {:?} does not match recorded argmax {:?}",
            grad_out.dim(),
            argmax.dim()
        )));
    }
    let mut grad_in = Array4::<T>::zeros((n, c, oh * 2, ow * 2));
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let pos = argmax[[i, ci, oy, ox]] as usize;
                    let (dy, dx) = (pos / 2, pos % 2);
                    grad_in[[i, ci, 2 * oy + dy, 2 * ox + dx]] = grad_out[[i, ci, oy, ox]];
                }
            }
        }
    }
    Ok(grad_in)
}

/// Fully connected layer: input (N,in) x weight (out,in) + bias -> (N,out).
pub fn fc_forward<T: Scalar>(
    input: &Array2<T>,
    weight: &Array2<T>,
    bias: &Array1<T>,
) -> Result<Array2<T>, XmasNetError> {
    let (_, in_dim) = input.dim();
    let (out_dim, w_in) = weight.dim();
    if w_in != in_dim || bias.len() != out_dim {
        return Err(shape_err(format!(
            "fc weight {:?} / bias {} do not fit input {:?}",
            weight.dim(),
            bias.len(),
            input.dim()
        )));
    }
    Ok(input.dot(&weight.t()) + &bias.view().into_shape_with_order((1, out_dim)).expect("contiguous"))
}

pub fn fc_backward<T: Scalar>(
    input: &Array2<T>,
    weight: &Array2<T>,
    grad_out: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>, Array1<T>), XmasNetError> {
    let (n, _) = input.dim();
    let (out_dim, _) = weight.dim();
    if grad_out.dim() != (n, out_dim) {
        return Err(shape_err(format!(
            "fc grad_out {:?} does not match output shape {:?}",
            grad_out.dim(),
            (n, out_dim)
        )));
    }
    let grad_w = grad_out.t().dot(input);
    let grad_b = grad_out.sum_axis(Axis(0));
    let grad_in = grad_out.dot(weight);
    Ok((grad_in, grad_w, grad_b))
}

/// Max-shifted softmax plus mean cross-entropy. Returns (loss, probs).
pub fn softmax_xent<T: Scalar>(
    logits: &Array2<T>,
    labels: &[u8],
) -> Result<(T, Array2<T>), XmasNetError> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(shape_err(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(shape_err(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Array2::<T>::zeros((n, k));
    let mut loss = T::zero();
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        for j in 0..k {
            probs[[i, j]] = probs[[i, j]] / denom;
        }
        loss -= probs[[i, labels[i] as usize]].ln();
    }
    Ok((loss / T::from_f64(n as f64), probs))
}

/// d(mean xent)/d(logits) = (probs - onehot) / N.
pub fn softmax_xent_backward<T: Scalar>(probs: &Array2<T>, labels: &[u8]) -> Array2<T> {
    let (n, _) = probs.dim();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = probs.mapv(|p| p * inv_n);
    for (i, &l) in labels.iter().enumerate() {
        grad[[i, l as usize]] -= inv_n;
    }
    grad
}
