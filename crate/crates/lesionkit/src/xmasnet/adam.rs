//! Adam with bias correction and L2 regularization folded into the gradient.

use super::{Scalar, TrainConfig, XmasNetError};

/// First and second moment accumulators for a fixed list of parameter
/// tensors, flattened. Tensor order must match the order the model exposes
/// its trainable slices in.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(tensor_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: tensor_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: tensor_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every trainable tensor. The L2 term enters the raw
/// gradient (g' = g + wd * theta) before the moment updates, so weight decay
/// passes through the adaptive scaling.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), XmasNetError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(XmasNetError::ShapeMismatch(format!(
            "optimizer state covers {} tensors, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let lr = T::from_f64(cfg.learning_rate);
    let wd = T::from_f64(cfg.weight_decay);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.epsilon);
    let one = T::one();
    let corr1 = one - b1.powi(t as i32);
    let corr2 = one - b2.powi(t as i32);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(XmasNetError::ShapeMismatch(format!(
                "tensor length mismatch in optimizer: param {}, grad {}, state {}",
                p.len(),
                g.len(),
                m.len()
            )));
        }
        for i in 0..p.len() {
            if !g[i].is_finite() {
                return Err(XmasNetError::NonFiniteGradient(format!(
                    "gradient element {i} is {}",
                    g[i].to_f64()
                )));
            }
            let gi = g[i] + wd * p[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
