//! Gradient clipping and the Adam update over named parameter sets.

use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};

/// Gradients addressed by parameter name, in name order.
pub type NamedGrads<T> = BTreeMap<String, Vec<T>>;

/// Named parameter tensors. Updates replace the tensor; buffers themselves
/// are never mutated, so snapshots are plain map clones.
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamHyper<T> {
    pub fn new(learning_rate: T) -> Self {
        AdamHyper {
            learning_rate,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
            weight_decay: T::ZERO,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: T) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam optimizer state: step counter plus per-parameter first/second moment
/// buffers, allocated lazily to zero the first time a parameter gets a
/// gradient.
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper<T>,
    step: u64,
    slots: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper<T>) -> Self {
        AdamState {
            hyper,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`,
/// preserving direction. Returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut NamedGrads<T>, max_norm: T) -> T {
    assert!(max_norm > T::ZERO, "max_norm must be positive");
    let mut sq = T::ZERO;
    for g in grads.values() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. L2 regularization enters as
/// `weight_decay * param` added to each gradient. Parameters without a
/// gradient entry are left untouched (their moments do not decay).
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &NamedGrads<T>,
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bias1 = T::ONE - h.beta1.powi(t);
    let bias2 = T::ONE - h.beta2.powi(t);

    for (name, g) in grads {
        let param = params.get(name).ok_or_else(|| {
            TensorError::Contract(format!("gradient for unknown parameter `{name}`"))
        })?;
        if param.len() != g.len() {
            return Err(TensorError::Dimension(format!(
                "gradient length {} does not match parameter `{name}` of length {}",
                g.len(),
                param.len()
            )));
        }
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![T::ZERO; g.len()],
            v: vec![T::ZERO; g.len()],
        });
        if slot.m.len() != g.len() {
            return Err(TensorError::Dimension(format!(
                "optimizer state for `{name}` has stale shape"
            )));
        }
        let mut next = param.data().to_vec();
        for i in 0..g.len() {
            let grad = g[i] + h.weight_decay * next[i];
            slot.m[i] = h.beta1 * slot.m[i] + (T::ONE - h.beta1) * grad;
            slot.v[i] = h.beta2 * slot.v[i] + (T::ONE - h.beta2) * grad * grad;
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            next[i] = next[i] - h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        let updated = Tensor::build(param.shape().to_vec(), next, param.requires_grad(), None);
        params.insert(name.clone(), updated);
    }
    Ok(())
}
