//! Reverse-mode pass: topological ordering and gradient accumulation.

use std::collections::{BTreeMap, HashSet};

use super::{ops, Scalar, Tensor, TensorError, TensorId};

/// Gradients keyed by tensor identity. Iteration order follows creation
/// order of the tensors, which is deterministic for a fixed program flow.
pub struct GradMap<T: Scalar> {
    grads: BTreeMap<TensorId, Vec<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub(crate) fn new() -> Self {
        GradMap {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, t: &Tensor<T>) -> bool {
        self.grads.contains_key(&t.id())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    /// Zero-initialized accumulation buffer for `t`.
    pub(crate) fn buf(&mut self, t: &Tensor<T>) -> &mut Vec<T> {
        self.grads
            .entry(t.id())
            .or_insert_with(|| vec![T::ZERO; t.len()])
    }

    pub(crate) fn seed(&mut self, t: &Tensor<T>, value: T) {
        self.buf(t)[0] = value;
    }

    pub(crate) fn take(&mut self, id: TensorId) -> Option<Vec<T>> {
        self.grads.remove(&id)
    }
}

/// Reverse topological accumulation of d(loss)/d(leaf) for every tensor that
/// requires gradients and is reachable from `loss`.
///
/// The loss must be a one-element tensor; anything else is a contract error.
/// Interior gradients are dropped as soon as they have been propagated, so
/// the returned map holds leaf gradients only.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<GradMap<T>, TensorError> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }

    // Post-order DFS over the producing nodes; reversal gives the order in
    // which every consumer's gradient is complete before its producers run.
    let mut topo: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();
    if loss.node().is_some() {
        visited.insert(loss.id());
        stack.push((loss.clone(), 0));
    }
    while let Some((t, child)) = stack.pop() {
        let node = t.node().expect("non-leaf tensors only on the DFS stack");
        if child < node.inputs.len() {
            stack.push((t.clone(), child + 1));
            let input = &node.inputs[child];
            if input.node().is_some() && input.requires_grad() && visited.insert(input.id()) {
                stack.push((input.clone(), 0));
            }
        } else {
            topo.push(t);
        }
    }

    let mut grads = GradMap::new();
    grads.seed(loss, T::ONE);
    for t in topo.iter().rev() {
        // No entry means no downstream path contributed gradient.
        let Some(g) = grads.take(t.id()) else {
            continue;
        };
        ops::accumulate_input_grads(t, &g, &mut grads);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{matmul, scale, sum_all};

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::param(vec![2, 3], vec![1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let loss = sum_all(&x);
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_via_repeated_input_accumulates() {
        // loss = x * x with the same tensor feeding both matmul slots.
        let x = Tensor::param(vec![1, 1], vec![3.0f64]);
        let loss = matmul(&x, &x).unwrap();
        assert_eq!(loss.item(), 9.0);
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(vec![2], vec![1.0f64, 2.0]);
        let doubled = scale(&x, 2.0);
        assert!(matches!(
            backward(&doubled),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn disconnected_loss_yields_no_gradients() {
        let loss = Tensor::<f64>::scalar(1.0);
        let grads = backward(&loss).unwrap();
        assert!(grads.is_empty() || grads.len() == 1);
    }

    #[test]
    fn replayed_graph_is_bit_identical() {
        let x = Tensor::param(vec![2, 2], vec![0.3f64, -1.2, 2.2, 0.9]);
        let w = Tensor::param(vec![2, 2], vec![1.5f64, 0.25, -0.75, 2.0]);
        let run = |x: &Tensor<f64>, w: &Tensor<f64>| {
            let y = matmul(x, w).unwrap();
            let z = matmul(&y, w).unwrap();
            let loss = sum_all(&scale(&z, 0.5));
            backward(&loss).unwrap()
        };
        let g1 = run(&x, &w);
        let g2 = run(&x, &w);
        assert_eq!(g1.get(&x).unwrap(), g2.get(&x).unwrap());
        assert_eq!(g1.get(&w).unwrap(), g2.get(&w).unwrap());
    }
}
