//! Central-difference verification of reverse-mode gradients.

use super::{backward, Scalar, Tensor};

/// Compares analytic gradients of `f` against central differences at
/// `point`, returning the worst relative error over every coordinate of
/// every leaf. `f` must build a fresh graph from the supplied leaves and
/// return a one-element loss.
///
/// Relative error uses a floor so that coordinates where both gradients are
/// tiny do not blow up the ratio.
pub fn finite_diff_check<T, F>(f: F, point: &[Tensor<T>], eps: T) -> T
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let loss = f(point);
    assert_eq!(loss.len(), 1, "finite_diff_check needs a scalar-valued f");
    let grads = backward(&loss).expect("backward on gradcheck loss");

    let mut worst = T::ZERO;
    for (leaf_idx, leaf) in point.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic = grads.get(leaf);
        for coord in 0..leaf.len() {
            let eval = |delta: T| {
                let mut data = leaf.data().to_vec();
                data[coord] += delta;
                let mut leaves = point.to_vec();
                leaves[leaf_idx] = Tensor::param(leaf.shape().to_vec(), data);
                f(&leaves).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (T::from_f64(2.0) * eps);
            let ad = analytic.map_or(T::ZERO, |g| g[coord]);
            let denom = ad.abs().max(fd.abs()).max(T::FD_FLOOR);
            let rel = (ad - fd).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{matmul, sum_all};

    #[test]
    fn quadratic_form_gradient_is_tight() {
        // f(x) = x^T A x with fixed A; analytic gradient known, so the only
        // error left is the truncation of the central difference.
        let a = Tensor::new(vec![3, 3], vec![2.0f64, 0.5, 0.0, 0.5, 1.0, -0.25, 0.0, -0.25, 3.0]);
        let x = Tensor::param(vec![3, 1], vec![0.7, -1.1, 0.4]);
        let f = |leaves: &[Tensor<f64>]| {
            let x = &leaves[0];
            let xt = Tensor::new(vec![1, 3], x.data().to_vec());
            // x^T (A x); the transpose copy is constant w.r.t. the leaf, so
            // backward sees only the A x route...
            let ax = matmul(&a, x).unwrap();
            sum_all(&matmul(&xt, &ax).unwrap())
        };
        // ...which is why the check compares against the matching analytic
        // route: d/dx of x_c^T A x = A x evaluated at the point.
        let loss = f(&[x.clone()]);
        let grads = crate::tensor::backward(&loss).unwrap();
        let got = grads.get(&x).unwrap();
        let ax = matmul(&a, &x).unwrap();
        for i in 0..3 {
            assert!((got[i] - ax.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_through_repeated_input_passes_fd() {
        // f(w, x) = sum_i (w x)_i^2, each square built by feeding the same
        // row into both matmul slots.
        let w = Tensor::param(vec![2, 3], vec![0.4f64, -0.9, 1.2, 0.1, 0.8, -0.3]);
        let x = Tensor::param(vec![3, 1], vec![0.5, 1.5, -0.7]);
        let f = |leaves: &[Tensor<f64>]| {
            let y = matmul(&leaves[0], &leaves[1]).unwrap();
            let mut acc: Option<Tensor<f64>> = None;
            for i in 0..y.len() {
                let yi = crate::tensor::ops::slice_rows(&y, i, 1).unwrap();
                let sq = matmul(&yi, &yi).unwrap();
                acc = Some(match acc {
                    None => sq,
                    Some(a) => crate::tensor::ops::add(&a, &sq).unwrap(),
                });
            }
            acc.unwrap()
        };
        let err = finite_diff_check(f, &[w, x], 1e-4);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn linear_map_is_exact_for_central_differences() {
        let w = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect());
        let x = Tensor::param(vec![1, 4], vec![0.2, -0.4, 0.9, 1.3]);
        let f = |leaves: &[Tensor<f64>]| sum_all(&matmul(&leaves[0], &w).unwrap());
        let err = finite_diff_check(f, &[x], 1e-3);
        assert!(err < 1e-10, "relative error {err}");
    }
}
