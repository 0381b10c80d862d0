//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Training runs in f32; verification (gradient checks) in f64. The element
//! type is chosen at tape creation via the `Scalar` parameter. Broadcasting
//! is deliberately limited to trailing-dimension vectors, per-item segments
//! and scalars — anything else must be an explicit layout op.

mod array;
mod check;
mod graph;
pub(crate) mod kernels;
mod scalar;
mod tape;

pub use array::Array;
pub use check::grad_check;
pub use graph::Graph;
pub use scalar::Scalar;
pub use tape::{norm_stats, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Array::eye(2));
        let a = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_permutation() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = t.constant(arr(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let c = t.matmul(a, p).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Array::zeros(vec![2, 3]));
        let b = t.constant(Array::zeros(vec![4, 5]));
        match t.matmul(a, b) {
            Err(Error::Dim { .. }) => {}
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[2], &[0.0, 0.0]));
        let y = t.softmax_last(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let big = t.constant(arr(&[2], &[1000.0, 1000.0]));
        let yb = t.softmax_last(big);
        assert!(t.value(yb).all_finite());
        assert_eq!(t.value(yb).data(), &[0.5, 0.5]);

        let z = t.constant(arr(&[2], &[0.0, 3.0f64.ln()]));
        let yz = t.softmax_last(z);
        assert!((t.value(yz).data()[0] - 0.25).abs() < 1e-12);
        assert!((t.value(yz).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn norm_stats_basics() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr(&[3], &[1.0, 1.0, 1.0]));
        let (m, v) = norm_stats(&mut t, x, 0).unwrap();
        assert_eq!(t.value(m).data(), &[1.0]);
        assert_eq!(t.value(v).data(), &[0.0]);

        let x2 = t.constant(arr(&[2], &[0.0, 2.0]));
        let (m2, v2) = norm_stats(&mut t, x2, 0).unwrap();
        assert_eq!(t.value(m2).data(), &[1.0]);
        assert_eq!(t.value(v2).data(), &[1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = t.square(x);
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true);
        let sq = t.square(x);
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true);
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true);
        let unused = t.leaf(arr(&[2], &[5.0, 6.0]), true);
        let sq = t.square(x);
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert!(t.grad(unused).is_none());
        assert!(t.grad_array(unused).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_check_quadratic() {
        let x = arr(&[3], &[1.0, 2.0, 3.0]);
        let err = grad_check(
            |g, leaf| {
                let sq = g.tape.square(leaf);
                Ok(g.tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn grad_check_matmul_sum() {
        // loss = sum(A B) with B fixed: dA = 1 * B^T broadcast.
        let a = arr(&[2, 3], &[0.3, -0.4, 0.5, 1.0, 0.2, -0.7]);
        let b = arr(&[3, 2], &[0.1, 0.9, -0.5, 0.3, 0.8, -0.2]);
        let err = grad_check(
            |g, leaf| {
                let bv = g.tape.constant(b.clone());
                let c = g.tape.matmul(leaf, bv)?;
                Ok(g.tape.sum_all(c))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {}", err);
    }

    #[test]
    fn forward_deterministic_across_runs() {
        let run = || {
            let mut t = Tape::<f32>::new();
            let data: Vec<f32> = (0..4096).map(|i| ((i * 2654435761usize) % 1000) as f32 / 999.0 - 0.5).collect();
            let x = t.constant(Array::from_vec(vec![64, 64], data));
            let y = t.matmul(x, x).unwrap();
            let s = t.softmax_last(y);
            let m = t.mean_all(s);
            t.value(m).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
