//! Plain (non-recorded) probability helpers.

use crate::error::{shape_err, NnError, Result};
use crate::graph::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard applied before every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-8;

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 1 {
        return shape_err(format!("softmax expects rank 1, got {:?}", logits.shape()));
    }
    logits.ensure_finite("softmax input")?;
    let mut out = logits.clone();
    softmax_in_place(out.data_mut());
    Ok(out)
}

/// `-sum_i p_i ln(max(q_i, 1e-8))`.
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.shape() != q.shape() {
        return shape_err(format!("cross_entropy {:?} vs {:?}", p.shape(), q.shape()));
    }
    if !p.is_finite() || !q.is_finite() {
        return Err(NnError::NonFinite("cross_entropy input".into()));
    }
    let eps = T::lit(LOG_EPS);
    Ok(-p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| pi * qi.max(eps).ln())
        .sum::<T>())
}

/// Shannon entropy in nats.
pub fn entropy<T: Scalar>(p: &Tensor<T>) -> Result<T> {
    cross_entropy(p, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0f32, 0.0, 0.0])).unwrap();
        for &v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let s = softmax(&Tensor::vector(vec![2.0f32.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
        let big = softmax(&Tensor::vector(vec![1000.0f32, 0.0])).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-6 && big.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&Tensor::vector(vec![f32::NAN, 0.0])),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let u = Tensor::vector(vec![1.0f32 / 3.0; 3]);
        assert!((cross_entropy(&u, &u).unwrap() - 3.0f32.ln()).abs() < 1e-5);
        let one = Tensor::vector(vec![1.0f32, 0.0, 0.0]);
        assert!(cross_entropy(&one, &one).unwrap().abs() < 1e-6);
        let p = Tensor::vector(vec![0.5f32, 0.5]);
        let q = Tensor::vector(vec![0.25f32, 0.75]);
        let expect = -0.5 * (0.25f64.ln() + 0.75f64.ln());
        assert!((cross_entropy(&p, &q).unwrap() as f64 - expect).abs() < 1e-6);
        assert!((expect - 0.8370).abs() < 1e-4);
        assert!(cross_entropy(&p, &u).is_err());
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            ticks in proptest::collection::vec(-480i32..480, 1..12),
            shift_ticks in -800i32..800,
        ) {
            // dyadic grid so the shifted logits are exact in f32
            let logits: Vec<f32> = ticks.iter().map(|&t| t as f32 / 16.0).collect();
            let shift = shift_ticks as f32 / 16.0;
            let a = softmax(&Tensor::vector(logits.clone())).unwrap();
            let b = softmax(&Tensor::vector(logits.iter().map(|v| v + shift).collect())).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-6);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn gibbs_inequality((p, q) in (2usize..8).prop_flat_map(|n| (dist(n), dist(n)))) {
            let p = Tensor::vector(p);
            let q = Tensor::vector(q);
            prop_assert!(cross_entropy(&p, &q).unwrap() >= cross_entropy(&p, &p).unwrap() - 1e-12);
        }
    }
}
