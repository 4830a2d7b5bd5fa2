use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;

/// Compare analytic gradients of a scalar-valued map against central finite
/// differences at `point`.
///
/// Returns the max over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x);
    assert!(
        tape.value(loss).is_scalar(),
        "grad_check requires a scalar-valued map"
    );
    tape.backward(loss);
    let analytic = tape.grad_or_zeros(x);

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let loss = f(&mut tape, x);
        tape.value(loss).item()
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn linear_map_is_exact() {
        let point = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.0, 0.02]);
        let err = grad_check(|t, x| t.sum(x), &point, 1e-4);
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn softmax_then_index() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let point = Tensor::randn(vec![5], 1.0, &mut rng);
            let err = grad_check(
                |t, x| {
                    let sm = t.softmax_vec(x);
                    t.get(sm, 2)
                },
                &point,
                1e-4,
            );
            assert!(err < 1e-4, "softmax-then-index error {err}");
        }
    }

    #[test]
    fn conv_relu_mean_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let kernel = Tensor::randn(vec![2, 1, 2, 2], 0.5, &mut rng);
        for _ in 0..20 {
            let point = Tensor::randn(vec![1, 3, 3], 1.0, &mut rng);
            let k = kernel.clone();
            let err = grad_check(
                move |t, x| {
                    let kv = t.leaf(k.clone());
                    let y = t.conv2d(x, kv, 1, 0).unwrap();
                    let r = t.relu(y);
                    t.mean(r)
                },
                &point,
                1e-4,
            );
            assert!(err < 1e-4, "conv chain error {err}");
        }
    }
}
