//! Central-difference gradients, used to check hand-written backward passes.

use crate::tensor::Tensor4;

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor4) -> f64, x: &Tensor4, eps: f64) -> Tensor4 {
    assert!(eps > 0.0, "finite_diff_grad needs eps > 0");
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d, conv2d_backward};
    use crate::testutil::{random_spec, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_functional_has_unit_gradient() {
        let x = Tensor4::from_fn((2, 1, 2, 3), |t, _, y, x| (t + y) as f64 - x as f64);
        let g = finite_diff_grad(|x| x.sum(), &x, 1e-3);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn quadratic() {
        let x = Tensor4::full((1, 2, 2, 2), 2.0);
        let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &x, 1e-3);
        assert!(g.data().iter().all(|v| (v - 4.0).abs() < 1e-4));
    }

    #[test]
    fn matches_conv_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, groups) in &[(1, 1), (2, 1), (1, 2)] {
            let spec = random_spec(&mut rng, 2, 4, 3, stride, 1, groups, true);
            let x = random_tensor(&mut rng, (2, 2, 5, 5), 1.0);
            let probe = random_tensor(&mut rng, spec.output_shape(x.shape()).unwrap(), 1.0);
            // f(x) = sum(probe ⊙ conv(x)) so the upstream gradient is `probe`
            let f = |x: &Tensor4| {
                conv2d(x, &spec).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let numeric = finite_diff_grad(f, &x, 1e-4);
            let analytic = conv2d_backward(&x, &spec, &probe).unwrap().input;
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                assert!((a - n).abs() <= 1e-3 * n.abs().max(1e-2), "{a} vs {n}");
            }
        }
    }
}
