//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

/// Normal(0, std) truncated to two standard deviations (rejection sampled).
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// S4D-real initialization of the log decay rates: row `d` is
/// `[ln 1, ln 2, ..., ln N]`, so that `A = -exp(a_log)` spans `-1..-N`.
pub fn s4d_real_a_log<T: Scalar>(d_inner: usize, d_state: usize) -> Tensor<T> {
    Tensor::from_fn(&[d_inner, d_state], |i| T::lit(((i % d_state) + 1) as f64).ln())
}

/// Bias whose softplus is log-uniform in `[dt_min, dt_max]`.
pub fn dt_bias<T: Scalar>(d_inner: usize, dt_min: f64, dt_max: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[d_inner], |_| {
        let u: f64 = rng.random();
        let dt = (dt_min.ln() + u * (dt_max.ln() - dt_min.ln())).exp();
        // inverse softplus: dt + ln(1 - e^-dt)
        T::lit(dt + (-(-dt).exp_m1()).ln())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dt_bias_lands_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Tensor<f64> = dt_bias(500, 1e-3, 0.1, &mut rng);
        for &v in b.data() {
            let dt = softplus(v);
            assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f32> = trunc_normal(&[10_000], 0.02, &mut rng);
        assert!(t.max_abs() <= 0.04);
        let mean = t.sum() / 10_000.0;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn a_log_rows() {
        let a: Tensor<f64> = s4d_real_a_log(2, 3);
        let neg_a: Vec<f64> = a.data().iter().map(|v| v.exp()).collect();
        assert!(neg_a.iter().zip([1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
