//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::numkit::tensor::Tensor;

/// Fan-in scaled uniform draw `U(−√(6/fan_in), √(6/fan_in))`. Values are
/// drawn in f64 and cast, so every element type sees the same sequence.
pub fn he_uniform<E: Elem>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel)
        .map(|_| E::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape and draw count agree")
}

/// Fan-in of a `[co, ci, kh, kw]` convolution kernel.
pub fn conv_fan_in(w_shape: &[usize]) -> usize {
    w_shape[1] * w_shape[2] * w_shape[3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn draws_stay_inside_fan_in_bound() {
        let mut rng = stream(7, Domain::ParamInit, 0);
        let t: Tensor<f32> = he_uniform(&[8, 3, 3, 3], conv_fan_in(&[8, 3, 3, 3]), &mut rng);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn same_stream_gives_same_tensor_across_element_types() {
        let mut r32 = stream(3, Domain::ParamInit, 5);
        let mut r64 = stream(3, Domain::ParamInit, 5);
        let t32: Tensor<f32> = he_uniform(&[16], 4, &mut r32);
        let t64: Tensor<f64> = he_uniform(&[16], 4, &mut r64);
        for (&a, &b) in t32.data().iter().zip(t64.data()) {
            assert_eq!(a, b as f32);
        }
    }

    #[test]
    fn sample_mean_is_near_zero() {
        let mut rng = stream(0, Domain::ParamInit, 1);
        let t: Tensor<f64> = he_uniform(&[10_000], 6, &mut rng);
        let mean = t.data().iter().sum::<f64>() / 10_000.0;
        let bound = (1.0f64).sqrt();
        assert!(mean.abs() < 0.05 * bound, "mean {mean}");
    }
}
