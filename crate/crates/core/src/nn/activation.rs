use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(CUBIC);
    x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

/// Gradient through [`gelu`] given its pre-activation input.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(CUBIC);
    let three_c = T::lit(3.0 * CUBIC);
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&v, &g)| {
            let t = (k * (v + c * v * v * v)).tanh();
            let dt = (T::one() - t * t) * k * (T::one() + three_c * v * v);
            g * (half * (T::one() + t) + half * v * dt)
        })
        .collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}
