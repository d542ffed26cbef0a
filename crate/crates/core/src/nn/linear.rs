use rand::Rng;

use crate::params::{join, trunc_normal, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map `y = x·W + b` with `W` stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
        }
    }

    /// Truncated-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: trunc_normal(inputs, outputs, std, rng),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(self.bias.as_slice());
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        self.backward_params(x, dy, grad);
        dy.matmul_nt(&self.weight)
    }

    /// Accumulates `dW`, `db` only.
    pub fn backward_params(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) {
        x.matmul_tn_acc(dy, &mut grad.weight);
        for (g, s) in grad.bias.as_mut_slice().iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
