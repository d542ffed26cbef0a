use alloc::vec::Vec;

use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-6;

/// Layer normalization over the feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(1, width, T::one()),
            beta: Tensor::zeros(1, width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: Tensor::zeros(1, width),
            beta: Tensor::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LayerNormCache<T>) {
        let (n, d) = x.shape();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let eps = T::lit(EPS);
        let mut xhat = Tensor::zeros(n, d);
        let mut y = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let (g, b) = (self.gamma.as_slice(), self.beta.as_slice());
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * is;
            }
            let yr = y.row_mut(i);
            let xh = xhat.row(i);
            for j in 0..d {
                yr[j] = xh[j] * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
    ) -> Tensor<T> {
        let (n, d) = dy.shape();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let g = self.gamma.as_slice();
        let mut dx = Tensor::zeros(n, d);
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            {
                let gg = grad.gamma.as_mut_slice();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gb = grad.beta.as_mut_slice();
                for j in 0..d {
                    gb[j] += dyr[j];
                }
            }
            let mut mean_dxh = T::zero();
            let mut mean_dxh_xh = T::zero();
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            let is = cache.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = is * (dyr[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

impl<T> LayerNormCache<T> {
    pub(crate) fn rows(&self) -> usize {
        self.inv_std.len()
    }
}
