use alloc::vec::Vec;

use rand::Rng;

use crate::params::{join, Parameters};
use crate::scalar::{gemm, Scalar, Strided};
use crate::tensor::Tensor;

use super::Linear;

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    x: Tensor<T>,
    qkv: Tensor<T>,
    probs: Vec<Tensor<T>>,
    ctx: Tensor<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        Self {
            qkv: Linear::init(dim, 3 * dim, std, rng),
            proj: Linear::init(dim, dim, std, rng),
            heads,
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            heads,
        }
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.proj.inputs();
        (d, d / self.heads)
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        let n = x.rows();
        let (d, dh) = self.dims();
        let qkv = self.qkv.forward(x);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut ctx = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut p = Tensor::zeros(n, n);
            gemm(
                n,
                dh,
                n,
                scale,
                qkv.as_slice(),
                Strided {
                    offset: h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
                qkv.as_slice(),
                Strided {
                    offset: d + h * dh,
                    row_stride: 1,
                    col_stride: 3 * d,
                },
                T::zero(),
                p.as_mut_slice(),
                Strided::row_major(n),
            );
            softmax_rows(&mut p);
            gemm(
                n,
                n,
                dh,
                T::one(),
                p.as_slice(),
                Strided::row_major(n),
                qkv.as_slice(),
                Strided {
                    offset: 2 * d + h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
                T::zero(),
                ctx.as_mut_slice(),
                Strided {
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
            );
            probs.push(p);
        }
        let y = self.proj.forward(&ctx);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
    ) -> Tensor<T> {
        let n = dy.rows();
        let (d, dh) = self.dims();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let dctx = self.proj.backward(&cache.ctx, dy, &mut grad.proj);
        let qkv = cache.qkv.as_slice();
        let mut dqkv = Tensor::zeros(n, 3 * d);
        let mut dp = Tensor::zeros(n, n);
        for (h, p) in cache.probs.iter().enumerate() {
            // dP = dctx_h · v_hᵀ
            gemm(
                n,
                dh,
                n,
                T::one(),
                dctx.as_slice(),
                Strided {
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                qkv,
                Strided {
                    offset: 2 * d + h * dh,
                    row_stride: 1,
                    col_stride: 3 * d,
                },
                T::zero(),
                dp.as_mut_slice(),
                Strided::row_major(n),
            );
            // dv_h = Pᵀ · dctx_h
            gemm(
                n,
                n,
                dh,
                T::one(),
                p.as_slice(),
                Strided::transposed(n),
                dctx.as_slice(),
                Strided {
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                T::zero(),
                dqkv.as_mut_slice(),
                Strided {
                    offset: 2 * d + h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
            );
            // softmax backward in place: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..n {
                let pr = p.row(i);
                let dr = dp.row_mut(i);
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            // dq_h = scale · dS · k_h
            gemm(
                n,
                n,
                dh,
                scale,
                dp.as_slice(),
                Strided::row_major(n),
                qkv,
                Strided {
                    offset: d + h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
                T::zero(),
                dqkv.as_mut_slice(),
                Strided {
                    offset: h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
            );
            // dk_h = scale · dSᵀ · q_h
            gemm(
                n,
                n,
                dh,
                scale,
                dp.as_slice(),
                Strided::transposed(n),
                qkv,
                Strided {
                    offset: h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
                T::zero(),
                dqkv.as_mut_slice(),
                Strided {
                    offset: d + h * dh,
                    row_stride: 3 * d,
                    col_stride: 1,
                },
            );
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

fn softmax_rows<T: Scalar>(p: &mut Tensor<T>) {
    for i in 0..p.rows() {
        let r = p.row_mut(i);
        let max = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        r.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Scalar> Parameters<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
