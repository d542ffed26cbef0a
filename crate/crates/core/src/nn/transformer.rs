use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{gelu, gelu_backward, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::init(dim, heads, std, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp {
                fc1: Linear::init(dim, mlp_dim, std, rng),
                fc2: Linear::init(mlp_dim, dim, std, rng),
            },
        }
    }

    pub fn zeros(dim: usize, heads: usize, mlp_dim: usize) -> Self {
        Self {
            norm1: LayerNorm::zeros(dim),
            attn: Attention::zeros(dim, heads),
            norm2: LayerNorm::zeros(dim),
            mlp: Mlp {
                fc1: Linear::zeros(dim, mlp_dim),
                fc2: Linear::zeros(mlp_dim, dim),
            },
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let (a_in, ln1) = self.norm1.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in);
        let mut x1 = x.clone();
        x1.add_assign(&a_out);
        let (m_in, ln2) = self.norm2.forward(&x1);
        let (m_out, mlp) = self.mlp.forward(&m_in);
        x1.add_assign(&m_out);
        (
            x1,
            BlockCache {
                ln1,
                attn,
                ln2,
                mlp,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let dm_in = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let mut dx1 = self.norm2.backward(&cache.ln2, &dm_in, &mut grad.norm2);
        dx1.add_assign(dy);
        let da_in = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        let mut dx = self.norm1.backward(&cache.ln1, &da_in, &mut grad.norm1);
        dx.add_assign(&dx1);
        dx
    }
}

/// A stack of [`Block`]s followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

pub struct TransformerCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

pub struct TransformerOutput<T> {
    /// Final normalized sequence.
    pub output: Tensor<T>,
    /// Raw output of every block, before the final norm.
    pub per_block: Vec<Tensor<T>>,
}

impl<T: Scalar> Transformer<T> {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..depth)
                .map(|_| Block::init(dim, heads, mlp_dim, std, rng))
                .collect(),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn zeros(dim: usize, depth: usize, heads: usize, mlp_dim: usize) -> Self {
        Self {
            blocks: (0..depth)
                .map(|_| Block::zeros(dim, heads, mlp_dim))
                .collect(),
            norm: LayerNorm::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (TransformerOutput<T>, TransformerCache<T>) {
        let mut h = x.clone();
        let mut per_block = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(&h);
            per_block.push(out.clone());
            caches.push(c);
            h = out;
        }
        let (output, norm) = self.norm.forward(&h);
        (
            TransformerOutput { output, per_block },
            TransformerCache {
                blocks: caches,
                norm,
            },
        )
    }

    /// Backpropagates `d_output` (w.r.t. the normalized output) plus optional
    /// gradients injected at each block's raw output.
    pub fn backward(
        &self,
        cache: &TransformerCache<T>,
        d_output: Option<&Tensor<T>>,
        d_per_block: Option<&[Option<Tensor<T>>]>,
        grad: &mut Self,
    ) -> Tensor<T> {
        let last = self.blocks.len() - 1;
        let mut dh = match d_output {
            Some(d) => self.norm.backward(&cache.norm, d, &mut grad.norm),
            None => Tensor::zeros(cache.norm_rows(), self.norm.gamma.cols()),
        };
        for i in (0..=last).rev() {
            if let Some(Some(extra)) = d_per_block.map(|d| &d[i]) {
                dh.add_assign(extra);
            }
            dh = self.blocks[i].backward(&cache.blocks[i], &dh, &mut grad.blocks[i]);
        }
        dh
    }
}

impl<T: Scalar> TransformerCache<T> {
    fn norm_rows(&self) -> usize {
        self.norm.rows()
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

impl<T: Scalar> Parameters<T> for Transformer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
