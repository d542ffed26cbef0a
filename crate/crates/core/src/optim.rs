//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Biases, normalization parameters and learned tokens are not decayed.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    if matches!(last, "bias" | "gamma" | "beta" | "cls_token" | "mask_token") {
        return false;
    }
    !name.split('.').any(|seg| seg == "modality_embed")
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    decay: Vec<bool>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: Parameters<T>>(params: &P, config: AdamWConfig) -> Self {
        let named = params.named_parameters();
        Self {
            config,
            decay: named.iter().map(|(n, _)| decays(n)).collect(),
            m: named.iter().map(|(_, t)| t.zeros_like()).collect(),
            v: named.iter().map(|(_, t)| t.zeros_like()).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`; `grads` must mirror `params`.
    ///
    /// A tensor whose gradient is identically zero took no part in the loss
    /// (an unused tokenizer or the decoder during fine-tuning). It is left
    /// alone entirely: no decay, no moment update.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, t);
        let grads: Vec<&Tensor<T>> = {
            let mut g = Vec::with_capacity(self.m.len());
            grads.visit("", &mut |_, t| g.push(t));
            g
        };
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient structure does not match parameters"
        );
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * c.weight_decay);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let g = grads[i];
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let decay = self.decay[i];
            if g.as_slice().iter().all(|x| *x == T::zero()) {
                i += 1;
                return;
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v)
            {
                if decay {
                    *pv *= shrink;
                }
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv * inv_bc1;
                let vhat = *vv * inv_bc2;
                *pv -= lr_t * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1e-3), 1e-3);
        assert!((lr_schedule(55, 100, 10, 1e-3) - 5e-4).abs() < 1e-15);
        assert!(lr_schedule(100, 100, 10, 1e-3).abs() < 1e-15);
        // continuity at the junction
        assert!((lr_schedule(9, 1000, 10, 1.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn decay_rule() {
        for name in [
            "encoder.blocks.0.attn.qkv.weight",
            "tokenizer.T1.weight",
            "output.weight",
        ] {
            assert!(decays(name), "{name}");
        }
        for name in [
            "latent.bias",
            "encoder.norm.gamma",
            "encoder.blocks.1.norm2.beta",
            "cls_token",
            "mask_token",
            "modality_embed.FLAIR",
        ] {
            assert!(!decays(name), "{name}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first Adam step is lr·sign(g)
        let mut p = Linear::<f64>::zeros(2, 1);
        p.weight.as_mut_slice().copy_from_slice(&[1.0, -1.0]);
        let mut g = Linear::<f64>::zeros(2, 1);
        g.weight.as_mut_slice().copy_from_slice(&[0.3, -2.0]);
        g.bias.as_mut_slice()[0] = 5.0;
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut p, &g, 0.1);
        assert!((p.weight.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.weight.get(1, 0) + 0.9).abs() < 1e-6);
        assert!((p.bias.get(0, 0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_only_touches_decayed_names() {
        let mut p = Linear::<f64>::zeros(1, 1);
        p.weight.set(0, 0, 2.0);
        p.bias.set(0, 0, 2.0);
        let mut g = Linear::<f64>::zeros(1, 1);
        g.weight.set(0, 0, 1e-3);
        g.bias.set(0, 0, 1e-3);
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        opt.step(&mut p, &g, 0.1);
        assert!((p.weight.get(0, 0) - (2.0 * 0.95 - 0.1)).abs() < 1e-6);
        assert!((p.bias.get(0, 0) - 1.9).abs() < 1e-6);
    }

    #[test]
    fn tensors_without_gradient_are_left_alone() {
        let mut p = Linear::<f64>::zeros(2, 1);
        p.weight.as_mut_slice().copy_from_slice(&[1.0, 1.0]);
        let mut g = Linear::<f64>::zeros(2, 1);
        g.bias.set(0, 0, 1.0);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.step(&mut p, &g, 0.1);
        assert_eq!(p.weight.as_slice(), &[1.0, 1.0]);
        assert!((p.bias.get(0, 0) + 0.1).abs() < 1e-6);
    }
}
