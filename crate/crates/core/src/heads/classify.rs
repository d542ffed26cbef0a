//! Binary subtype head: a single logit from the encoder's cls output.

use rand::Rng;

use super::{backward_from_cls, encode_full};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{ModelConfig, ModelState, INIT_STD};
use crate::nn::Linear;
use crate::params::{join, Parameters};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;
use crate::volume::MultimodalVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> ClsHead<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(dim, 1, INIT_STD, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            linear: Linear::zeros(dim, 1),
        }
    }
}

impl<T: Scalar> Parameters<T> for ClsHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// `−[y·log σ(z) + (1−y)·log(1−σ(z))]` without forming σ(z).
pub fn bce_with_logits<T: Scalar>(logit: T, label: T) -> T {
    softplus(logit) - label * logit
}

/// Raw logit; the GBM-like probability is `σ(logit)`.
pub fn classify<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &ClsHead<T>,
    config: &ModelConfig,
) -> Result<T> {
    let full = encode_full(volume, subset, state, config)?;
    Ok(head
        .linear
        .forward(&Tensor::row_vector(full.enc.cls_out))
        .get(0, 0))
}

/// BCE for one patient with gradients for the encoder and the head.
pub fn cls_loss_and_grad<T: Scalar>(
    volume: &MultimodalVolume,
    label: u8,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &ClsHead<T>,
    config: &ModelConfig,
) -> Result<(T, ModelState<T>, ClsHead<T>)> {
    if label > 1 {
        return Err(Error::InvalidLabel(alloc::format!(
            "binary label must be 0 or 1, got {label}"
        )));
    }
    let full = encode_full(volume, subset, state, config)?;
    let x = Tensor::row_vector(full.enc.cls_out.clone());
    let z = head.linear.forward(&x).get(0, 0);
    let y = T::from_u8(label).unwrap();
    let loss = bce_with_logits(z, y);
    let mut head_grad = ClsHead::zeros(config.dim);
    let dz = Tensor::row_vector(alloc::vec![sigmoid(z) - y]);
    let d_cls = head.linear.backward(&x, &dz, &mut head_grad.linear);
    let mut grads = ModelState::zeros(config);
    backward_from_cls(&full, d_cls.as_slice(), state, &mut grads);
    Ok((loss, grads, head_grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_direct_formula_and_is_stable() {
        for &(z, y) in &[(0.3f64, 1.0), (-1.2, 0.0), (2.0, 0.0)] {
            let p = 1.0 / (1.0 + (-z).exp());
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logits(z, y) - direct).abs() < 1e-12);
        }
        assert!(bce_with_logits(100.0f64, 1.0).abs() < 1e-12);
        assert!((bce_with_logits(-100.0f64, 1.0) - 100.0).abs() < 1e-9);
    }
}
