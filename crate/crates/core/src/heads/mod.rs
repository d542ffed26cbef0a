//! Downstream heads on top of the pre-trained encoder.
//!
//! Every head encodes the chosen modality subset with full visibility, so the
//! encoder never sees a modality outside the subset.

mod classify;
mod seg;
mod survival;

pub use classify::{bce_with_logits, classify, cls_loss_and_grad, ClsHead};
pub use seg::{
    predict_labels, raw_channels, seg_blocks, seg_loss, seg_loss_and_grad, segment, SegHead,
    SegLoss, DICE_SMOOTH, SEG_CHANNELS, SEG_CLASSES,
};
pub use survival::{
    assign_interval, discretize_times, hazard_nll, hazard_nll_grad, hazards, surv_loss_and_grad,
    survival_curve, survival_logits, SurvHead,
};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::masking::{full_visibility_plan, MaskPlan};
use crate::modality::Modality;
use crate::model::{
    encode_backward, encode_cached, EncodeCache, EncoderOutput, ModelConfig, ModelState,
};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::MultimodalVolume;

/// Encoder state together with one task head. Head parameters are named
/// under `head.`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel<T, H> {
    pub model: ModelState<T>,
    pub head: H,
}

impl<T: Scalar, H: Parameters<T>> Parameters<T> for TaskModel<T, H> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.model.visit(prefix, f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.model.visit_mut(prefix, f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Canonical, duplicate-free copy of a non-empty subset.
pub fn normalize_subset(subset: &[Modality]) -> Result<Vec<Modality>> {
    let mut s = subset.to_vec();
    s.sort();
    s.dedup();
    if s.is_empty() {
        return Err(Error::Plan("modality subset must be non-empty".into()));
    }
    Ok(s)
}

pub(crate) struct FullEncode<T> {
    pub enc: EncoderOutput<T>,
    pub cache: EncodeCache<T>,
    pub plan: MaskPlan,
}

pub(crate) fn encode_full<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<FullEncode<T>> {
    let subset = normalize_subset(subset)?;
    volume.check_divisible(config.patch)?;
    let plan = full_visibility_plan(config.patches_per_modality(), &subset)?;
    let (enc, cache) = encode_cached(volume, &plan, state, config)?;
    Ok(FullEncode { enc, cache, plan })
}

/// Backpropagates a gradient on `cls_out` into the encoder.
pub(crate) fn backward_from_cls<T: Scalar>(
    full: &FullEncode<T>,
    d_cls: &[T],
    state: &ModelState<T>,
    grads: &mut ModelState<T>,
) {
    let mut d_hidden = Tensor::zeros(full.enc.hidden.rows(), full.enc.hidden.cols());
    d_hidden.row_mut(0).copy_from_slice(d_cls);
    encode_backward(&full.cache, state, Some(&d_hidden), None, grads);
}

/// Averages each selected block's tokens over modalities at every patch
/// location. `blocks` are 1-based block numbers; each output is `L × d` with
/// rows in patch-index order.
pub fn aggregate_hidden_states<T: Scalar>(
    per_block: &[Tensor<T>],
    plan: &MaskPlan,
    blocks: &[usize],
) -> Result<Vec<Tensor<T>>> {
    if !plan.is_full_visibility() {
        return Err(Error::Plan(
            "hidden-state aggregation needs a full-visibility plan".into(),
        ));
    }
    let l = plan.patches;
    let k = plan.modalities.len();
    let inv = T::one() / T::from_usize(k).unwrap();
    blocks
        .iter()
        .map(|&b| {
            let h = per_block.get(b.wrapping_sub(1)).ok_or_else(|| {
                Error::Config(format!("block {b} outside 1..={}", per_block.len()))
            })?;
            if h.rows() != 1 + k * l {
                return Err(Error::Dimension(format!(
                    "block snapshot has {} rows, plan implies {}",
                    h.rows(),
                    1 + k * l
                )));
            }
            let mut out = Tensor::zeros(l, h.cols());
            for m in 0..k {
                for j in 0..l {
                    for (o, &x) in out.row_mut(j).iter_mut().zip(h.row(1 + m * l + j)) {
                        *o += x;
                    }
                }
            }
            out.scale(inv);
            Ok(out)
        })
        .collect()
}

/// Gradient of [`aggregate_hidden_states`] w.r.t. each block snapshot.
pub(crate) fn aggregate_backward<T: Scalar>(
    d_agg: &[Tensor<T>],
    plan: &MaskPlan,
    blocks: &[usize],
    depth: usize,
) -> Vec<Option<Tensor<T>>> {
    let l = plan.patches;
    let k = plan.modalities.len();
    let inv = T::one() / T::from_usize(k).unwrap();
    let mut out: Vec<Option<Tensor<T>>> = vec![None; depth];
    for (d, &b) in d_agg.iter().zip(blocks) {
        let slot = out[b - 1].get_or_insert_with(|| Tensor::zeros(1 + k * l, d.cols()));
        for m in 0..k {
            for j in 0..l {
                for (o, &x) in slot.row_mut(1 + m * l + j).iter_mut().zip(d.row(j)) {
                    *o += x * inv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(k: usize, l: usize) -> MaskPlan {
        full_visibility_plan(l, &Modality::ALL[..k]).unwrap()
    }

    #[test]
    fn single_modality_is_identity_reshape() {
        let l = 4;
        let h = Tensor::from_vec(1 + l, 2, (0..10).map(|x| x as f64).collect());
        let out = aggregate_hidden_states(core::slice::from_ref(&h), &plan(1, l), &[1]).unwrap();
        assert_eq!(out[0], h.slice_rows(1, 1 + l));
    }

    #[test]
    fn duplicated_tokens_leave_mean_unchanged() {
        let l = 3;
        let body = Tensor::from_vec(l, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cls = Tensor::zeros(1, 2);
        let one =
            aggregate_hidden_states(&[Tensor::vstack(&[&cls, &body])], &plan(1, l), &[1]).unwrap();
        let two =
            aggregate_hidden_states(&[Tensor::vstack(&[&cls, &body, &body])], &plan(2, l), &[1])
                .unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn masked_plan_is_rejected() {
        let p = crate::masking::plan_from_visible(2, vec![(Modality::T1, vec![0])]).unwrap();
        assert!(aggregate_hidden_states(&[Tensor::<f64>::zeros(2, 2)], &p, &[1]).is_err());
    }

    #[test]
    fn backward_spreads_evenly() {
        let l = 2;
        let d = [Tensor::from_vec(l, 1, vec![3.0, 6.0])];
        let g = aggregate_backward(&d, &plan(3, l), &[2], 2);
        assert!(g[0].is_none());
        let g1 = g[1].as_ref().unwrap();
        assert_eq!(g1.as_slice(), &[0.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
