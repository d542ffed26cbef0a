//! Discrete-time survival: quantile cut points, per-interval hazards from the
//! cls output and the hazard negative log-likelihood.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{backward_from_cls, encode_full};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{ModelConfig, ModelState, INIT_STD};
use crate::nn::Linear;
use crate::params::{join, Parameters};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;
use crate::volume::{MultimodalVolume, SurvivalRecord};

/// Linear map to `K` hazard logits plus the `K − 1` cut points it was
/// trained against. Only the linear map is a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvHead<T> {
    pub linear: Linear<T>,
    pub cut_points: Vec<f64>,
}

impl<T: Scalar> SurvHead<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, cut_points: Vec<f64>, rng: &mut R) -> Result<Self> {
        check_cuts(&cut_points)?;
        Ok(Self {
            linear: Linear::init(dim, cut_points.len() + 1, INIT_STD, rng),
            cut_points,
        })
    }

    pub fn zeros(dim: usize, intervals: usize) -> Self {
        Self {
            linear: Linear::zeros(dim, intervals),
            cut_points: vec![0.0; intervals.saturating_sub(1)],
        }
    }

    pub fn intervals(&self) -> usize {
        self.linear.outputs()
    }
}

impl<T: Scalar> Parameters<T> for SurvHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

fn check_cuts(cuts: &[f64]) -> Result<()> {
    if cuts.is_empty() {
        return Err(Error::Config(
            "survival head needs at least two intervals".into(),
        ));
    }
    if cuts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::DegenerateQuantiles(
            "cut points must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `K − 1` thresholds at the empirical `j/K` quantiles of all observed times,
/// events and censored pooled.
pub fn discretize_times(times: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config(format!(
            "need at least two intervals, got {k}"
        )));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::OutOfRange("survival times must be finite".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateQuantiles(format!(
            "{} distinct times cannot support {k} intervals",
            distinct.len()
        )));
    }
    let cuts: Vec<f64> = (1..k)
        .map(|j| quantile(&sorted, j as f64 / k as f64))
        .collect();
    check_cuts(&cuts)?;
    Ok(cuts)
}

/// `1 + #{cuts strictly below t}`, which is at most `K`.
pub fn assign_interval(time: f64, cuts: &[f64]) -> usize {
    1 + cuts.iter().filter(|&&c| c < time).count()
}

/// Per-interval hazards `σ(a_k)`.
pub fn hazards<T: Scalar>(logits: &[T]) -> Vec<T> {
    logits.iter().map(|&a| sigmoid(a)).collect()
}

/// `−[δ·log σ(a_k) + Σ_{j ≤ k−δ} log(1 − σ(a_j))]` for a 1-based interval.
pub fn hazard_nll<T: Scalar>(logits: &[T], interval: usize, event: bool) -> Result<T> {
    Ok(hazard_nll_grad(logits, interval, event)?.0)
}

/// [`hazard_nll`] and its gradient w.r.t. the logits.
pub fn hazard_nll_grad<T: Scalar>(
    logits: &[T],
    interval: usize,
    event: bool,
) -> Result<(T, Vec<T>)> {
    if interval == 0 || interval > logits.len() {
        return Err(Error::OutOfRange(format!(
            "interval {interval} outside 1..={}",
            logits.len()
        )));
    }
    let survived = interval - usize::from(event);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    // −log(1 − σ(a)) = softplus(a);  −log σ(a) = softplus(−a)
    for j in 0..survived {
        loss += softplus(logits[j]);
        grad[j] = sigmoid(logits[j]);
    }
    if event {
        let a = logits[interval - 1];
        loss += softplus(-a);
        grad[interval - 1] = sigmoid(a) - T::one();
    }
    Ok((loss, grad))
}

/// `S(t_k) = Π_{j ≤ k} (1 − h_j)`.
pub fn survival_curve<T: Scalar>(hazards: &[T]) -> Result<Vec<T>> {
    let mut s = T::one();
    hazards
        .iter()
        .map(|&h| {
            if !(h >= T::zero() && h <= T::one()) {
                return Err(Error::OutOfRange(format!("hazard {h:?} outside [0, 1]")));
            }
            s *= T::one() - h;
            Ok(s)
        })
        .collect()
}

/// `K` hazard logits for one patient.
pub fn survival_logits<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &SurvHead<T>,
    config: &ModelConfig,
) -> Result<Vec<T>> {
    let full = encode_full(volume, subset, state, config)?;
    Ok(head
        .linear
        .forward(&Tensor::row_vector(full.enc.cls_out))
        .into_vec())
}

/// Hazard NLL for one patient (intervals must be assigned) with gradients
/// for the encoder and head. Batch losses are sums of these.
pub fn surv_loss_and_grad<T: Scalar>(
    volume: &MultimodalVolume,
    record: &SurvivalRecord,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &SurvHead<T>,
    config: &ModelConfig,
) -> Result<(T, ModelState<T>, SurvHead<T>)> {
    let interval = record.interval.ok_or_else(|| {
        Error::InvalidLabel(format!(
            "patient {} has no interval assigned",
            volume.patient_id
        ))
    })?;
    let full = encode_full(volume, subset, state, config)?;
    let x = Tensor::row_vector(full.enc.cls_out.clone());
    let logits = head.linear.forward(&x);
    let (loss, d_logits) = hazard_nll_grad(logits.as_slice(), interval, record.event)?;
    let mut head_grad = SurvHead::zeros(config.dim, head.intervals());
    head_grad.cut_points = head.cut_points.clone();
    let d_cls = head
        .linear
        .backward(&x, &Tensor::row_vector(d_logits), &mut head_grad.linear);
    let mut grads = ModelState::zeros(config);
    backward_from_cls(&full, d_cls.as_slice(), state, &mut grads);
    Ok((loss, grads, head_grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert!(
            (hazard_nll(&[0.0f64, 3.0], 1, true).unwrap() - core::f64::consts::LN_2).abs() < 1e-12
        );
        assert!(
            (hazard_nll(&[0.0f64, 0.0, 5.0], 2, false).unwrap() - 1.386_294_361_119_890_6).abs()
                < 1e-12
        );
    }

    #[test]
    fn decomposition_at_every_interval() {
        let a = [0.3f64, -1.1, 2.0, 0.7, -0.4];
        let h: Vec<f64> = hazards(&a);
        for k in 1..=a.len() {
            let censored: f64 = -(0..k).map(|j| (1.0 - h[j]).ln()).sum::<f64>();
            assert!((hazard_nll(&a, k, false).unwrap() - censored).abs() < 1e-12);
            let event = -(h[k - 1].ln() + (0..k - 1).map(|j| (1.0 - h[j]).ln()).sum::<f64>());
            assert!((hazard_nll(&a, k, true).unwrap() - event).abs() < 1e-12);
        }
        assert!(hazard_nll(&a, 0, true).is_err());
        assert!(hazard_nll(&a, 6, false).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let a = [50.0f64, -50.0, 50.0];
        for k in 1..=3 {
            for e in [false, true] {
                let l = hazard_nll(&a, k, e).unwrap();
                assert!(l.is_finite() && l >= 0.0);
            }
        }
    }

    #[test]
    fn discretization_examples() {
        let times: Vec<f64> = (1..=10).map(f64::from).collect();
        let cuts = discretize_times(&times, 10).unwrap();
        let iv: Vec<usize> = times.iter().map(|&t| assign_interval(t, &cuts)).collect();
        assert_eq!(iv, (1..=10).collect::<Vec<_>>());
        assert_eq!(
            discretize_times(&[1.0, 4.0, 2.0, 9.0, 3.0], 2).unwrap(),
            vec![3.0]
        );
        assert!(matches!(
            discretize_times(&[1.0, 1.0, 2.0], 3),
            Err(Error::DegenerateQuantiles(_))
        ));
    }

    #[test]
    fn survival_curve_examples() {
        assert_eq!(survival_curve(&[0.0f64, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(survival_curve(&[0.5f64, 0.5]).unwrap(), vec![0.5, 0.25]);
        assert!(survival_curve(&[1.5f64]).is_err());
    }
}
