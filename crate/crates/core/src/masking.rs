//! Dirichlet-weighted visible-token budgeting across modalities, plus the
//! gather/scatter bookkeeping that routes tokens between encoder and decoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Per-modality visible/masked patch index sets for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Global masking ratio.
    #[serde(rename = "r")]
    pub ratio: f64,
    /// Dirichlet concentration the weights were drawn with; `None` for
    /// constructed plans.
    pub alpha: Option<f64>,
    /// Patches per modality (`L`).
    pub patches: usize,
    pub modalities: Vec<Modality>,
    pub weights: Vec<f64>,
    /// Sorted visible patch indices, aligned with `modalities`.
    pub visible: Vec<Vec<usize>>,
    /// Sorted complement of `visible`.
    pub masked: Vec<Vec<usize>>,
    pub total_visible: usize,
}

/// `⌊(1 − r)·|M|·L⌋`.
pub fn visible_budget(patches: usize, modalities: usize, ratio: f64) -> usize {
    // the epsilon keeps exact products such as 0.7·40 = 28 from flooring to 27
    let exact = (1.0 - ratio) * (modalities * patches) as f64;
    ((exact + 1e-9).floor() as usize).min(modalities * patches)
}

/// Splits `total_visible` slots across modalities.
///
/// Each modality first receives `⌊w_m·total⌋` (clamped to `patches`). The
/// remaining slots go out one at a time in descending order of fractional
/// remainder, ties broken by modality order, skipping full modalities.
pub fn allocate_quotas(weights: &[f64], total_visible: usize, patches: usize) -> Vec<usize> {
    assert!(
        total_visible <= weights.len() * patches,
        "visible budget exceeds available patches"
    );
    let raw: Vec<f64> = weights.iter().map(|&w| w * total_visible as f64).collect();
    let mut quotas: Vec<usize> = raw
        .iter()
        .map(|&x| (x.floor().max(0.0) as usize).min(patches))
        .collect();
    let remainder: Vec<f64> = raw.iter().map(|&x| x - x.floor()).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        remainder[b]
            .partial_cmp(&remainder[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut shortfall = total_visible.saturating_sub(quotas.iter().sum());
    while shortfall > 0 {
        for &i in &order {
            if shortfall == 0 {
                break;
            }
            if quotas[i] < patches {
                quotas[i] += 1;
                shortfall -= 1;
            }
        }
    }
    quotas
}

/// One draw from a symmetric Dirichlet over `n` components.
pub fn sample_dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "Dirichlet concentration must be positive, got {alpha}"
        )));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("{e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Ok(draws.iter().map(|g| g / sum).collect())
    } else {
        // every gamma draw underflowed (tiny alpha): the limit is a vertex
        let mut w = vec![0.0; n];
        w[rng.random_range(0..n)] = 1.0;
        Ok(w)
    }
}

fn check_modalities(modalities: &[Modality]) -> Result<()> {
    if modalities.is_empty() {
        return Err(Error::Plan("plan needs at least one modality".into()));
    }
    if modalities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Plan(
            "plan modalities must be unique and in canonical order".into(),
        ));
    }
    Ok(())
}

/// Samples Dirichlet weights and uniformly random visible sets.
pub fn sample_mask_plan<R: Rng + ?Sized>(
    patches: usize,
    modalities: &[Modality],
    ratio: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let weights = sample_dirichlet(modalities.len(), alpha, rng)?;
    plan_with_weights(patches, modalities, ratio, Some(alpha), weights, rng)
}

/// Like [`sample_mask_plan`] with the modality weights supplied.
pub fn plan_with_weights<R: Rng + ?Sized>(
    patches: usize,
    modalities: &[Modality],
    ratio: f64,
    alpha: Option<f64>,
    weights: Vec<f64>,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_modalities(modalities)?;
    if patches == 0 {
        return Err(Error::Config(
            "plan needs at least one patch per modality".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "masking ratio {ratio} outside [0, 1]"
        )));
    }
    if weights.len() != modalities.len() || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Plan(
            "weights must be non-negative, one per modality".into(),
        ));
    }
    let total_visible = visible_budget(patches, modalities.len(), ratio);
    let quotas = allocate_quotas(&weights, total_visible, patches);
    let visible: Vec<Vec<usize>> = quotas
        .iter()
        .map(|&q| {
            let mut idx = rand::seq::index::sample(rng, patches, q).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(MaskPlan::assemble(
        ratio,
        alpha,
        patches,
        modalities.to_vec(),
        weights,
        visible,
    ))
}

/// Every patch of every listed modality visible.
pub fn full_visibility_plan(patches: usize, modalities: &[Modality]) -> Result<MaskPlan> {
    check_modalities(modalities)?;
    let n = modalities.len();
    Ok(MaskPlan::assemble(
        0.0,
        None,
        patches,
        modalities.to_vec(),
        vec![1.0 / n as f64; n],
        vec![(0..patches).collect(); n],
    ))
}

/// A plan built from explicit visible sets, e.g. "all of T1 visible, all of
/// T1c/T2/FLAIR masked" for cross-modal reconstruction.
pub fn plan_from_visible(patches: usize, sets: Vec<(Modality, Vec<usize>)>) -> Result<MaskPlan> {
    let mut sets = sets;
    sets.sort_by_key(|(m, _)| *m);
    let modalities: Vec<Modality> = sets.iter().map(|(m, _)| *m).collect();
    check_modalities(&modalities)?;
    let mut visible = Vec::with_capacity(sets.len());
    for (m, mut v) in sets {
        v.sort_unstable();
        v.dedup();
        if v.last().is_some_and(|&i| i >= patches) {
            return Err(Error::Plan(format!("visible index out of range for {m}")));
        }
        visible.push(v);
    }
    let total: usize = visible.iter().map(Vec::len).sum();
    let n = modalities.len();
    let weights = if total == 0 {
        vec![1.0 / n as f64; n]
    } else {
        visible
            .iter()
            .map(|v| v.len() as f64 / total as f64)
            .collect()
    };
    let ratio = 1.0 - total as f64 / (n * patches) as f64;
    Ok(MaskPlan::assemble(
        ratio, None, patches, modalities, weights, visible,
    ))
}

impl MaskPlan {
    fn assemble(
        ratio: f64,
        alpha: Option<f64>,
        patches: usize,
        modalities: Vec<Modality>,
        weights: Vec<f64>,
        visible: Vec<Vec<usize>>,
    ) -> Self {
        let masked = visible
            .iter()
            .map(|v| {
                let mut keep = vec![false; patches];
                v.iter().for_each(|&i| keep[i] = true);
                (0..patches).filter(|&i| !keep[i]).collect()
            })
            .collect();
        let total_visible = visible.iter().map(Vec::len).sum();
        Self {
            ratio,
            alpha,
            patches,
            modalities,
            weights,
            visible,
            masked,
            total_visible,
        }
    }

    pub fn position(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    pub fn visible_of(&self, m: Modality) -> &[usize] {
        self.position(m).map_or(&[], |i| &self.visible[i])
    }

    pub fn masked_of(&self, m: Modality) -> &[usize] {
        self.position(m).map_or(&[], |i| &self.masked[i])
    }

    pub fn is_full_visibility(&self) -> bool {
        self.masked.iter().all(Vec::is_empty)
    }

    /// Provenance of the gathered encoder sequence, in gather order.
    pub fn gather_order(&self) -> Vec<(Modality, usize)> {
        self.modalities
            .iter()
            .zip(&self.visible)
            .flat_map(|(&m, v)| v.iter().map(move |&i| (m, i)))
            .collect()
    }

    /// Checks every structural invariant of a plan.
    pub fn validate(&self) -> Result<()> {
        check_modalities(&self.modalities)?;
        let n = self.modalities.len();
        if self.visible.len() != n || self.masked.len() != n || self.weights.len() != n {
            return Err(Error::Plan(
                "per-modality lists have inconsistent lengths".into(),
            ));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Plan(format!(
                "weights do not form a simplex point (sum {wsum})"
            )));
        }
        let mut total = 0;
        for (v, m) in self.visible.iter().zip(&self.masked) {
            let mut seen = vec![0u8; self.patches];
            for &i in v.iter().chain(m) {
                if i >= self.patches {
                    return Err(Error::Plan(format!("patch index {i} out of range")));
                }
                seen[i] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(Error::Plan(
                    "visible and masked sets do not partition the patches".into(),
                ));
            }
            if v.windows(2).any(|w| w[0] >= w[1]) || m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Plan("index sets must be sorted".into()));
            }
            total += v.len();
        }
        if total != self.total_visible {
            return Err(Error::Plan(
                "total_visible does not match the visible sets".into(),
            ));
        }
        Ok(())
    }
}

/// Concatenates visible tokens in canonical modality order, ascending patch
/// index within each modality.
pub fn gather_visible<T: Scalar>(
    sequences: &PerModality<TokenSequence<T>>,
    plan: &MaskPlan,
) -> Result<TokenSequence<T>> {
    let mut parts = Vec::with_capacity(plan.modalities.len());
    let mut provenance = Vec::with_capacity(plan.total_visible);
    for (m, vis) in plan.modalities.iter().zip(&plan.visible) {
        let seq = sequences.get(*m).ok_or(Error::MissingModality(*m))?;
        let mut rows = Vec::with_capacity(vis.len());
        for &i in vis {
            let r = seq
                .provenance
                .iter()
                .position(|&(pm, pi)| pm == *m && pi == i)
                .ok_or_else(|| Error::Plan(format!("token ({m}, {i}) missing from sequence")))?;
            rows.push(r);
        }
        parts.push(seq.tokens.select_rows(&rows));
        provenance.extend(vis.iter().map(|&i| (*m, i)));
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let width = sequences.iter().next().map_or(0, |(_, s)| s.width());
    let tokens = if refs.is_empty() {
        Tensor::zeros(0, width)
    } else {
        Tensor::vstack(&refs)
    };
    Ok(TokenSequence { tokens, provenance })
}

/// Places each encoded token at its `(modality, index)` slot and fills the
/// remaining slots with the shared mask token, yielding one `L × d′` matrix
/// per plan modality.
pub fn scatter_with_mask_tokens<T: Scalar>(
    encoded: &TokenSequence<T>,
    plan: &MaskPlan,
    mask_token: &[T],
) -> Result<PerModality<Tensor<T>>> {
    let width = mask_token.len();
    if encoded.width() != width {
        return Err(Error::Dimension(format!(
            "encoded width {} does not match mask token width {width}",
            encoded.width()
        )));
    }
    if encoded.len() != plan.total_visible {
        return Err(Error::Plan(format!(
            "{} encoded tokens for a plan with {} visible",
            encoded.len(),
            plan.total_visible
        )));
    }
    let mut out: PerModality<Tensor<T>> = PerModality::new();
    let mut filled: PerModality<Vec<bool>> = PerModality::new();
    for &m in &plan.modalities {
        let mut z = Tensor::zeros(plan.patches, width);
        for &i in plan.masked_of(m) {
            z.row_mut(i).copy_from_slice(mask_token);
        }
        out.insert(m, z);
        filled.insert(m, vec![false; plan.patches]);
    }
    for (r, &(m, i)) in encoded.provenance.iter().enumerate() {
        let is_visible = plan.visible_of(m).binary_search(&i).is_ok();
        let slot = filled.get_mut(m).filter(|_| is_visible).ok_or_else(|| {
            Error::Plan(format!(
                "encoded token ({m}, {i}) is not visible in the plan"
            ))
        })?;
        if core::mem::replace(&mut slot[i], true) {
            return Err(Error::Plan(format!("duplicate encoded token ({m}, {i})")));
        }
        out.get_mut(m)
            .unwrap()
            .row_mut(i)
            .copy_from_slice(encoded.tokens.row(r));
    }
    Ok(out)
}

/// Gradient of [`scatter_with_mask_tokens`]: per-row gradient of the encoded
/// tokens and the summed gradient of the shared mask token.
pub fn scatter_backward<T: Scalar>(
    d_full: &PerModality<Tensor<T>>,
    provenance: &[(Modality, usize)],
    plan: &MaskPlan,
    width: usize,
) -> (Tensor<T>, Vec<T>) {
    let mut d_encoded = Tensor::zeros(provenance.len(), width);
    for (r, &(m, i)) in provenance.iter().enumerate() {
        d_encoded
            .row_mut(r)
            .copy_from_slice(d_full.get(m).unwrap().row(i));
    }
    let mut d_mask = vec![T::zero(); width];
    for &m in &plan.modalities {
        let d = d_full.get(m).unwrap();
        for &i in plan.masked_of(m) {
            for (a, &b) in d_mask.iter_mut().zip(d.row(i)) {
                *a += b;
            }
        }
    }
    (d_encoded, d_mask)
}
