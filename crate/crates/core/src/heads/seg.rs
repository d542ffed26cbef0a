//! Convolutional segmentation decoder fed by four encoder depths and the raw
//! volume.
//!
//! Resolution level `ℓ` has grid `patch_grid · 2^ℓ`; level `n = log2 p` is the
//! voxel grid. Transposed convolutions with kernel 2 and stride 2 are written
//! as a pointwise linear map to `8c` channels followed by a voxel shuffle.
//! Every encoder feature grid is layer-normalized on entry, so the decoder
//! sees features on the same scale whether the encoder is fresh or
//! pre-trained.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{aggregate_backward, aggregate_hidden_states, encode_full};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::model::{encode_backward, ModelConfig, ModelState};
use crate::nn::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
use crate::params::{join, normal, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{Grid3, MultimodalVolume, SegmentationLabel, Shape3};

pub const SEG_CLASSES: usize = 4;
/// Channels at every decoder level.
pub const SEG_CHANNELS: usize = 16;
pub const DICE_SMOOTH: f64 = 1e-5;

const SKIPS: usize = 3;

/// 1-based encoder blocks feeding the decoder: quarter, half, three-quarter
/// and full depth. The last one is the bottleneck.
pub fn seg_blocks(depth: usize) -> [usize; 4] {
    [
        (depth / 4).max(1),
        (depth / 2).max(1),
        (3 * depth / 4).max(1),
        depth,
    ]
}

fn levels(patch: usize) -> Result<usize> {
    if !patch.is_power_of_two() || patch < 2 {
        return Err(Error::Config(format!(
            "segmentation decoder needs a power-of-two patch size, got {patch}"
        )));
    }
    Ok(patch.trailing_zeros() as usize)
}

/// Level at which skip `k` (1..=3) joins the decoder.
fn skip_level(k: usize, n: usize) -> usize {
    (n + k).saturating_sub(4)
}

fn scaled(g: Shape3, level: usize) -> Shape3 {
    (g.0 << level, g.1 << level, g.2 << level)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipPath<T> {
    pub proj: Linear<T>,
    pub up: Vec<Linear<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegHead<T> {
    pub channels: usize,
    pub patch_grid: Shape3,
    /// Entry normalization of the three skip grids, then the bottleneck.
    pub norms: Vec<LayerNorm<T>>,
    pub bottleneck: Linear<T>,
    pub skips: Vec<SkipPath<T>>,
    /// 3×3×3 convolution over the four raw channels, as an im2col matrix.
    pub raw_conv: Linear<T>,
    pub up: Vec<Linear<T>>,
    pub fuse: Vec<Linear<T>>,
    pub out: Linear<T>,
}

impl<T: Scalar> SegHead<T> {
    fn build(
        config: &ModelConfig,
        channels: usize,
        norm: fn(usize) -> LayerNorm<T>,
        mut make: impl FnMut(usize, usize) -> Linear<T>,
    ) -> Result<Self> {
        let n = levels(config.patch)?;
        let c = channels;
        let d = config.dim;
        let skips = (1..=SKIPS)
            .map(|k| SkipPath {
                proj: make(d, c),
                up: (0..skip_level(k, n)).map(|_| make(c, 8 * c)).collect(),
            })
            .collect();
        let fuse = (0..=n)
            .map(|l| {
                let extras =
                    (1..=SKIPS).filter(|&k| skip_level(k, n) == l).count() + usize::from(l == n);
                make(c * (1 + extras), c)
            })
            .collect();
        Ok(Self {
            channels,
            patch_grid: config.grid_dims(),
            norms: (0..=SKIPS).map(|_| norm(d)).collect(),
            bottleneck: make(d, c),
            skips,
            raw_conv: make(27 * Modality::COUNT, c),
            up: (0..n).map(|_| make(c, 8 * c)).collect(),
            fuse,
            out: make(c, SEG_CLASSES),
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, channels, LayerNorm::new, |i, o| {
            let std = num_traits::Float::sqrt(2.0 / i as f64);
            Linear {
                weight: normal(i, o, std, rng),
                bias: Tensor::zeros(1, o),
            }
        })
    }

    pub fn zeros(config: &ModelConfig, channels: usize) -> Result<Self> {
        Self::build(config, channels, LayerNorm::zeros, Linear::zeros)
    }

    fn levels(&self) -> usize {
        self.up.len()
    }
}

impl<T: Scalar> Parameters<T> for SegHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (k, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norms.{k}")), f);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (k, s) in self.skips.iter().enumerate() {
            s.proj.visit(&join(prefix, &format!("skips.{k}.proj")), f);
            for (i, u) in s.up.iter().enumerate() {
                u.visit(&join(prefix, &format!("skips.{k}.up.{i}")), f);
            }
        }
        self.raw_conv.visit(&join(prefix, "raw_conv"), f);
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, u) in self.fuse.iter().enumerate() {
            u.visit(&join(prefix, &format!("fuse.{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (k, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norms.{k}")), f);
        }
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (k, s) in self.skips.iter_mut().enumerate() {
            s.proj
                .visit_mut(&join(prefix, &format!("skips.{k}.proj")), f);
            for (i, u) in s.up.iter_mut().enumerate() {
                u.visit_mut(&join(prefix, &format!("skips.{k}.up.{i}")), f);
            }
        }
        self.raw_conv.visit_mut(&join(prefix, "raw_conv"), f);
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up.{i}")), f);
        }
        for (i, u) in self.fuse.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("fuse.{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Rows of `x` index a grid of shape `dims`; each row's `8·ch` values become
/// a 2×2×2 block of `ch`-channel voxels in the doubled grid.
fn voxel_shuffle<T: Scalar>(x: &Tensor<T>, dims: Shape3, ch: usize) -> Tensor<T> {
    let (a, b, c) = dims;
    let mut out = Tensor::zeros(8 * a * b * c, ch);
    for h in 0..a {
        for w in 0..b {
            for d in 0..c {
                let src = x.row((h * b + w) * c + d);
                for s in 0..8 {
                    let (i, j, k) = (s >> 2, (s >> 1) & 1, s & 1);
                    let dst = ((2 * h + i) * 2 * b + 2 * w + j) * 2 * c + 2 * d + k;
                    out.row_mut(dst).copy_from_slice(&src[s * ch..(s + 1) * ch]);
                }
            }
        }
    }
    out
}

fn voxel_unshuffle<T: Scalar>(y: &Tensor<T>, dims: Shape3, ch: usize) -> Tensor<T> {
    let (a, b, c) = dims;
    let mut out = Tensor::zeros(a * b * c, 8 * ch);
    for h in 0..a {
        for w in 0..b {
            for d in 0..c {
                let row = (h * b + w) * c + d;
                for s in 0..8 {
                    let (i, j, k) = (s >> 2, (s >> 1) & 1, s & 1);
                    let src = ((2 * h + i) * 2 * b + 2 * w + j) * 2 * c + 2 * d + k;
                    out.row_mut(row)[s * ch..(s + 1) * ch].copy_from_slice(y.row(src));
                }
            }
        }
    }
    out
}

/// 3×3×3 neighbourhoods with zero padding; column `offset·C + channel`.
fn im2col<T: Scalar>(x: &Tensor<T>, dims: Shape3) -> Tensor<T> {
    let (a, b, c) = dims;
    let ch = x.cols();
    let mut out = Tensor::zeros(a * b * c, 27 * ch);
    for h in 0..a {
        for w in 0..b {
            for d in 0..c {
                let row = out.row_mut((h * b + w) * c + d);
                for o in 0..27 {
                    let (dh, dw, dd) = (o / 9, (o / 3) % 3, o % 3);
                    let (hh, ww, zz) = (h + dh, w + dw, d + dd);
                    if hh == 0 || ww == 0 || zz == 0 || hh > a || ww > b || zz > c {
                        continue;
                    }
                    let src = x.row(((hh - 1) * b + ww - 1) * c + zz - 1);
                    row[o * ch..(o + 1) * ch].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Four raw input channels in canonical modality order; modalities outside
/// the subset are zero.
pub fn raw_channels<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
) -> Result<Tensor<T>> {
    let (h, w, d) = volume.shape();
    let mut out = Tensor::zeros(h * w * d, Modality::COUNT);
    for &m in subset {
        let g = volume.grid(m)?;
        for (v, &x) in g.as_slice().iter().enumerate() {
            out.set(v, m.index(), T::lit(x as f64));
        }
    }
    Ok(out)
}

struct Unit<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    shuffle: Option<Shape3>,
}

fn unit_forward<T: Scalar>(
    lin: &Linear<T>,
    x: Tensor<T>,
    shuffle: Option<Shape3>,
) -> (Tensor<T>, Unit<T>) {
    let mut pre = lin.forward(&x);
    if let Some(dims) = shuffle {
        pre = voxel_shuffle(&pre, dims, lin.outputs() / 8);
    }
    (
        gelu(&pre),
        Unit {
            input: x,
            pre,
            shuffle,
        },
    )
}

fn unit_backward<T: Scalar>(
    lin: &Linear<T>,
    u: &Unit<T>,
    dy: &Tensor<T>,
    grad: &mut Linear<T>,
) -> Tensor<T> {
    let mut d = gelu_backward(&u.pre, dy);
    if let Some(dims) = u.shuffle {
        d = voxel_unshuffle(&d, dims, lin.outputs() / 8);
    }
    lin.backward(&u.input, &d, grad)
}

fn unit_backward_params<T: Scalar>(
    lin: &Linear<T>,
    u: &Unit<T>,
    dy: &Tensor<T>,
    grad: &mut Linear<T>,
) {
    let d = gelu_backward(&u.pre, dy);
    lin.backward_params(&u.input, &d, grad);
}

struct SegCache<T> {
    norms: Vec<LayerNormCache<T>>,
    bottleneck: Unit<T>,
    skips: Vec<Vec<Unit<T>>>,
    raw: Unit<T>,
    ups: Vec<Unit<T>>,
    fuses: Vec<Unit<T>>,
    out_input: Tensor<T>,
}

impl<T: Scalar> SegHead<T> {
    /// `feats` holds the three skip grids followed by the bottleneck grid,
    /// each `L × d`; `raw` is `V × 4`. Returns `V × 4` logits.
    fn forward(&self, feats: &[Tensor<T>], raw: &Tensor<T>) -> (Tensor<T>, SegCache<T>) {
        let n = self.levels();
        let g = self.patch_grid;
        let (normed, norms): (Vec<Tensor<T>>, Vec<LayerNormCache<T>>) = self
            .norms
            .iter()
            .zip(feats)
            .map(|(n, f)| n.forward(f))
            .unzip();
        let mut normed = normed.into_iter();
        let skip_in: Vec<Tensor<T>> = normed.by_ref().take(SKIPS).collect();
        let (mut x, bottleneck) = unit_forward(&self.bottleneck, normed.next().unwrap(), None);
        let mut skip_out = Vec::with_capacity(SKIPS);
        let mut skips = Vec::with_capacity(SKIPS);
        for (k, path) in self.skips.iter().enumerate() {
            let mut units = Vec::with_capacity(1 + path.up.len());
            let (mut s, u) = unit_forward(&path.proj, skip_in[k].clone(), None);
            units.push(u);
            for (level, lin) in path.up.iter().enumerate() {
                let (next, u) = unit_forward(lin, s, Some(scaled(g, level)));
                s = next;
                units.push(u);
            }
            skip_out.push(s);
            skips.push(units);
        }
        let (raw_feat, raw_unit) = unit_forward(&self.raw_conv, im2col(raw, scaled(g, n)), None);

        let mut ups = Vec::with_capacity(n);
        let mut fuses = Vec::with_capacity(n + 1);
        for level in 0..=n {
            if level > 0 {
                let (y, u) = unit_forward(&self.up[level - 1], x, Some(scaled(g, level - 1)));
                x = y;
                ups.push(u);
            }
            let mut parts: Vec<&Tensor<T>> = vec![&x];
            for (k, s) in skip_out.iter().enumerate() {
                if skip_level(k + 1, n) == level {
                    parts.push(s);
                }
            }
            if level == n {
                parts.push(&raw_feat);
            }
            let cat = Tensor::hstack(&parts);
            let (y, u) = unit_forward(&self.fuse[level], cat, None);
            x = y;
            fuses.push(u);
        }
        let logits = self.out.forward(&x);
        (
            logits,
            SegCache {
                norms,
                bottleneck,
                skips,
                raw: raw_unit,
                ups,
                fuses,
                out_input: x,
            },
        )
    }

    /// Returns gradients for the four feature grids.
    fn backward(
        &self,
        cache: &SegCache<T>,
        d_logits: &Tensor<T>,
        grad: &mut SegHead<T>,
    ) -> Vec<Tensor<T>> {
        let n = self.levels();
        let c = self.channels;
        let mut dx = self.out.backward(&cache.out_input, d_logits, &mut grad.out);
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; SKIPS];
        for level in (0..=n).rev() {
            let dcat = unit_backward(
                &self.fuse[level],
                &cache.fuses[level],
                &dx,
                &mut grad.fuse[level],
            );
            let mut parts = dcat.split_cols(&vec![c; dcat.cols() / c]).into_iter();
            dx = parts.next().unwrap();
            for k in 0..SKIPS {
                if skip_level(k + 1, n) == level {
                    d_skip[k] = parts.next();
                }
            }
            if level == n {
                let d_raw = parts.next().unwrap();
                unit_backward_params(&self.raw_conv, &cache.raw, &d_raw, &mut grad.raw_conv);
            }
            if level > 0 {
                dx = unit_backward(
                    &self.up[level - 1],
                    &cache.ups[level - 1],
                    &dx,
                    &mut grad.up[level - 1],
                );
            }
        }
        let d_bottleneck = unit_backward(
            &self.bottleneck,
            &cache.bottleneck,
            &dx,
            &mut grad.bottleneck,
        );
        let mut out = Vec::with_capacity(4);
        for (k, path) in self.skips.iter().enumerate() {
            let units = &cache.skips[k];
            let gpath = &mut grad.skips[k];
            let mut d = d_skip[k].take().expect("every skip joins the decoder");
            for level in (0..path.up.len()).rev() {
                d = unit_backward(&path.up[level], &units[level + 1], &d, &mut gpath.up[level]);
            }
            out.push(unit_backward(&path.proj, &units[0], &d, &mut gpath.proj));
        }
        out.push(d_bottleneck);
        out.into_iter()
            .enumerate()
            .map(|(k, d)| self.norms[k].backward(&cache.norms[k], &d, &mut grad.norms[k]))
            .collect()
    }
}

/// Cross-entropy, soft Dice and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLoss<T> {
    pub total: T,
    pub cross_entropy: T,
    pub dice: T,
}

/// Mean voxel cross-entropy plus soft Dice over the three foreground
/// classes, and the gradient w.r.t. the logits.
pub fn seg_loss<T: Scalar>(
    logits: &Tensor<T>,
    label: &SegmentationLabel,
) -> Result<(SegLoss<T>, Tensor<T>)> {
    let labels = label.grid.as_slice();
    if logits.rows() != labels.len() || logits.cols() != SEG_CLASSES {
        return Err(Error::Dimension(format!(
            "logits {:?} do not match {} voxels × {SEG_CLASSES} classes",
            logits.shape(),
            labels.len()
        )));
    }
    let v = labels.len();
    let vt = T::from_usize(v).unwrap();
    let mut probs = Tensor::zeros(v, SEG_CLASSES);
    let mut ce = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&a| (a - max).exp()).sum();
        let lse = max + sum.ln();
        ce += lse - z[y as usize];
        for (p, &a) in probs.row_mut(i).iter_mut().zip(z) {
            *p = (a - lse).exp();
        }
    }
    ce /= vt;

    let s = T::lit(DICE_SMOOTH);
    let mut inter = [T::zero(); SEG_CLASSES];
    let mut psum = [T::zero(); SEG_CLASSES];
    let mut ysum = [T::zero(); SEG_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i);
        for cls in 1..SEG_CLASSES {
            psum[cls] += p[cls];
        }
        if y > 0 {
            inter[y as usize] += p[y as usize];
            ysum[y as usize] += T::one();
        }
    }
    let fg = T::from_usize(SEG_CLASSES - 1).unwrap();
    let mut dice_mean = T::zero();
    let mut coef_y = [T::zero(); SEG_CLASSES];
    let mut coef_all = [T::zero(); SEG_CLASSES];
    for cls in 1..SEG_CLASSES {
        let den = psum[cls] + ysum[cls] + s;
        let num = T::lit(2.0) * inter[cls] + s;
        dice_mean += num / den;
        // ∂(num/den)/∂p_vc = (2·y_vc·den − num) / den²
        coef_y[cls] = T::lit(2.0) / den;
        coef_all[cls] = -num / (den * den);
    }
    dice_mean /= fg;
    let dice = T::one() - dice_mean;

    // Dice gradient w.r.t. probabilities goes through the softmax Jacobian;
    // the cross-entropy part uses its closed form p − onehot.
    let mut grad = Tensor::zeros(v, SEG_CLASSES);
    let mut dp = [T::zero(); SEG_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i);
        let mut dot = T::zero();
        for cls in 1..SEG_CLASSES {
            let onehot = if cls == y as usize {
                T::one()
            } else {
                T::zero()
            };
            dp[cls] = -(onehot * coef_y[cls] + coef_all[cls]) / fg;
            dot += p[cls] * dp[cls];
        }
        let row = grad.row_mut(i);
        for cls in 0..SEG_CLASSES {
            let onehot = if cls == y as usize {
                T::one()
            } else {
                T::zero()
            };
            row[cls] = p[cls] * (dp[cls] - dot) + (p[cls] - onehot) / vt;
        }
    }
    Ok((
        SegLoss {
            total: ce + dice,
            cross_entropy: ce,
            dice,
        },
        grad,
    ))
}

/// Voxel logits `V × 4` (row = voxel index of the input grid) for a subset.
pub fn segment<T: Scalar>(
    volume: &MultimodalVolume,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &SegHead<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let full = encode_full(volume, subset, state, config)?;
    let blocks = seg_blocks(config.depth);
    let feats = aggregate_hidden_states(&full.enc.per_block, &full.plan, &blocks)?;
    let raw = raw_channels(volume, &full.plan.modalities)?;
    Ok(head.forward(&feats, &raw).0)
}

/// Segmentation loss for one patient and gradients for encoder and head.
pub fn seg_loss_and_grad<T: Scalar>(
    volume: &MultimodalVolume,
    label: &SegmentationLabel,
    subset: &[Modality],
    state: &ModelState<T>,
    head: &SegHead<T>,
    config: &ModelConfig,
) -> Result<(SegLoss<T>, ModelState<T>, SegHead<T>)> {
    if label.shape() != volume.shape() {
        return Err(Error::Dimension(format!(
            "label shape {:?} differs from volume {:?}",
            label.shape(),
            volume.shape()
        )));
    }
    let full = encode_full(volume, subset, state, config)?;
    let blocks = seg_blocks(config.depth);
    let feats = aggregate_hidden_states(&full.enc.per_block, &full.plan, &blocks)?;
    let raw = raw_channels(volume, &full.plan.modalities)?;
    let (logits, cache) = head.forward(&feats, &raw);
    let (loss, d_logits) = seg_loss(&logits, label)?;
    let mut head_grad = SegHead::zeros(config, head.channels)?;
    let d_feats = head.backward(&cache, &d_logits, &mut head_grad);
    let d_blocks = aggregate_backward(&d_feats, &full.plan, &blocks, config.depth);
    let mut grads = ModelState::zeros(config);
    encode_backward(&full.cache, state, None, Some(&d_blocks), &mut grads);
    Ok((loss, grads, head_grad))
}

/// Arg-max class per voxel.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>, shape: Shape3) -> Result<SegmentationLabel> {
    let data = (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            (0..SEG_CLASSES).fold(0usize, |best, c| if r[c] > r[best] { c } else { best }) as u8
        })
        .collect();
    SegmentationLabel::new(Grid3::from_vec(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_depth_blocks() {
        assert_eq!(seg_blocks(4), [1, 2, 3, 4]);
        assert_eq!(seg_blocks(12), [3, 6, 9, 12]);
    }

    #[test]
    fn skip_levels_for_tiny_and_full_patches() {
        assert_eq!(
            (1..=3).map(|k| skip_level(k, 3)).collect::<Vec<_>>(),
            [0, 1, 2]
        );
        assert_eq!(
            (1..=3).map(|k| skip_level(k, 4)).collect::<Vec<_>>(),
            [1, 2, 3]
        );
    }

    #[test]
    fn shuffle_round_trip_and_placement() {
        let x = Tensor::from_vec(2, 16, (0..32).map(|v| v as f64).collect());
        let y = voxel_shuffle(&x, (2, 1, 1), 2);
        assert_eq!(y.rows(), 16);
        // input row 1 (h = 1), sub-voxel (i, j, k) = (1, 0, 1) → s = 5
        let dst = ((2 + 1) * 2) * 2 + 1;
        assert_eq!(y.row(dst), &[26.0, 27.0]);
        assert_eq!(voxel_unshuffle(&y, (2, 1, 1), 2), x);
    }

    #[test]
    fn im2col_centre_and_padding() {
        let x = Tensor::from_vec(8, 1, (1..=8).map(|v| v as f64).collect());
        let cols = im2col(&x, (2, 2, 2));
        // centre offset 13 holds the voxel itself
        for r in 0..8 {
            assert_eq!(cols.get(r, 13), x.get(r, 0));
        }
        // voxel (0,0,0) has no neighbour at offset 0 (−1,−1,−1)
        assert_eq!(cols.get(0, 0), 0.0);
        // voxel (1,1,1) sees (0,0,0) at offset 0
        assert_eq!(cols.get(7, 0), 1.0);
    }

    #[test]
    fn perfect_logits_give_near_zero_dice() {
        let label =
            SegmentationLabel::new(Grid3::from_vec((2, 2, 1), vec![0, 1, 2, 3]).unwrap()).unwrap();
        let mut logits = Tensor::filled(4, 4, -30.0f64);
        for i in 0..4 {
            logits.set(i, i, 30.0);
        }
        let (loss, _) = seg_loss(&logits, &label).unwrap();
        assert!(loss.dice < 1e-9 && loss.cross_entropy < 1e-9);
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let label =
            SegmentationLabel::new(Grid3::from_vec((3, 2, 1), vec![0, 1, 2, 3, 2, 0]).unwrap())
                .unwrap();
        let logits = Tensor::from_vec(
            6,
            4,
            (0..24)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
                .collect(),
        );
        let (_, g) = seg_loss(&logits, &label).unwrap();
        let h = 1e-6;
        for i in 0..24 {
            let mut a = logits.clone();
            a.as_mut_slice()[i] += h;
            let mut b = logits.clone();
            b.as_mut_slice()[i] -= h;
            let num = (seg_loss(&a, &label).unwrap().0.total
                - seg_loss(&b, &label).unwrap().0.total)
                / (2.0 * h);
            assert!(
                (num - g.as_slice()[i]).abs() < 1e-7,
                "{i}: {num} vs {}",
                g.as_slice()[i]
            );
        }
    }
}
