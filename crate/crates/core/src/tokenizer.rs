//! Patch extraction and reassembly, per-modality linear patch embeddings and
//! fixed 3D sine-cosine positional encodings.
//!
//! Patch `i` sits at patch-grid coordinate `(a, b, c)` with
//! `i = ((a·(W/p)) + b)·(D/p) + c`; inside a patch, voxels are flattened
//! depth-fastest like the volumes themselves.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::Linear;
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{Grid3, Shape3};

/// Non-overlapping `p³` patches of one modality, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Tensor<T>,
    pub grid_dims: Shape3,
    pub patch: usize,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }
}

pub fn grid_dims(shape: Shape3, p: usize) -> Result<Shape3> {
    if p == 0 || shape.0 % p != 0 || shape.1 % p != 0 || shape.2 % p != 0 {
        return Err(Error::Dimension(format!(
            "shape {shape:?} is not divisible by patch size {p}"
        )));
    }
    Ok((shape.0 / p, shape.1 / p, shape.2 / p))
}

#[inline]
pub fn patch_index(coord: Shape3, dims: Shape3) -> usize {
    (coord.0 * dims.1 + coord.1) * dims.2 + coord.2
}

#[inline]
pub fn patch_coord(index: usize, dims: Shape3) -> Shape3 {
    (
        index / (dims.1 * dims.2),
        (index / dims.2) % dims.1,
        index % dims.2,
    )
}

pub fn patchify<T: Scalar, V: Copy + Into<f64>>(grid: &Grid3<V>, p: usize) -> Result<PatchGrid<T>> {
    let dims = grid_dims(grid.shape(), p)?;
    let n = dims.0 * dims.1 * dims.2;
    let p3 = p * p * p;
    let src = grid.as_slice();
    let (_, w, d) = grid.shape();
    let mut data = Vec::with_capacity(n * p3);
    for i in 0..n {
        let (a, b, c) = patch_coord(i, dims);
        for x in 0..p {
            for y in 0..p {
                let base = ((a * p + x) * w + b * p + y) * d + c * p;
                data.extend(src[base..base + p].iter().map(|&v| T::lit(v.into())));
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::from_vec(n, p3, data),
        grid_dims: dims,
        patch: p,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, p: usize, shape: Shape3) -> Result<Grid3<T>> {
    let dims = grid_dims(shape, p)?;
    let n = dims.0 * dims.1 * dims.2;
    if patches.rows() != n || patches.cols() != p * p * p {
        return Err(Error::Dimension(format!(
            "{}×{} patches do not tile shape {shape:?} with patch size {p}",
            patches.rows(),
            patches.cols()
        )));
    }
    let mut out = Grid3::filled(shape, T::zero());
    let (_, w, d) = shape;
    let dst = out.as_mut_slice();
    for i in 0..n {
        let (a, b, c) = patch_coord(i, dims);
        let row = patches.row(i);
        for x in 0..p {
            for y in 0..p {
                let base = ((a * p + x) * w + b * p + y) * d + c * p;
                let off = (x * p + y) * p;
                dst[base..base + p].copy_from_slice(&row[off..off + p]);
            }
        }
    }
    Ok(out)
}

/// Fixed 3D sine-cosine table of shape `(L, width)`.
///
/// The width is split into three equal even bands, one per axis; each band
/// holds `sin(pos·ω_k)` for its first half and `cos(pos·ω_k)` for its second,
/// with `ω_k = 10000^(-2k/band)`. When the width is not a multiple of 6 the
/// leftover trailing columns are zero.
pub fn sincos_pe<T: Scalar>(dims: Shape3, width: usize) -> Result<Tensor<T>> {
    if width < 6 {
        return Err(Error::Config(format!(
            "positional width {width} is below 6"
        )));
    }
    let band = 2 * (width / 6);
    let half = band / 2;
    let omega: Vec<f64> = (0..half)
        .map(|k| 1.0 / num_traits::Float::powf(10000.0f64, (2 * k) as f64 / band as f64))
        .collect();
    let n = dims.0 * dims.1 * dims.2;
    let mut pe = Tensor::zeros(n, width);
    for i in 0..n {
        let (a, b, c) = patch_coord(i, dims);
        let row = pe.row_mut(i);
        for (axis, pos) in [a, b, c].into_iter().enumerate() {
            let off = axis * band;
            for (k, &w) in omega.iter().enumerate() {
                let angle = pos as f64 * w;
                row[off + k] = T::lit(num_traits::Float::sin(angle));
                row[off + half + k] = T::lit(num_traits::Float::cos(angle));
            }
        }
    }
    Ok(pe)
}

/// Embedded tokens with the `(modality, patch_index)` each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub provenance: Vec<(Modality, usize)>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// One affine patch embedding per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams<T> {
    pub maps: PerModality<Linear<T>>,
}

impl<T: Scalar> TokenizerParams<T> {
    pub fn init<R: Rng + ?Sized>(patch_voxels: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            maps: Modality::ALL
                .iter()
                .map(|&m| (m, Linear::init(patch_voxels, dim, std, rng)))
                .collect(),
        }
    }

    pub fn zeros(patch_voxels: usize, dim: usize) -> Self {
        Self {
            maps: Modality::ALL
                .iter()
                .map(|&m| (m, Linear::zeros(patch_voxels, dim)))
                .collect(),
        }
    }

    pub fn get(&self, m: Modality) -> Result<&Linear<T>> {
        self.maps.get(m).ok_or(Error::MissingModality(m))
    }
}

/// `S_m = patches·W_m + b_m + PE` for every patch of one modality.
pub fn embed<T: Scalar>(
    patches: &PatchGrid<T>,
    modality: Modality,
    params: &TokenizerParams<T>,
) -> Result<TokenSequence<T>> {
    let map = params.get(modality)?;
    if map.inputs() != patches.patches.cols() {
        return Err(Error::Dimension(format!(
            "tokenizer for {modality} expects {} voxels per patch, got {}",
            map.inputs(),
            patches.patches.cols()
        )));
    }
    let pe = sincos_pe(patches.grid_dims, map.outputs())?;
    let rows: Vec<usize> = (0..patches.len()).collect();
    Ok(embed_rows(&patches.patches, &rows, modality, map, &pe))
}

/// Embeds only the listed patch rows. Row-wise identical to [`embed`]
/// followed by selecting `rows`.
pub(crate) fn embed_rows<T: Scalar>(
    patches: &Tensor<T>,
    rows: &[usize],
    modality: Modality,
    map: &Linear<T>,
    pe: &Tensor<T>,
) -> TokenSequence<T> {
    let selected = patches.select_rows(rows);
    let mut tokens = map.forward(&selected);
    for (r, &i) in rows.iter().enumerate() {
        for (t, &p) in tokens.row_mut(r).iter_mut().zip(pe.row(i)) {
            *t += p;
        }
    }
    TokenSequence {
        tokens,
        provenance: rows.iter().map(|&i| (modality, i)).collect(),
    }
}

impl<T: Scalar> Parameters<T> for TokenizerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (m, l) in self.maps.iter() {
            l.visit(&join(prefix, m.name()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (m, l) in self.maps.iter_mut() {
            l.visit_mut(&join(prefix, m.name()), f);
        }
    }
}
