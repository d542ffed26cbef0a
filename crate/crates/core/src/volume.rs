//! Multimodal 3D volumes, segmentation labels and preprocessing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Voxel-grid shape `(H, W, D)`.
pub type Shape3 = (usize, usize, usize);

/// A dense 3D grid stored depth-fastest: `index = ((h·W)+w)·D+d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<V> {
    shape: Shape3,
    data: Vec<V>,
}

impl<V: Copy> Grid3<V> {
    pub fn filled(shape: Shape3, value: V) -> Self {
        Self {
            shape,
            data: alloc::vec![value; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<V>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Dimension(format!(
                "grid of shape {shape:?} needs {} voxels, got {}",
                shape.0 * shape.1 * shape.2,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> V) -> Self {
        let mut data = Vec::with_capacity(shape.0 * shape.1 * shape.2);
        for h in 0..shape.0 {
            for w in 0..shape.1 {
                for d in 0..shape.2 {
                    data.push(f(h, w, d));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.shape.1 + w) * self.shape.2 + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> V {
        self.data[self.index(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, v: V) {
        let i = self.index(h, w, d);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[V] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<V> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(V) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-block starting at `offset` with extent `size`.
    pub fn crop(&self, offset: Shape3, size: Shape3) -> Result<Self> {
        if offset.0 + size.0 > self.shape.0
            || offset.1 + size.1 > self.shape.1
            || offset.2 + size.2 > self.shape.2
        {
            return Err(Error::Dimension(format!(
                "crop {size:?} at {offset:?} exceeds grid {:?}",
                self.shape
            )));
        }
        Ok(Self::from_fn(size, |h, w, d| {
            self.get(h + offset.0, w + offset.1, d + offset.2)
        }))
    }
}

/// Offset of a centred crop; an odd remainder leaves the extra voxel on the
/// high-index side.
pub fn center_crop_offset(shape: Shape3, crop: Shape3) -> Result<Shape3> {
    if crop.0 > shape.0 || crop.1 > shape.1 || crop.2 > shape.2 {
        return Err(Error::Dimension(format!(
            "crop {crop:?} larger than volume {shape:?}"
        )));
    }
    Ok((
        (shape.0 - crop.0) / 2,
        (shape.1 - crop.1) / 2,
        (shape.2 - crop.2) / 2,
    ))
}

/// One patient's co-registered modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalVolume {
    pub patient_id: String,
    shape: Shape3,
    grids: PerModality<Grid3<f32>>,
}

impl MultimodalVolume {
    pub fn new(patient_id: impl Into<String>, grids: PerModality<Grid3<f32>>) -> Result<Self> {
        let mut shape = None;
        for (m, g) in grids.iter() {
            match shape {
                None => shape = Some(g.shape()),
                Some(s) if s != g.shape() => {
                    return Err(Error::Dimension(format!(
                        "modality {m} has shape {:?}, expected {s:?}",
                        g.shape()
                    )))
                }
                _ => {}
            }
        }
        let shape = shape.ok_or_else(|| Error::Config("volume has no modalities".into()))?;
        Ok(Self {
            patient_id: patient_id.into(),
            shape,
            grids,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn present(&self) -> Vec<Modality> {
        self.grids.modalities()
    }

    pub fn has(&self, m: Modality) -> bool {
        self.grids.contains(m)
    }

    pub fn grid(&self, m: Modality) -> Result<&Grid3<f32>> {
        self.grids.get(m).ok_or(Error::MissingModality(m))
    }

    pub fn grid_mut(&mut self, m: Modality) -> Option<&mut Grid3<f32>> {
        self.grids.get_mut(m)
    }

    pub fn grids(&self) -> &PerModality<Grid3<f32>> {
        &self.grids
    }

    /// Checks the patch-size divisibility required before tokenization.
    pub fn check_divisible(&self, patch: usize) -> Result<()> {
        let (h, w, d) = self.shape;
        if patch == 0 || h % patch != 0 || w % patch != 0 || d % patch != 0 {
            return Err(Error::Dimension(format!(
                "volume shape {:?} is not divisible by patch size {patch}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Voxel labels: 0 background, 1 necrotic core, 2 edema, 3 enhancing tumor.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLabel {
    pub grid: Grid3<u8>,
}

impl SegmentationLabel {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if let Some(&bad) = grid.as_slice().iter().find(|&&v| v > 3) {
            return Err(Error::InvalidLabel(format!(
                "label value {bad} outside 0..=3"
            )));
        }
        Ok(Self { grid })
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }
}

/// Observed time, event indicator and (after discretization) the 1-based
/// interval containing the time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<usize>,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Self {
        Self {
            time,
            event,
            interval: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortRecord {
    pub volume: MultimodalVolume,
    pub seg: Option<SegmentationLabel>,
    /// 0 = LGG-like, 1 = GBM-like.
    pub subtype: Option<u8>,
    pub survival: Option<SurvivalRecord>,
}

/// Centre-crops every present modality to `crop` and standardizes each one to
/// zero mean and unit standard deviation over its own voxels.
///
/// A constant modality becomes all zeros.
pub fn preprocess(volume: &MultimodalVolume, crop: Shape3) -> Result<MultimodalVolume> {
    let offset = center_crop_offset(volume.shape(), crop)?;
    let mut grids = PerModality::new();
    for (m, g) in volume.grids().iter() {
        let mut cropped = g.crop(offset, crop)?;
        standardize(cropped.as_mut_slice());
        grids.insert(m, cropped);
    }
    MultimodalVolume::new(volume.patient_id.clone(), grids)
}

/// Crops a label grid with the same window `preprocess` uses.
pub fn crop_label(label: &SegmentationLabel, crop: Shape3) -> Result<SegmentationLabel> {
    let offset = center_crop_offset(label.shape(), crop)?;
    Ok(SegmentationLabel {
        grid: label.grid.crop(offset, crop)?,
    })
}

fn standardize(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = num_traits::Float::sqrt(var);
    if !(std > 1e-8) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_with(grid: Grid3<f32>) -> MultimodalVolume {
        let mut g = PerModality::new();
        g.insert(Modality::T2, grid);
        MultimodalVolume::new("p", g).unwrap()
    }

    fn stats(v: &[f32]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn centre_crop_of_160_to_128_is_offset_16() {
        assert_eq!(
            center_crop_offset((160, 160, 160), (128, 128, 128)).unwrap(),
            (16, 16, 16)
        );
        // odd remainder: extra voxel removed on the high side
        assert_eq!(
            center_crop_offset((11, 10, 9), (8, 8, 8)).unwrap(),
            (1, 1, 0)
        );
    }

    #[test]
    fn preprocess_crops_and_standardizes() {
        let g = Grid3::from_fn((20, 18, 16), |h, w, d| {
            (h * 3 + w * w + d) as f32 * 0.5 + 7.0
        });
        let out = preprocess(&volume_with(g.clone()), (16, 16, 16)).unwrap();
        assert_eq!(out.shape(), (16, 16, 16));
        let (mean, std) = stats(out.grid(Modality::T2).unwrap().as_slice());
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
        // voxel (0,0,0) of the output comes from (2,1,0) of the input
        let offset = center_crop_offset((20, 18, 16), (16, 16, 16)).unwrap();
        assert_eq!(offset, (2, 1, 0));
    }

    #[test]
    fn constant_modality_becomes_zero() {
        let g = Grid3::filled((8, 8, 8), 3.25f32);
        let out = preprocess(&volume_with(g), (8, 8, 8)).unwrap();
        assert!(out
            .grid(Modality::T2)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_crop_is_dimension_error() {
        let g = Grid3::filled((8, 8, 8), 1.0f32);
        assert!(matches!(
            preprocess(&volume_with(g), (9, 8, 8)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn preprocess_is_idempotent() {
        let g = Grid3::from_fn((8, 8, 8), |h, w, d| ((h * 7 + w * 3 + d * 11) % 13) as f32);
        let once = preprocess(&volume_with(g), (8, 8, 8)).unwrap();
        let twice = preprocess(&once, (8, 8, 8)).unwrap();
        let a = once.grid(Modality::T2).unwrap().as_slice();
        let b = twice.grid(Modality::T2).unwrap().as_slice();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn mismatched_modality_shapes_are_rejected() {
        let mut g = PerModality::new();
        g.insert(Modality::T1, Grid3::filled((8, 8, 8), 0.0f32));
        g.insert(Modality::T2, Grid3::filled((8, 8, 4), 0.0f32));
        assert!(matches!(
            MultimodalVolume::new("p", g),
            Err(Error::Dimension(_))
        ));
    }
}
