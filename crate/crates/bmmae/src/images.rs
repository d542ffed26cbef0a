//! Grayscale PNG export for volume slices and similarity heatmaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bmmae_core::volume::Grid3;

use crate::error::{Error, Result};

/// A row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_png(path: &Path, image: &GrayImage) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("encoding {}: {e}", path.display())))?;
    writer
        .write_image_data(&image.pixels)
        .map_err(|e| Error::Data(format!("encoding {}: {e}", path.display())))
}

/// Linear min/max windowing to 0..=255; a constant input maps to 0.
pub fn window(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Fixed depth index; rows are height, columns width.
    Axial,
    /// Fixed width index; rows are height, columns depth.
    Coronal,
    /// Fixed height index; rows are width, columns depth.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// The middle slice of `grid` in `plane`, windowed to its own min/max.
pub fn mid_slice<V: Copy + Into<f64>>(grid: &Grid3<V>, plane: Plane) -> GrayImage {
    let (h, w, d) = grid.shape();
    let (rows, cols, values): (usize, usize, Vec<f64>) = match plane {
        Plane::Axial => (
            h,
            w,
            (0..h)
                .flat_map(|a| (0..w).map(move |b| (a, b, d / 2)))
                .map(|(a, b, c)| grid.get(a, b, c).into())
                .collect(),
        ),
        Plane::Coronal => (
            h,
            d,
            (0..h)
                .flat_map(|a| (0..d).map(move |c| (a, w / 2, c)))
                .map(|(a, b, c)| grid.get(a, b, c).into())
                .collect(),
        ),
        Plane::Sagittal => (
            w,
            d,
            (0..w)
                .flat_map(|b| (0..d).map(move |c| (h / 2, b, c)))
                .map(|(a, b, c)| grid.get(a, b, c).into())
                .collect(),
        ),
    };
    GrayImage {
        width: cols,
        height: rows,
        pixels: window(&values),
    }
}

/// Writes `<stem>_<plane>.png` for the three mid slices.
pub fn save_mid_slices<V: Copy + Into<f64>>(
    dir: &Path,
    stem: &str,
    grid: &Grid3<V>,
) -> Result<Vec<PathBuf>> {
    Plane::ALL
        .iter()
        .map(|&p| {
            let path = dir.join(format!("{stem}_{}.png", p.name()));
            write_png(&path, &mid_slice(grid, p))?;
            Ok(path)
        })
        .collect()
}

/// Square matrix rendered with `cell × cell` pixel blocks.
pub fn heatmap(matrix: &[Vec<f64>], cell: usize) -> GrayImage {
    let n = matrix.len();
    let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
    let shades = window(&flat);
    let size = n * cell;
    let mut pixels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            pixels[y * size + x] = shades[(y / cell) * n + x / cell];
        }
    }
    GrayImage {
        width: size,
        height: size,
        pixels,
    }
}
