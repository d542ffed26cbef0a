//! Synthetic multimodal cohort with nested lesions, subtype labels and
//! censored survival times.
//!
//! Every patient shares one smooth latent "anatomy" field across modalities.
//! Each modality applies its own fixed nonlinear transform to that field,
//! adds a modality-specific lesion contrast and independent noise, so the
//! modalities are correlated without being copies of each other.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::volume::{
    CohortRecord, Grid3, MultimodalVolume, SegmentationLabel, Shape3, SurvivalRecord,
};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Enhancing-to-whole-tumor volume fraction above which a lesion is labelled
/// GBM-like. Set at the median of the generator's own distribution.
pub const SUBTYPE_ENHANCING_FRACTION: f64 = 0.034;

/// Upper bound of the administrative censoring window.
pub const CENSOR_WINDOW: f64 = 85.0;

const BLOBS: usize = 6;

/// Lesion contrast per label (necrotic core 1, edema 2, enhancing 3) and
/// modality, in canonical modality order.
const LESION_CONTRAST: [[f64; 3]; 4] = [
    [-0.6, -0.3, -0.2], // T1
    [-0.4, -0.1, 1.0],  // T1c
    [0.5, 0.8, 0.3],    // T2
    [0.3, 1.0, 0.4],    // FLAIR
];

const NOISE_STD: f64 = 0.05;

/// Generates `n_patients` reproducible records of shape `shape`.
pub fn generate_synthetic_cohort(
    n_patients: usize,
    shape: Shape3,
    seed: u64,
    patch: usize,
) -> Result<Vec<CohortRecord>> {
    if n_patients == 0 {
        return Err(Error::Config("cohort needs at least one patient".into()));
    }
    if patch == 0 || shape.0 % patch != 0 || shape.1 % patch != 0 || shape.2 % patch != 0 {
        return Err(Error::Config(format!(
            "synthetic shape {shape:?} is not divisible by patch size {patch}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_patients).map(|_| master.next_u64()).collect();
    seeds
        .into_iter()
        .enumerate()
        .map(|(i, s)| generate_patient(i, shape, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect()
}

struct Blob {
    center: [f64; 3],
    amplitude: f64,
    width: f64,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
    }

    fn scaled(&self, s: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: self.radii.map(|r| r * s),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn modality_base(m: Modality, a: f64) -> f64 {
    match m {
        Modality::T1 => 1.0 + 0.6 * a,
        Modality::T1c => 0.9 + 0.5 * (1.5 * a).tanh(),
        Modality::T2 => 0.8 - 0.5 * a + 0.3 * a * a,
        Modality::Flair => 0.7 + 0.4 * (-a * a).exp(),
    }
}

fn generate_patient<R: Rng>(index: usize, shape: Shape3, rng: &mut R) -> Result<CohortRecord> {
    let blobs: Vec<Blob> = (0..BLOBS)
        .map(|_| Blob {
            center: [
                uniform(rng, -0.3, 0.3),
                uniform(rng, -0.3, 0.3),
                uniform(rng, -0.3, 0.3),
            ],
            amplitude: uniform(rng, -1.0, 1.0),
            width: uniform(rng, 0.08, 0.2),
        })
        .collect();
    let brain = Ellipsoid {
        center: [0.0; 3],
        radii: [
            0.42 * uniform(rng, 0.95, 1.05),
            0.40 * uniform(rng, 0.95, 1.05),
            0.38 * uniform(rng, 0.95, 1.05),
        ],
    };
    let whole = Ellipsoid {
        center: [
            uniform(rng, -0.15, 0.15),
            uniform(rng, -0.15, 0.15),
            uniform(rng, -0.15, 0.15),
        ],
        radii: [
            uniform(rng, 0.12, 0.22),
            uniform(rng, 0.12, 0.22),
            uniform(rng, 0.12, 0.22),
        ],
    };
    let core = whole.scaled(uniform(rng, 0.45, 0.75));
    let enhancing = core.scaled(uniform(rng, 0.3, 0.8));

    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    let mut anatomy = Vec::with_capacity(shape.0 * shape.1 * shape.2);
    let mut brain_mask = Vec::with_capacity(anatomy.capacity());
    let label = Grid3::from_fn(shape, |h, w, d| {
        let p = [coord(h, shape.0), coord(w, shape.1), coord(d, shape.2)];
        let a: f64 = blobs
            .iter()
            .map(|b| {
                let r2: f64 = (0..3).map(|k| (p[k] - b.center[k]).powi(2)).sum();
                b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp()
            })
            .sum();
        anatomy.push(a);
        let rho = brain.rho(p).sqrt();
        brain_mask.push(1.0 / (1.0 + ((rho - 1.0) / 0.05).exp()));
        if enhancing.rho(p) <= 1.0 {
            3u8
        } else if core.rho(p) <= 1.0 {
            1
        } else if whole.rho(p) <= 1.0 {
            2
        } else {
            0
        }
    });

    let mut grids = PerModality::new();
    for m in Modality::ALL {
        let contrast = LESION_CONTRAST[m.index()];
        let data: Vec<f32> = (0..label.len())
            .map(|i| {
                let lesion = match label.as_slice()[i] {
                    1 => contrast[0],
                    2 => contrast[1],
                    3 => contrast[2],
                    _ => 0.0,
                };
                let noise: f64 = StandardNormal.sample(rng);
                let v = brain_mask[i] * (modality_base(m, anatomy[i]) + lesion) + NOISE_STD * noise;
                v as f32
            })
            .collect();
        grids.insert(m, Grid3::from_vec(shape, data)?);
    }

    let counts = label.as_slice().iter().fold([0usize; 4], |mut c, &v| {
        c[v as usize] += 1;
        c
    });
    let whole_voxels = counts[1] + counts[2] + counts[3];
    let enhancing_fraction = if whole_voxels == 0 {
        0.0
    } else {
        counts[3] as f64 / whole_voxels as f64
    };
    let subtype = u8::from(enhancing_fraction > SUBTYPE_ENHANCING_FRACTION);

    let lesion_fraction = whole_voxels as f64 / label.len() as f64;
    let noise: f64 = StandardNormal.sample(rng);
    let event_time = 100.0 * (-lesion_fraction / 0.015).exp() * (0.2 * noise).exp();
    let censor_time = uniform(rng, 1.0, CENSOR_WINDOW);
    let survival = if censor_time < event_time {
        SurvivalRecord::new(censor_time, false)
    } else {
        SurvivalRecord::new(event_time, true)
    };

    Ok(CohortRecord {
        volume: MultimodalVolume::new(format!("synth-{index:04}"), grids)?,
        seg: Some(SegmentationLabel::new(label)?),
        subtype: Some(subtype),
        survival: Some(survival),
    })
}

/// Enhancing-to-whole-tumor volume fraction of a label grid.
pub fn enhancing_fraction(label: &SegmentationLabel) -> f64 {
    let s = label.grid.as_slice();
    let whole = s.iter().filter(|&&v| v != 0).count();
    let et = s.iter().filter(|&&v| v == 3).count();
    if whole == 0 {
        0.0
    } else {
        et as f64 / whole as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cohort_different_seed_differs() {
        let a = generate_synthetic_cohort(4, (32, 32, 32), 7, 8).unwrap();
        let b = generate_synthetic_cohort(4, (32, 32, 32), 7, 8).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(4, (32, 32, 32), 8, 8).unwrap();
        assert_ne!(a[0].volume, c[0].volume);
    }

    #[test]
    fn labels_are_nested_and_in_range() {
        let cohort = generate_synthetic_cohort(6, (16, 16, 16), 3, 8).unwrap();
        for r in &cohort {
            let g = &r.seg.as_ref().unwrap().grid;
            assert!(g.as_slice().iter().all(|&v| v <= 3));
            // every enhancing voxel's 6-neighbours are tumour (enhancing or core)
            let (h, w, d) = g.shape();
            for x in 1..h - 1 {
                for y in 1..w - 1 {
                    for z in 1..d - 1 {
                        if g.get(x, y, z) == 3 {
                            for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                                for n in
                                    [g.get(x + dx, y + dy, z + dz), g.get(x - dx, y - dy, z - dz)]
                                {
                                    assert!(
                                        n == 3 || n == 1 || n == 2,
                                        "enhancing touches background"
                                    );
                                }
                            }
                        }
                    }
                }
            }
            let s = r.survival.as_ref().unwrap();
            assert!(s.time > 0.0);
        }
    }

    #[test]
    fn indivisible_shape_is_config_error() {
        assert!(matches!(
            generate_synthetic_cohort(1, (30, 32, 32), 1, 8),
            Err(Error::Config(_))
        ));
    }
}
