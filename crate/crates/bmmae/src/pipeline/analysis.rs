//! Cross-modal reconstruction, embedding consistency and synthetic data.

use std::collections::BTreeMap;
use std::path::Path;

use bmmae_core::analysis::{subset_embeddings, ConsistencyMatrix};
use bmmae_core::masking::{plan_from_visible, MaskPlan};
use bmmae_core::modality::{Modality, PerModality};
use bmmae_core::model::{decode, encode, ModelConfig, ModelState};
use bmmae_core::synth::generate_synthetic_cohort;
use bmmae_core::volume::{preprocess, Grid3, MultimodalVolume, Shape3};
use serde::Serialize;

use super::{create_dir, map_ordered, write_file, write_json};
use crate::checkpoint::load_checkpoint;
use crate::dataset::{load_dataset, save_dataset, write_survival_csv};
use crate::error::{Error, Result};
use crate::images::{heatmap, save_mid_slices, write_png};

pub const CONSISTENCY_FILE: &str = "consistency.json";
pub const HEATMAP_FILE: &str = "consistency.png";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";
pub const SURVIVAL_CSV: &str = "survival.csv";

#[derive(Clone, Debug, Serialize)]
pub struct Reconstruction {
    pub patient_id: String,
    pub source: Vec<Modality>,
    pub targets: Vec<Modality>,
    pub plan: MaskPlan,
    /// Reconstructed target volumes.
    #[serde(skip)]
    pub volumes: PerModality<Grid3<f32>>,
    /// Per-voxel MSE over each target's masked patches, for targets whose
    /// ground truth is available and that have masked patches.
    pub masked_mse: BTreeMap<String, f64>,
}

/// One encode/decode pass with every source patch visible and every
/// patch of the remaining targets masked. A modality listed in both sets
/// stays fully visible.
pub fn reconstruct_cross_modal(
    state: &ModelState<f32>,
    config: &ModelConfig,
    volume: &MultimodalVolume,
    source: &[Modality],
    targets: &[Modality],
) -> Result<Reconstruction> {
    if source.is_empty() {
        return Err(Error::Config(
            "reconstruction needs a non-empty source set".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Config(
            "reconstruction needs at least one target".into(),
        ));
    }
    let patches = config.patches_per_modality();
    let mut sets: BTreeMap<Modality, Vec<usize>> = BTreeMap::new();
    for &m in targets {
        sets.insert(m, Vec::new());
    }
    for &m in source {
        if !volume.has(m) {
            return Err(Error::Data(format!(
                "patient {} lacks source modality {m}",
                volume.patient_id
            )));
        }
        sets.insert(m, (0..patches).collect());
    }
    let plan = plan_from_visible(patches, sets.into_iter().collect())?;
    let enc = encode(volume, &plan, state, config)?;
    let mut pred = decode(&enc, &plan, state, config)?;
    let mut volumes = PerModality::new();
    let mut masked_mse = BTreeMap::new();
    let mut targets: Vec<Modality> = targets.to_vec();
    targets.sort();
    targets.dedup();
    for &m in &targets {
        let recon = pred.remove(m).expect("decoder covers every plan modality");
        if let (Ok(truth), false) = (volume.grid(m), plan.masked_of(m).is_empty()) {
            masked_mse.insert(
                m.name().to_string(),
                masked_region_mse(&recon, truth, plan.masked_of(m), config)?,
            );
        }
        volumes.insert(m, recon);
    }
    let mut source = source.to_vec();
    source.sort();
    source.dedup();
    Ok(Reconstruction {
        patient_id: volume.patient_id.clone(),
        source,
        targets,
        plan,
        volumes,
        masked_mse,
    })
}

fn masked_region_mse(
    recon: &Grid3<f32>,
    truth: &Grid3<f32>,
    masked: &[usize],
    config: &ModelConfig,
) -> Result<f64> {
    use bmmae_core::tokenizer::patchify;
    let p = patchify::<f64, f32>(recon, config.patch)?.patches;
    let t = patchify::<f64, f32>(truth, config.patch)?.patches;
    let mut sum = 0.0;
    for &j in masked {
        sum += p
            .row(j)
            .iter()
            .zip(t.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sum / (masked.len() * p.cols()) as f64)
}

fn f32_bytes(grid: &Grid3<f32>) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect()
}

/// Reconstructs one patient of `data` from a checkpoint and writes the
/// target volumes (`<modality>.f32`), mid-slice PNGs of inputs,
/// reconstructions and ground truth, and a JSON summary.
pub fn run_reconstruct(
    ckpt: &Path,
    data: &Path,
    patient: &str,
    source: &[Modality],
    targets: &[Modality],
    out: &Path,
) -> Result<Reconstruction> {
    let (config, state) = load_checkpoint(ckpt)?.model(None)?;
    let record = load_dataset(data)?
        .into_iter()
        .find(|r| r.volume.patient_id == patient)
        .ok_or_else(|| {
            Error::Data(format!(
                "patient {patient} not found under {}",
                data.display()
            ))
        })?;
    let volume = preprocess(&record.volume, config.input_shape)?;
    let rec = reconstruct_cross_modal(&state, &config, &volume, source, targets)?;
    create_dir(out)?;
    for &m in &rec.source {
        save_mid_slices(out, &format!("{}_input", m.name()), volume.grid(m)?)?;
    }
    for (m, g) in rec.volumes.iter() {
        write_file(&out.join(format!("{}.f32", m.name())), &f32_bytes(g))?;
        save_mid_slices(out, &format!("{}_recon", m.name()), g)?;
        if let Ok(truth) = volume.grid(m) {
            save_mid_slices(out, &format!("{}_truth", m.name()), truth)?;
        }
    }
    write_json(&out.join(RECONSTRUCTION_FILE), &rec)?;
    Ok(rec)
}

/// Mean pairwise cosine similarity of cls embeddings across the 15
/// modality subsets. Patients with a zero-norm embedding are excluded.
pub fn consistency_matrix(
    state: &ModelState<f32>,
    config: &ModelConfig,
    volumes: &[MultimodalVolume],
    threads: usize,
) -> Result<ConsistencyMatrix> {
    let embeddings = map_ordered(volumes, threads, |v| {
        Ok(subset_embeddings(v, state, config)?)
    })?;
    let ids: Vec<String> = volumes.iter().map(|v| v.patient_id.clone()).collect();
    let matrix = ConsistencyMatrix::from_embeddings(&ids, &embeddings)?;
    for id in &matrix.excluded {
        log::warn!("patient {id} excluded from consistency: zero-norm embedding");
    }
    Ok(matrix)
}

/// Computes the consistency matrix of a checkpoint over a dataset and
/// writes it as JSON plus a heatmap.
pub fn run_consistency(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    threads: usize,
) -> Result<ConsistencyMatrix> {
    let (config, state) = load_checkpoint(ckpt)?.model(None)?;
    let volumes = load_dataset(data)?
        .iter()
        .map(|r| Ok(preprocess(&r.volume, config.input_shape)?))
        .collect::<Result<Vec<_>>>()?;
    let matrix = consistency_matrix(&state, &config, &volumes, threads)?;
    create_dir(out)?;
    write_json(&out.join(CONSISTENCY_FILE), &matrix)?;
    write_png(&out.join(HEATMAP_FILE), &heatmap(&matrix.matrix, 16))?;
    Ok(matrix)
}

/// Writes a synthetic cohort as a dataset directory plus `survival.csv`.
pub fn gen_synth(n: usize, shape: Shape3, seed: u64, patch: usize, out: &Path) -> Result<()> {
    let records = generate_synthetic_cohort(n, shape, seed, patch)?;
    create_dir(out)?;
    save_dataset(out, &records)?;
    let rows: Vec<_> = records
        .iter()
        .filter_map(|r| r.survival.clone().map(|s| (r.volume.patient_id.clone(), s)))
        .collect();
    write_survival_csv(&out.join(SURVIVAL_CSV), &rows)
}
