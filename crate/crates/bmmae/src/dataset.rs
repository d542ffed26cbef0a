//! Dataset directories: one subdirectory per patient holding `meta.json`,
//! one little-endian `<modality>.f32` blob per present modality and an
//! optional `seg.u8` label blob.

use std::fs;
use std::path::{Path, PathBuf};

use bmmae_core::modality::{Modality, PerModality};
use bmmae_core::volume::{
    CohortRecord, Grid3, MultimodalVolume, SegmentationLabel, Shape3, SurvivalRecord,
};
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};

pub const META_FILE: &str = "meta.json";
pub const SEG_FILE: &str = "seg.u8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalMeta {
    pub time: f64,
    pub event: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub patient_id: String,
    pub shape: [usize; 3],
    pub modalities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival: Option<SurvivalMeta>,
}

fn blob_name(m: Modality) -> String {
    format!("{}.f32", m.name())
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(DatasetError::Invalid(format!(
            "patient id `{id}` is not usable as a directory name"
        ))
        .into());
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes one patient below `root/<patient_id>/`.
pub fn save_patient(root: &Path, record: &CohortRecord) -> Result<PathBuf> {
    let v = &record.volume;
    check_id(&v.patient_id)?;
    let dir = root.join(&v.patient_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let (h, w, d) = v.shape();
    let meta = PatientMeta {
        patient_id: v.patient_id.clone(),
        shape: [h, w, d],
        modalities: v.present().iter().map(|m| m.name().to_string()).collect(),
        subtype: record.subtype,
        survival: record.survival.as_ref().map(|s| SurvivalMeta {
            time: s.time,
            event: u8::from(s.event),
        }),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write(&dir.join(META_FILE), &json)?;
    for (m, grid) in v.grids().iter() {
        let bytes: Vec<u8> = grid
            .as_slice()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        write(&dir.join(blob_name(m)), &bytes)?;
    }
    if let Some(seg) = &record.seg {
        if seg.shape() != v.shape() {
            return Err(DatasetError::Invalid(format!(
                "label shape differs from volume for {}",
                v.patient_id
            ))
            .into());
        }
        write(&dir.join(SEG_FILE), seg.grid.as_slice())?;
    }
    Ok(dir)
}

pub fn save_dataset(root: &Path, records: &[CohortRecord]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    for r in records {
        save_patient(root, r)?;
    }
    Ok(())
}

fn read_blob(path: &Path, voxels: usize, width: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expected = (voxels * width) as u64;
    if bytes.len() as u64 != expected {
        return Err(DatasetError::TruncatedBlob {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        }
        .into());
    }
    Ok(bytes)
}

/// Reads one patient directory.
pub fn load_patient(dir: &Path) -> Result<CohortRecord> {
    let meta_path = dir.join(META_FILE);
    let raw = fs::read(&meta_path)
        .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
    let meta: PatientMeta =
        serde_json::from_slice(&raw).map_err(|e| DatasetError::MalformedSidecar {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
    let shape: Shape3 = (meta.shape[0], meta.shape[1], meta.shape[2]);
    let voxels = shape.0 * shape.1 * shape.2;
    if voxels == 0 || meta.modalities.is_empty() {
        return Err(DatasetError::MalformedSidecar {
            path: meta_path,
            message: "shape and modality list must be non-empty".into(),
        }
        .into());
    }
    let mut grids = PerModality::new();
    for name in &meta.modalities {
        let m: Modality = name.parse().map_err(|_| DatasetError::UnknownModality {
            path: meta_path.clone(),
            name: name.clone(),
        })?;
        let bytes = read_blob(&dir.join(blob_name(m)), voxels, 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        grids.insert(m, Grid3::from_vec(shape, data)?);
    }
    let seg_path = dir.join(SEG_FILE);
    let seg = if seg_path.exists() {
        let bytes = read_blob(&seg_path, voxels, 1)?;
        Some(SegmentationLabel::new(Grid3::from_vec(shape, bytes)?)?)
    } else {
        None
    };
    let survival = match meta.survival {
        Some(SurvivalMeta { time, event }) if event <= 1 && time > 0.0 && time.is_finite() => {
            Some(SurvivalRecord::new(time, event == 1))
        }
        Some(_) => {
            return Err(DatasetError::MalformedSidecar {
                path: meta_path,
                message: "survival needs a positive time and event 0 or 1".into(),
            }
            .into())
        }
        None => None,
    };
    if meta.subtype.is_some_and(|s| s > 1) {
        return Err(DatasetError::MalformedSidecar {
            path: meta_path,
            message: "subtype must be 0 or 1".into(),
        }
        .into());
    }
    Ok(CohortRecord {
        volume: MultimodalVolume::new(meta.patient_id, grids)?,
        seg,
        subtype: meta.subtype,
        survival,
    })
}

/// Reads every patient subdirectory of `root`, in directory-name order.
pub fn load_dataset(root: &Path) -> Result<Vec<CohortRecord>> {
    let entries =
        fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DatasetError::Invalid(format!(
            "no patient directories under {}",
            root.display()
        ))
        .into());
    }
    dirs.iter().map(|d| load_patient(d)).collect()
}

#[derive(Debug, Deserialize, Serialize)]
struct SurvivalRow {
    patient_id: String,
    time: f64,
    event: u8,
}

/// Reads a `patient_id,time,event` CSV.
pub fn read_survival_csv(path: &Path) -> Result<Vec<(String, SurvivalRecord)>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<SurvivalRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if row.event > 1 || !(row.time > 0.0) {
            return Err(Error::Data(format!(
                "{}: invalid survival row for {}",
                path.display(),
                row.patient_id
            )));
        }
        out.push((
            row.patient_id,
            SurvivalRecord::new(row.time, row.event == 1),
        ));
    }
    Ok(out)
}

pub fn write_survival_csv(path: &Path, rows: &[(String, SurvivalRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (id, r) in rows {
        w.serialize(SurvivalRow {
            patient_id: id.clone(),
            time: r.time,
            event: u8::from(r.event),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Replaces each record's survival entry with the CSV's row for that patient.
pub fn apply_survival(
    records: &mut [CohortRecord],
    rows: &[(String, SurvivalRecord)],
) -> Result<()> {
    for r in records.iter_mut() {
        let row = rows
            .iter()
            .find(|(id, _)| *id == r.volume.patient_id)
            .ok_or_else(|| {
                Error::Data(format!(
                    "no survival row for patient {}",
                    r.volume.patient_id
                ))
            })?;
        r.survival = Some(row.1.clone());
    }
    Ok(())
}
