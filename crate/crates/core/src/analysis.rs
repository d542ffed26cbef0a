//! Cross-subset embedding consistency.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::encode_full;
use crate::modality::Modality;
use crate::model::{ModelConfig, ModelState};
use crate::scalar::Scalar;
use crate::volume::MultimodalVolume;

/// Cosine similarity, or `None` if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = num_traits::Float::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = num_traits::Float::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The cls embedding of one patient under each of the 15 subsets, in
/// [`Modality::all_subsets`] order.
pub fn subset_embeddings<T: Scalar>(
    volume: &MultimodalVolume,
    state: &ModelState<T>,
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    for m in Modality::ALL {
        if !volume.has(m) {
            return Err(Error::MissingModality(m));
        }
    }
    Modality::all_subsets()
        .iter()
        .map(|s| {
            Ok(encode_full(volume, s, state, config)?
                .enc
                .cls_out
                .iter()
                .map(|x| x.as_f64())
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    /// Subset keys such as `T1+FLAIR`, ordered by size then modality order.
    pub subsets: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub patients: usize,
    /// Patients dropped because an embedding had zero norm.
    pub excluded: Vec<String>,
}

impl ConsistencyMatrix {
    /// Averages pairwise cosine similarities over patients. Each element of
    /// `embeddings` holds one patient's 15 subset embeddings.
    pub fn from_embeddings(ids: &[String], embeddings: &[Vec<Vec<f64>>]) -> Result<Self> {
        let subsets: Vec<String> = Modality::all_subsets()
            .iter()
            .map(|s| Modality::subset_key(s))
            .collect();
        let n = subsets.len();
        let mut sum = alloc::vec![alloc::vec![0.0; n]; n];
        let mut used = 0usize;
        let mut excluded = Vec::new();
        for (id, emb) in ids.iter().zip(embeddings) {
            if emb.len() != n {
                return Err(Error::Dimension(alloc::format!(
                    "patient {id} has {} embeddings",
                    emb.len()
                )));
            }
            let mut local = alloc::vec![alloc::vec![0.0; n]; n];
            let mut ok = true;
            'outer: for a in 0..n {
                for b in a..n {
                    match cosine_similarity(&emb[a], &emb[b]) {
                        Some(c) => {
                            local[a][b] = c;
                            local[b][a] = c;
                        }
                        None => {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if !ok {
                excluded.push(id.clone());
                continue;
            }
            used += 1;
            for a in 0..n {
                for b in 0..n {
                    sum[a][b] += local[a][b];
                }
            }
        }
        if used == 0 {
            return Err(Error::UndefinedMetric(
                "no patient with non-zero embeddings".into(),
            ));
        }
        let matrix = sum
            .into_iter()
            .map(|r| r.into_iter().map(|v| v / used as f64).collect())
            .collect();
        Ok(Self {
            subsets,
            matrix,
            patients: used,
            excluded,
        })
    }

    /// Mean similarity to the full four-modality subset over subsets of size
    /// 1, 2 and 3.
    pub fn similarity_to_full_by_size(&self) -> [f64; 3] {
        let all = Modality::all_subsets();
        let full = all.len() - 1;
        let mut out = [0.0; 3];
        for (size, slot) in out.iter_mut().enumerate() {
            let idx: Vec<usize> = (0..all.len())
                .filter(|&i| all[i].len() == size + 1)
                .collect();
            *slot = idx.iter().map(|&i| self.matrix[i][full]).sum::<f64>() / idx.len() as f64;
        }
        out
    }
}
