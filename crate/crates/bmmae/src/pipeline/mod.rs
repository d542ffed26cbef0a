//! Training and analysis pipelines behind the CLI.

mod analysis;
mod finetune;
mod pretrain;

pub use analysis::{
    consistency_matrix, gen_synth, reconstruct_cross_modal, run_consistency, run_reconstruct,
    Reconstruction, CONSISTENCY_FILE, HEATMAP_FILE, RECONSTRUCTION_FILE, SURVIVAL_CSV,
};
pub use finetune::{
    finetune, load_task_checkpoint, run_finetune, save_task_checkpoint, FinetuneResult, Init,
    MetricsReport, SubsetMetrics, TrainedHead, METRICS_FILE,
};
pub use pretrain::{dry_run, pretrain, run_pretrain, PretrainResult, PLAN_LOG_FILE};

use std::fs;
use std::io::Write;
use std::path::Path;

use bmmae_core::optim::{lr_schedule, AdamW, AdamWConfig};
use bmmae_core::params::Parameters;
use bmmae_core::volume::{crop_label, preprocess, CohortRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{apply_survival, load_dataset, read_survival_csv};
use crate::error::{Error, Result};

pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// One row of the training-loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Independent deterministic random stream `tag` derived from `seed`.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Loads the dataset named by `cfg`, crops every volume and label to the
/// model input shape and standardizes each modality.
pub fn load_cohort(cfg: &RunConfig) -> Result<Vec<CohortRecord>> {
    let mut records = load_dataset(&cfg.data)?;
    if let Some(csv) = &cfg.survival_csv {
        apply_survival(&mut records, &read_survival_csv(csv)?)?;
    }
    prepare(records, cfg)
}

/// In-memory equivalent of [`load_cohort`] for records already at hand.
pub fn prepare(records: Vec<CohortRecord>, cfg: &RunConfig) -> Result<Vec<CohortRecord>> {
    let shape = cfg.model.input_shape;
    records
        .into_iter()
        .map(|r| {
            Ok(CohortRecord {
                volume: preprocess(&r.volume, shape)?,
                seg: r.seg.as_ref().map(|s| crop_label(s, shape)).transpose()?,
                ..r
            })
        })
        .collect()
}

/// Applies `f` to every item on up to `threads` scoped workers and returns
/// the results in item order, so reductions over them are deterministic.
pub fn map_ordered<I, R, F>(items: &[I], threads: usize, f: F) -> Result<Vec<R>>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// How per-patient losses and gradients combine into one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// AdamW with the warmup-cosine schedule over a fixed number of steps.
pub(crate) struct Trainer {
    opt: AdamW<f32>,
    step: usize,
    total: usize,
    warmup: usize,
    base_lr: f64,
}

impl Trainer {
    pub fn new<P: Parameters<f32>>(params: &P, cfg: &RunConfig, train_size: usize) -> Self {
        let steps_per_epoch = train_size.div_ceil(cfg.batch_size).max(1);
        Trainer {
            opt: AdamW::new(
                params,
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                },
            ),
            step: 0,
            total: cfg.epochs * steps_per_epoch,
            warmup: cfg.warmup_epochs * steps_per_epoch,
            base_lr: cfg.lr,
        }
    }

    /// Combines per-patient `(loss, grad)` pairs in order and takes one
    /// optimizer step. Returns the reduced loss.
    pub fn apply<P: Parameters<f32>>(
        &mut self,
        params: &mut P,
        results: Vec<(f32, P)>,
        reduction: Reduction,
    ) -> Result<f64> {
        let n = results.len();
        let mut iter = results.into_iter();
        let (first_loss, mut grad) = iter
            .next()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut loss = first_loss as f64;
        for (l, g) in iter {
            loss += l as f64;
            grad.accumulate(&g);
        }
        if reduction == Reduction::Mean {
            loss /= n as f64;
            grad.scale_all(1.0 / n as f32);
        }
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {}",
                self.step + 1
            )));
        }
        let lr = lr_schedule(self.step, self.total, self.warmup, self.base_lr);
        self.opt.step(params, &grad, lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(e.to_string())))
        .collect()
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_file(
        path,
        &serde_json::to_vec_pretty(value).expect("report serializes"),
    )
}

pub(crate) fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory given".into()))
}
