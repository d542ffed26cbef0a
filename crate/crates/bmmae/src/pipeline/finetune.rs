//! Downstream fine-tuning: segmentation on a hold-out split, subtype
//! classification and survival with stratified cross-validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bmmae_core::cv::{holdout_split, stratified_folds, train_indices};
use bmmae_core::heads::{
    assign_interval, classify, cls_loss_and_grad, discretize_times, hazards, predict_labels,
    seg_loss_and_grad, segment, surv_loss_and_grad, survival_curve, survival_logits, ClsHead,
    SegHead, SurvHead, TaskModel,
};
use bmmae_core::metrics::{binary_ranking_metrics, composite_dice, concordance_index, mean_std};
use bmmae_core::model::{ModelConfig, ModelState};
use bmmae_core::params::Parameters;
use bmmae_core::volume::{CohortRecord, SurvivalRecord};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    create_dir, load_cohort, map_ordered, out_dir, stream, write_file, write_json, write_loss_csv,
    LossRow, Reduction, Trainer, CHECKPOINT_DIR, LOSS_FILE, RUN_MANIFEST_FILE,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";

/// Encoder initialization for fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

impl Init {
    pub fn parse(s: &str) -> Self {
        if s == "scratch" {
            Init::Scratch
        } else {
            Init::Checkpoint(PathBuf::from(s))
        }
    }

    pub fn load(&self, cfg: &RunConfig) -> Result<ModelState<f32>> {
        match self {
            Init::Scratch => Ok(ModelState::init(&cfg.model, &mut stream(cfg.seed, 0))?),
            Init::Checkpoint(dir) => Ok(load_checkpoint(dir)?.model(Some(&cfg.model))?.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedHead {
    Seg(SegHead<f32>),
    Cls(ClsHead<f32>),
    Surv(SurvHead<f32>),
}

/// Metrics for one modality subset: means at the top level, their
/// standard deviations under `std` and the per-fold values under `folds`.
/// Segmentation has a single hold-out fold and its deviation is taken
/// over validation patients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    #[serde(flatten)]
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub folds: Vec<BTreeMap<String, f64>>,
}

impl SubsetMetrics {
    fn from_samples(samples: &[BTreeMap<String, f64>]) -> Self {
        let mut out = SubsetMetrics::default();
        if let Some(first) = samples.first() {
            for key in first.keys() {
                let values: Vec<f64> = samples.iter().map(|s| s[key]).collect();
                let (m, sd) = mean_std(&values);
                out.mean.insert(key.clone(), m);
                out.std.insert(key.clone(), sd);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub init: String,
    pub subsets: BTreeMap<String, SubsetMetrics>,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub report: MetricsReport,
    /// Encoder and head of the model kept after evaluation: the hold-out
    /// model for segmentation, a model fit on every patient otherwise.
    pub model: ModelState<f32>,
    pub head: TrainedHead,
    pub losses: Vec<LossRow>,
    /// Task metadata stored in the checkpoint manifest.
    pub extra: serde_json::Value,
}

fn metric_map<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Trains `params` on `indices` for `cfg.epochs`, shuffling with stream
/// `tag`. `grad` yields one patient's loss and gradient.
fn fit<H, F>(
    cfg: &RunConfig,
    params: &mut TaskModel<f32, H>,
    indices: &[usize],
    tag: u64,
    reduction: Reduction,
    grad: F,
) -> Result<Vec<LossRow>>
where
    H: Parameters<f32> + Send + Sync,
    F: Fn(&TaskModel<f32, H>, usize) -> Result<(f32, TaskModel<f32, H>)> + Sync,
{
    let mut trainer = Trainer::new(params, cfg, indices.len());
    let mut rng = stream(cfg.seed, 2 * tag);
    let mut order = indices.to_vec();
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_ordered(batch, cfg.threads, |&i| grad(params, i))?;
            let loss = trainer.apply(params, results, reduction)?;
            sum += loss;
            rows.push(LossRow {
                epoch,
                step: trainer.step(),
                loss,
            });
        }
        log::debug!(
            "{:?} epoch {epoch}/{} loss {:.5}",
            cfg.task,
            cfg.epochs,
            sum / order.len().div_ceil(cfg.batch_size) as f64
        );
    }
    Ok(rows)
}

const FINAL_TAG: u64 = 99;

fn fold_tag(f: usize) -> u64 {
    100 + f as u64
}

fn require<T>(value: Option<T>, what: &str, record: &CohortRecord) -> Result<T> {
    value.ok_or_else(|| {
        Error::Data(format!(
            "patient {} has no {what}",
            record.volume.patient_id
        ))
    })
}

/// Fine-tunes on prepared records (see [`super::prepare`]).
pub fn finetune(cfg: &RunConfig, records: &[CohortRecord], init: &Init) -> Result<FinetuneResult> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::Data(
            "fine-tuning needs at least two patients".into(),
        ));
    }
    let base = init.load(cfg)?;
    let mut result = match cfg.task {
        Task::Seg => finetune_seg(cfg, records, base)?,
        Task::Cls => finetune_cls(cfg, records, base)?,
        Task::Surv => finetune_surv(cfg, records, base)?,
        other => {
            return Err(Error::Config(format!(
                "{other:?} is not a fine-tuning task"
            )))
        }
    };
    result.report.init = cfg.init.clone();
    result.extra["init"] = serde_json::Value::String(cfg.init.clone());
    Ok(result)
}

fn report(cfg: &RunConfig, metrics: SubsetMetrics) -> MetricsReport {
    MetricsReport {
        task: cfg.task,
        init: cfg.init.clone(),
        subsets: BTreeMap::from([(cfg.subset_key(), metrics)]),
    }
}

fn finetune_seg(
    cfg: &RunConfig,
    records: &[CohortRecord],
    base: ModelState<f32>,
) -> Result<FinetuneResult> {
    let labels = records
        .iter()
        .map(|r| require(r.seg.as_ref(), "segmentation label", r))
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = holdout_split(records.len(), cfg.val_fraction, cfg.seed)?;
    let head = SegHead::init(
        &cfg.model,
        cfg.seg_channels,
        &mut stream(cfg.seed, 2 * FINAL_TAG + 1),
    )?;
    let mut params = TaskModel { model: base, head };
    let losses = fit(
        cfg,
        &mut params,
        &train,
        FINAL_TAG,
        Reduction::Mean,
        |p, i| {
            let (loss, g, hg) = seg_loss_and_grad(
                &records[i].volume,
                labels[i],
                &cfg.subset,
                &p.model,
                &p.head,
                &cfg.model,
            )?;
            Ok((loss.total, TaskModel { model: g, head: hg }))
        },
    )?;
    let patients = map_ordered(&val, cfg.threads, |&i| {
        let logits = segment(
            &records[i].volume,
            &cfg.subset,
            &params.model,
            &params.head,
            &cfg.model,
        )?;
        let pred = predict_labels(&logits, records[i].volume.shape())?;
        let d = composite_dice(&pred.grid, &labels[i].grid)?;
        Ok(metric_map([
            ("dice_wt", d.dice_wt),
            ("dice_tc", d.dice_tc),
            ("dice_et", d.dice_et),
        ]))
    })?;
    let mut metrics = SubsetMetrics::from_samples(&patients);
    metrics.folds = vec![metrics.mean.clone()];
    let extra = serde_json::json!({
        "task": "seg",
        "subset": cfg.subset,
        "seg_channels": cfg.seg_channels,
        "validation_patients": val.iter().map(|&i| &records[i].volume.patient_id).collect::<Vec<_>>(),
    });
    Ok(FinetuneResult {
        report: report(cfg, metrics),
        model: params.model,
        head: TrainedHead::Seg(params.head),
        losses,
        extra,
    })
}

fn finetune_cls(
    cfg: &RunConfig,
    records: &[CohortRecord],
    base: ModelState<f32>,
) -> Result<FinetuneResult> {
    let labels = records
        .iter()
        .map(|r| require(r.subtype, "subtype label", r))
        .collect::<Result<Vec<u8>>>()?;
    let train_one =
        |indices: &[usize], tag: u64| -> Result<(TaskModel<f32, ClsHead<f32>>, Vec<LossRow>)> {
            let head = ClsHead::init(cfg.model.dim, &mut stream(cfg.seed, 2 * tag + 1));
            let mut params = TaskModel {
                model: base.clone(),
                head,
            };
            let losses = fit(cfg, &mut params, indices, tag, Reduction::Mean, |p, i| {
                let (loss, g, hg) = cls_loss_and_grad(
                    &records[i].volume,
                    labels[i],
                    &cfg.subset,
                    &p.model,
                    &p.head,
                    &cfg.model,
                )?;
                Ok((loss, TaskModel { model: g, head: hg }))
            })?;
            Ok((params, losses))
        };
    let folds = stratified_folds(&labels, cfg.folds, cfg.seed)?;
    let mut fold_metrics = Vec::with_capacity(folds.len());
    for (f, val) in folds.iter().enumerate() {
        let (params, _) = train_one(&train_indices(&folds, f), fold_tag(f))?;
        let scores = map_ordered(val, cfg.threads, |&i| {
            Ok(classify(
                &records[i].volume,
                &cfg.subset,
                &params.model,
                &params.head,
                &cfg.model,
            )? as f64)
        })?;
        let truth: Vec<u8> = val.iter().map(|&i| labels[i]).collect();
        let m = binary_ranking_metrics(&scores, &truth)?;
        log::info!(
            "cls fold {}/{}: auc {:.4} ap {:.4}",
            f + 1,
            folds.len(),
            m.auc,
            m.ap
        );
        fold_metrics.push(metric_map([("auc", m.auc), ("ap", m.ap)]));
    }
    let mut metrics = SubsetMetrics::from_samples(&fold_metrics);
    metrics.folds = fold_metrics;
    let all: Vec<usize> = (0..records.len()).collect();
    let (params, losses) = train_one(&all, FINAL_TAG)?;
    Ok(FinetuneResult {
        report: report(cfg, metrics),
        model: params.model,
        head: TrainedHead::Cls(params.head),
        losses,
        extra: serde_json::json!({ "task": "cls", "subset": cfg.subset }),
    })
}

/// Survival records of `indices` with intervals assigned against `cuts`.
fn with_intervals(survival: &[&SurvivalRecord], cuts: &[f64]) -> Vec<SurvivalRecord> {
    survival
        .iter()
        .map(|s| SurvivalRecord {
            interval: Some(assign_interval(s.time, cuts)),
            ..(*s).clone()
        })
        .collect()
}

fn finetune_surv(
    cfg: &RunConfig,
    records: &[CohortRecord],
    base: ModelState<f32>,
) -> Result<FinetuneResult> {
    let survival = records
        .iter()
        .map(|r| require(r.survival.as_ref(), "survival record", r))
        .collect::<Result<Vec<_>>>()?;
    let train_one =
        |indices: &[usize], tag: u64| -> Result<(TaskModel<f32, SurvHead<f32>>, Vec<LossRow>)> {
            let times: Vec<f64> = indices.iter().map(|&i| survival[i].time).collect();
            let cuts = discretize_times(&times, cfg.intervals)?;
            let assigned = with_intervals(&survival, &cuts);
            let head = SurvHead::init(cfg.model.dim, cuts, &mut stream(cfg.seed, 2 * tag + 1))?;
            let mut params = TaskModel {
                model: base.clone(),
                head,
            };
            let losses = fit(cfg, &mut params, indices, tag, Reduction::Sum, |p, i| {
                let (loss, g, hg) = surv_loss_and_grad(
                    &records[i].volume,
                    &assigned[i],
                    &cfg.subset,
                    &p.model,
                    &p.head,
                    &cfg.model,
                )?;
                Ok((loss, TaskModel { model: g, head: hg }))
            })?;
            Ok((params, losses))
        };
    let events: Vec<u8> = survival.iter().map(|s| u8::from(s.event)).collect();
    let folds = stratified_folds(&events, cfg.folds, cfg.seed)?;
    let mut fold_metrics = Vec::with_capacity(folds.len());
    for (f, val) in folds.iter().enumerate() {
        let (params, _) = train_one(&train_indices(&folds, f), fold_tag(f))?;
        let curves = map_ordered(val, cfg.threads, |&i| {
            let logits = survival_logits(
                &records[i].volume,
                &cfg.subset,
                &params.model,
                &params.head,
                &cfg.model,
            )?;
            Ok(survival_curve(&hazards(&logits))?
                .into_iter()
                .map(f64::from)
                .collect::<Vec<f64>>())
        })?;
        let times: Vec<f64> = val.iter().map(|&i| survival[i].time).collect();
        let ev: Vec<bool> = val.iter().map(|&i| survival[i].event).collect();
        let c = concordance_index(&curves, &params.head.cut_points, &times, &ev)?;
        log::info!("surv fold {}/{}: c-index {c:.4}", f + 1, folds.len());
        fold_metrics.push(metric_map([("cindex", c)]));
    }
    let mut metrics = SubsetMetrics::from_samples(&fold_metrics);
    metrics.folds = fold_metrics;
    let all: Vec<usize> = (0..records.len()).collect();
    let (params, losses) = train_one(&all, FINAL_TAG)?;
    let extra = serde_json::json!({
        "task": "surv",
        "subset": cfg.subset,
        "intervals": cfg.intervals,
        "cut_points": params.head.cut_points,
    });
    Ok(FinetuneResult {
        report: report(cfg, metrics),
        model: params.model,
        head: TrainedHead::Surv(params.head),
        losses,
        extra,
    })
}

/// Saves encoder and head as one checkpoint with the head under `head.`.
pub fn save_task_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    result: &FinetuneResult,
) -> Result<()> {
    let model = result.model.clone();
    match &result.head {
        TrainedHead::Seg(h) => save_checkpoint(
            dir,
            config,
            &TaskModel {
                model,
                head: h.clone(),
            },
            result.extra.clone(),
        ),
        TrainedHead::Cls(h) => save_checkpoint(
            dir,
            config,
            &TaskModel {
                model,
                head: h.clone(),
            },
            result.extra.clone(),
        ),
        TrainedHead::Surv(h) => save_checkpoint(
            dir,
            config,
            &TaskModel {
                model,
                head: h.clone(),
            },
            result.extra.clone(),
        ),
    }
}

/// Reads back a checkpoint written by [`save_task_checkpoint`].
pub fn load_task_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelState<f32>, TrainedHead)> {
    let ckpt: Checkpoint = load_checkpoint(dir)?;
    let (config, model) = ckpt.model(None)?;
    let extra = &ckpt.manifest.extra;
    let bad = |m: &str| Error::Data(format!("{}: {m}", dir.display()));
    let head = match extra.get("task").and_then(|t| t.as_str()) {
        Some("seg") => {
            let c = extra
                .get("seg_channels")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("missing seg_channels"))?;
            let mut h = SegHead::zeros(&config, c as usize)?;
            ckpt.head(&mut h)?;
            TrainedHead::Seg(h)
        }
        Some("cls") => {
            let mut h = ClsHead::zeros(config.dim);
            ckpt.head(&mut h)?;
            TrainedHead::Cls(h)
        }
        Some("surv") => {
            let cuts: Vec<f64> =
                serde_json::from_value(extra.get("cut_points").cloned().unwrap_or_default())
                    .map_err(|_| bad("missing cut_points"))?;
            let mut h = SurvHead::zeros(config.dim, cuts.len() + 1);
            h.cut_points = cuts;
            ckpt.head(&mut h)?;
            TrainedHead::Surv(h)
        }
        _ => return Err(bad("not a fine-tuned checkpoint")),
    };
    Ok((config, model, head))
}

/// Loads the dataset, fine-tunes and writes metrics, loss log, manifest and
/// the task checkpoint below `cfg.out`.
pub fn run_finetune(cfg: &RunConfig) -> Result<FinetuneResult> {
    let out = out_dir(cfg)?;
    create_dir(out)?;
    write_file(&out.join(RUN_MANIFEST_FILE), cfg.manifest_json().as_bytes())?;
    let records = load_cohort(cfg)?;
    let result = finetune(cfg, &records, &Init::parse(&cfg.init))?;
    write_json(&out.join(METRICS_FILE), &result.report)?;
    write_loss_csv(&out.join(LOSS_FILE), &result.losses)?;
    save_task_checkpoint(&out.join(CHECKPOINT_DIR), &cfg.model, &result)?;
    Ok(result)
}
