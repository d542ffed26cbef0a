//! Masked-autoencoder pre-training.

use std::io::Write;
use std::path::Path;

use bmmae_core::masking::{sample_mask_plan, MaskPlan};
use bmmae_core::modality::Modality;
use bmmae_core::model::{pretrain_loss_and_grad, ModelConfig, ModelState};
use bmmae_core::volume::MultimodalVolume;
use rand::seq::SliceRandom;

use super::{
    create_dir, load_cohort, map_ordered, out_dir, stream, write_file, write_loss_csv, LossRow,
    Reduction, Trainer, CHECKPOINT_DIR, LOSS_FILE, RUN_MANIFEST_FILE,
};
use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};

pub const PLAN_LOG_FILE: &str = "plans.jsonl";

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub config: ModelConfig,
    pub state: ModelState<f32>,
    /// One row per optimizer step; `loss` is the batch mean.
    pub losses: Vec<LossRow>,
    /// Mean per-patient loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Pre-trains from a seeded initialization on already prepared volumes.
/// Every patient must carry all four modalities. With `plan_log`, each
/// sampled plan is written as one JSON line.
pub fn pretrain(
    cfg: &RunConfig,
    volumes: &[MultimodalVolume],
    mut plan_log: Option<&mut dyn Write>,
) -> Result<PretrainResult> {
    if cfg.task != Task::Pretrain {
        return Err(Error::Config(format!(
            "pretrain called with task {:?}",
            cfg.task
        )));
    }
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Data(
            "pre-training needs at least one patient".into(),
        ));
    }
    for v in volumes {
        if let Some(m) = Modality::ALL.into_iter().find(|&m| !v.has(m)) {
            return Err(Error::Data(format!(
                "patient {} lacks {m}; pre-training needs all modalities",
                v.patient_id
            )));
        }
    }
    let model = &cfg.model;
    let mut state = ModelState::<f32>::init(model, &mut stream(cfg.seed, 0))?;
    let mut data_rng = stream(cfg.seed, 1);
    let mut trainer = Trainer::new(&state, cfg, volumes.len());
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    let mut losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let patches = model.patches_per_modality();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut data_rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, MaskPlan)> = batch
                .iter()
                .map(|&i| {
                    Ok((
                        i,
                        sample_mask_plan(
                            patches,
                            &Modality::ALL,
                            model.mask_ratio,
                            model.alpha,
                            &mut data_rng,
                        )?,
                    ))
                })
                .collect::<Result<_>>()?;
            if let Some(log) = plan_log.as_deref_mut() {
                for (i, plan) in &jobs {
                    let line = serde_json::json!({
                        "epoch": epoch,
                        "step": trainer.step() + 1,
                        "patient_id": volumes[*i].patient_id,
                        "plan": plan,
                    });
                    writeln!(log, "{line}").map_err(|e| Error::io("writing plan log", e))?;
                }
            }
            let results = map_ordered(&jobs, cfg.threads, |(i, plan)| {
                Ok(pretrain_loss_and_grad(&volumes[*i], plan, &state, model)?)
            })?;
            sum += results.iter().map(|(l, _)| *l as f64).sum::<f64>();
            let loss = trainer.apply(&mut state, results, Reduction::Mean)?;
            losses.push(LossRow {
                epoch,
                step: trainer.step(),
                loss,
            });
        }
        let mean = sum / volumes.len() as f64;
        log::info!("pretrain epoch {epoch}/{} loss {mean:.5}", cfg.epochs);
        epoch_losses.push(mean);
    }
    Ok(PretrainResult {
        config: model.clone(),
        state,
        losses,
        epoch_losses,
    })
}

/// Loads the dataset, pre-trains and writes the checkpoint, loss log and
/// run manifest below `cfg.out`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainResult> {
    let out = out_dir(cfg)?;
    create_dir(out)?;
    write_file(&out.join(RUN_MANIFEST_FILE), cfg.manifest_json().as_bytes())?;
    let records = load_cohort(cfg)?;
    let volumes: Vec<MultimodalVolume> = records.into_iter().map(|r| r.volume).collect();
    let result = if cfg.log_plans {
        let path = out.join(PLAN_LOG_FILE);
        let file = std::fs::File::create(&path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(file);
        let r = pretrain(cfg, &volumes, Some(&mut w))?;
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        r
    } else {
        pretrain(cfg, &volumes, None)?
    };
    write_loss_csv(&out.join(LOSS_FILE), &result.losses)?;
    save_checkpoint(
        &out.join(CHECKPOINT_DIR),
        &result.config,
        &result.state,
        serde_json::json!({ "task": "pretrain", "seed": cfg.seed }),
    )?;
    Ok(result)
}

/// Writes only the run manifest, for inspecting a configuration.
pub fn dry_run(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join(RUN_MANIFEST_FILE), cfg.manifest_json().as_bytes())
}
