//! Run configuration: a JSON file whose fields mirror [`RunConfig`], merged
//! with per-task defaults.

use std::fs;
use std::path::{Path, PathBuf};

use bmmae_core::modality::Modality;
use bmmae_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    Seg,
    Cls,
    Surv,
    Reconstruct,
    Consistency,
    GenSynth,
}

impl Task {
    pub fn is_finetune(self) -> bool {
        matches!(self, Task::Seg | Task::Cls | Task::Surv)
    }
}

/// Optimization defaults for one task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl TaskDefaults {
    /// Full-scale schedule of the published setup.
    pub fn paper(task: Task) -> Self {
        let (epochs, batch_size, lr, warmup_epochs) = match task {
            Task::Seg => (70, 2, 5e-4, 10),
            Task::Cls => (10, 2, 1e-4, 5),
            Task::Surv => (5, 2, 1e-4, 5),
            _ => (1000, 6, 1e-4, 50),
        };
        TaskDefaults {
            epochs,
            batch_size,
            lr,
            weight_decay: 0.05,
            warmup_epochs,
        }
    }

    /// Shortened schedule for the tiny model on a desktop CPU.
    pub fn desk(task: Task) -> Self {
        match task {
            Task::Seg => TaskDefaults {
                epochs: 24,
                lr: 1e-3,
                warmup_epochs: 3,
                ..Self::paper(task)
            },
            Task::Cls | Task::Surv => Self::paper(task),
            _ => TaskDefaults {
                epochs: 200,
                batch_size: 8,
                lr: 1e-3,
                weight_decay: 0.05,
                warmup_epochs: 10,
            },
        }
    }
}

/// Fully resolved run description. Serialized as the run manifest; a
/// manifest can be fed back as a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub preset: String,
    pub model: ModelConfig,
    pub data: PathBuf,
    /// Output directory; not part of the manifest so that runs differing
    /// only in where they write compare equal.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    /// Optional `patient_id,time,event` file overriding sidecar survival.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_csv: Option<PathBuf>,
    pub subset: Vec<Modality>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Survival interval count `K`.
    pub intervals: usize,
    pub folds: usize,
    /// Validation share of the segmentation hold-out split.
    pub val_fraction: f64,
    pub seg_channels: usize,
    /// Worker threads for per-patient gradients.
    pub threads: usize,
    /// `scratch` or a checkpoint directory.
    pub init: String,
    /// Also write every sampled mask plan to `plans.jsonl`.
    #[serde(default)]
    pub log_plans: bool,
}

/// Config file contents: every field optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub task: Option<Task>,
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub survival_csv: Option<PathBuf>,
    pub subset: Option<Vec<Modality>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub intervals: Option<usize>,
    pub folds: Option<usize>,
    pub val_fraction: Option<f64>,
    pub seg_channels: Option<usize>,
    pub threads: Option<usize>,
    pub init: Option<String>,
    pub log_plans: Option<bool>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills unset fields with the defaults of `task` (paper-scale or desk).
    /// A task named in the file must agree with `task`.
    pub fn resolve(self, task: Task, paper_scale: bool) -> Result<RunConfig> {
        if let Some(t) = self.task {
            if t != task {
                return Err(Error::Config(format!(
                    "config file is for task {t:?}, command runs {task:?}"
                )));
            }
        }
        let d = if paper_scale {
            TaskDefaults::paper(task)
        } else {
            TaskDefaults::desk(task)
        };
        let preset = self
            .preset
            .unwrap_or_else(|| if paper_scale { "paper" } else { "tiny" }.to_string());
        let model = match self.model {
            Some(m) => m,
            None => ModelConfig::preset(&preset).map_err(|e| Error::Config(e.to_string()))?,
        };
        let cfg = RunConfig {
            task,
            preset,
            model,
            data: self
                .data
                .ok_or_else(|| Error::Config("`data` is required".into()))?,
            out: self.out,
            survival_csv: self.survival_csv,
            subset: self.subset.unwrap_or_else(|| Modality::ALL.to_vec()),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            warmup_epochs: self.warmup_epochs.unwrap_or(d.warmup_epochs),
            seed: self.seed.unwrap_or(0),
            intervals: self.intervals.unwrap_or(10),
            folds: self.folds.unwrap_or(5),
            val_fraction: self.val_fraction.unwrap_or(0.2),
            seg_channels: self.seg_channels.unwrap_or(bmmae_core::heads::SEG_CHANNELS),
            threads: self.threads.unwrap_or(1),
            init: self.init.unwrap_or_else(|| "scratch".into()),
            log_plans: self.log_plans.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Defaults for `task` with the given dataset path.
    pub fn for_task(task: Task, data: impl Into<PathBuf>) -> Result<Self> {
        ConfigFile {
            data: Some(data.into()),
            ..Default::default()
        }
        .resolve(task, false)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut subset = self.subset.clone();
        subset.sort();
        subset.dedup();
        if subset.len() != self.subset.len() {
            return bad("subset lists a modality twice".into());
        }
        if subset.is_empty() {
            return bad("subset must be non-empty".into());
        }
        if self.task == Task::Pretrain && subset.len() != Modality::COUNT {
            return bad("pre-training uses all four modalities".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.task == Task::Surv && self.intervals < 2 {
            return bad("survival needs at least 2 intervals".into());
        }
        if matches!(self.task, Task::Cls | Task::Surv) && self.folds < 2 {
            return bad("cross-validation needs at least 2 folds".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        if self.seg_channels == 0 {
            return bad("seg_channels must be positive".into());
        }
        Ok(())
    }

    pub fn subset_key(&self) -> String {
        Modality::subset_key(&self.subset)
    }

    /// The manifest JSON, which excludes `out`.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_pretraining_values() {
        let cfg = ConfigFile {
            data: Some("d".into()),
            ..Default::default()
        }
        .resolve(Task::Pretrain, true)
        .unwrap();
        assert_eq!(
            (
                cfg.epochs,
                cfg.batch_size,
                cfg.lr,
                cfg.weight_decay,
                cfg.warmup_epochs
            ),
            (1000, 6, 1e-4, 0.05, 50)
        );
        assert_eq!(cfg.model, ModelConfig::paper());
    }

    #[test]
    fn manifest_round_trips_and_omits_out() {
        let mut cfg = RunConfig::for_task(Task::Seg, "data").unwrap();
        cfg.out = Some("elsewhere".into());
        let json = cfg.manifest_json();
        assert!(!json.contains("elsewhere"));
        let file: ConfigFile = serde_json::from_str(&json).unwrap();
        let back = file.resolve(Task::Seg, false).unwrap();
        assert_eq!(back, RunConfig { out: None, ..cfg });
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = RunConfig::for_task(Task::Pretrain, "d").unwrap();
        cfg.subset = vec![Modality::T1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::for_task(Task::Cls, "d").unwrap();
        cfg.warmup_epochs = cfg.epochs + 1;
        assert!(cfg.validate().is_err());
        cfg.warmup_epochs = 0;
        cfg.subset.clear();
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<ConfigFile>(r#"{"data":"x","bogus":1}"#).is_err());
        let wrong = ConfigFile {
            task: Some(Task::Cls),
            data: Some("d".into()),
            ..Default::default()
        };
        assert!(wrong.resolve(Task::Seg, false).is_err());
    }
}
