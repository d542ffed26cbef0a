//! In-process pipeline behaviour: determinism, subset isolation, error
//! mapping, reconstruction plans and task checkpoints.

use bmmae::config::{RunConfig, Task};
use bmmae::error::Error;
use bmmae::pipeline::{
    finetune, load_task_checkpoint, prepare, pretrain, reconstruct_cross_modal,
    save_task_checkpoint, Init, TrainedHead,
};
use bmmae_core::heads::{seg_loss_and_grad, SegHead, TaskModel};
use bmmae_core::modality::Modality;
use bmmae_core::model::{ModelConfig, ModelState};
use bmmae_core::optim::{AdamW, AdamWConfig};
use bmmae_core::params::Parameters;
use bmmae_core::synth::generate_synthetic_cohort;
use bmmae_core::volume::{CohortRecord, MultimodalVolume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The tiny architecture on 16³ volumes to keep these runs short.
fn small_model() -> ModelConfig {
    ModelConfig {
        input_shape: (16, 16, 16),
        ..ModelConfig::tiny()
    }
}

fn config(task: Task) -> RunConfig {
    let mut cfg = RunConfig::for_task(task, "unused").unwrap();
    cfg.model = small_model();
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    cfg
}

fn cohort(n: usize, seed: u64, cfg: &RunConfig) -> Vec<CohortRecord> {
    prepare(
        generate_synthetic_cohort(n, (16, 16, 16), seed, 8).unwrap(),
        cfg,
    )
    .unwrap()
}

fn volumes(records: &[CohortRecord]) -> Vec<MultimodalVolume> {
    records.iter().map(|r| r.volume.clone()).collect()
}

#[test]
fn pretraining_is_reproducible_for_any_thread_count() {
    let cfg = config(Task::Pretrain);
    let vols = volumes(&cohort(8, 1, &cfg));
    let a = pretrain(&cfg, &vols, None).unwrap();
    let b = pretrain(&cfg, &vols, None).unwrap();
    let threaded = pretrain(
        &RunConfig {
            threads: 3,
            ..cfg.clone()
        },
        &vols,
        None,
    )
    .unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.state, b.state);
    assert_eq!(a.losses, threaded.losses);
    assert_eq!(a.state, threaded.state);
    assert!(a.losses.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    assert_eq!(a.losses.len(), 2 * 2);
    let other = pretrain(&RunConfig { seed: 9, ..cfg }, &vols, None).unwrap();
    assert_ne!(a.losses, other.losses);
}

#[test]
fn plan_log_has_one_line_per_patient_step() {
    let cfg = config(Task::Pretrain);
    let vols = volumes(&cohort(4, 2, &cfg));
    let mut log = Vec::new();
    pretrain(
        &RunConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..cfg
        },
        &vols,
        Some(&mut log),
    )
    .unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["plan"]["patches"], 8);
    assert_eq!(first["plan"]["r"], 0.75);
}

#[test]
fn pretraining_rejects_missing_modalities_and_reports_divergence() {
    let cfg = config(Task::Pretrain);
    let mut vols = volumes(&cohort(2, 3, &cfg));
    let exploding = RunConfig {
        lr: 1e30,
        warmup_epochs: 0,
        epochs: 3,
        ..cfg.clone()
    };
    let err = pretrain(&exploding, &vols, None).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);

    let mut grids = vols[1].grids().clone();
    grids.remove(Modality::Flair);
    vols[1] = MultimodalVolume::new("partial", grids).unwrap();
    let err = pretrain(&cfg, &vols, None).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn subset_isolation_in_fine_tuning() {
    let mut cfg = config(Task::Cls);
    cfg.subset = vec![Modality::T1c];
    cfg.folds = 2;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    let records = cohort(8, 11, &cfg);
    let mut altered = records.clone();
    for r in &mut altered {
        for m in [Modality::T1, Modality::T2, Modality::Flair] {
            r.volume
                .grid_mut(m)
                .unwrap()
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = -*v * 3.0 + 1.0);
        }
    }
    let a = finetune(&cfg, &records, &Init::Scratch).unwrap();
    let b = finetune(&cfg, &altered, &Init::Scratch).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.model, b.model);
    assert_eq!(a.head, b.head);
    // tokenizers of modalities outside the subset are never touched
    let init = Init::Scratch.load(&cfg).unwrap();
    assert_eq!(
        a.model.tokenizer.get(Modality::T1).unwrap(),
        init.tokenizer.get(Modality::T1).unwrap()
    );
    assert_ne!(
        a.model.tokenizer.get(Modality::T1c).unwrap(),
        init.tokenizer.get(Modality::T1c).unwrap()
    );
}

#[test]
fn missing_labels_are_data_errors() {
    let cfg = config(Task::Seg);
    let mut records = cohort(4, 5, &cfg);
    records[2].seg = None;
    let err = finetune(&cfg, &records, &Init::Scratch).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn survival_fine_tuning_stores_cut_points() {
    let mut cfg = config(Task::Surv);
    cfg.epochs = 1;
    cfg.warmup_epochs = 1;
    cfg.folds = 2;
    cfg.intervals = 4;
    let records = cohort(12, 6, &cfg);
    let result = finetune(&cfg, &records, &Init::Scratch).unwrap();
    let c = result.report.subsets["T1+T1c+T2+FLAIR"].mean["cindex"];
    assert!((0.0..=1.0).contains(&c));
    let dir = tempfile::tempdir().unwrap();
    save_task_checkpoint(dir.path(), &cfg.model, &result).unwrap();
    let (config, model, head) = load_task_checkpoint(dir.path()).unwrap();
    assert_eq!(config, cfg.model);
    assert_eq!(model, result.model);
    let TrainedHead::Surv(h) = &head else {
        panic!("expected a survival head")
    };
    assert_eq!(h.cut_points.len(), 3);
    assert_eq!(head, result.head);
}

#[test]
fn pretrained_initialization_loads_encoder_and_rejects_wrong_width() {
    let pt_cfg = config(Task::Pretrain);
    let vols = volumes(&cohort(4, 7, &pt_cfg));
    let trained = pretrain(
        &RunConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..pt_cfg
        },
        &vols,
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    bmmae::checkpoint::save_checkpoint(
        dir.path(),
        &trained.config,
        &trained.state,
        serde_json::Value::Null,
    )
    .unwrap();
    let cfg = config(Task::Seg);
    let init = Init::Checkpoint(dir.path().to_path_buf());
    assert_eq!(init.load(&cfg).unwrap(), trained.state);
    let wider = RunConfig {
        model: ModelConfig {
            dim: 120,
            mlp_dim: 240,
            ..small_model()
        },
        ..cfg
    };
    let err = init.load(&wider).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn reconstruction_plans() {
    let cfg = config(Task::Pretrain);
    let state = ModelState::<f32>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let v = &volumes(&cohort(1, 8, &cfg))[0];
    let r = reconstruct_cross_modal(
        &state,
        &cfg.model,
        v,
        &[Modality::T1],
        &[Modality::T1c, Modality::T2, Modality::Flair],
    )
    .unwrap();
    assert_eq!(r.volumes.len(), 3);
    for (_, g) in r.volumes.iter() {
        assert_eq!(g.shape(), v.shape());
    }
    assert_eq!(r.plan.visible_of(Modality::T1).len(), 8);
    assert!(r.plan.visible_of(Modality::T2).is_empty());
    assert_eq!(r.masked_mse.len(), 3);

    // source = target: nothing masked, reconstruction still runs
    let same =
        reconstruct_cross_modal(&state, &cfg.model, v, &[Modality::T1], &[Modality::T1]).unwrap();
    assert_eq!(same.volumes.len(), 1);
    assert!(same.masked_mse.is_empty());

    let err = reconstruct_cross_modal(&state, &cfg.model, v, &[], &[Modality::T1]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

/// Overfitting one patient: 200 optimizer steps drive the soft-Dice term
/// below 30% of its initial value.
#[test]
fn segmentation_overfits_one_patient() {
    let model_cfg = small_model();
    let rec = &cohort(1, 12, &config(Task::Seg))[0];
    let label = rec.seg.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = TaskModel {
        model: ModelState::<f32>::init(&model_cfg, &mut rng).unwrap(),
        head: SegHead::init(&model_cfg, 16, &mut rng).unwrap(),
    };
    let mut opt = AdamW::new(&params, AdamWConfig::default());
    let subset = Modality::ALL;
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let (loss, g, hg) = seg_loss_and_grad(
            &rec.volume,
            label,
            &subset,
            &params.model,
            &params.head,
            &model_cfg,
        )
        .unwrap();
        first.get_or_insert(loss.dice);
        last = loss.dice;
        opt.step(&mut params, &TaskModel { model: g, head: hg }, 1e-3);
    }
    let first = first.unwrap();
    assert!(last < 0.3 * first, "dice loss {first} -> {last}");
    assert!(params.all_finite());
}
