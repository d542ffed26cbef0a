//! Dataset and checkpoint round-trips and their error cases.

use std::fs;

use bmmae::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, PARAMS_FILE};
use bmmae::dataset::{
    load_dataset, load_patient, read_survival_csv, save_dataset, write_survival_csv,
};
use bmmae::error::{CheckpointError, DatasetError, Error};
use bmmae_core::heads::{ClsHead, TaskModel};
use bmmae_core::masking::sample_mask_plan;
use bmmae_core::modality::Modality;
use bmmae_core::model::{decode, encode, ModelConfig, ModelState};
use bmmae_core::params::Parameters;
use bmmae_core::synth::generate_synthetic_cohort;
use bmmae_core::volume::{preprocess, SurvivalRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_synthetic_cohort(2, (16, 16, 16), 3, 8).unwrap();
    save_dataset(dir.path(), &cohort).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, cohort);
}

#[test]
fn dataset_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_synthetic_cohort(1, (16, 16, 16), 3, 8).unwrap();
    save_dataset(dir.path(), &cohort).unwrap();
    let patient = dir.path().join(&cohort[0].volume.patient_id);

    // one float short of the declared shape
    let blob = patient.join("T1.f32");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        load_patient(&patient),
        Err(Error::Dataset(DatasetError::TruncatedBlob { .. }))
    ));
    fs::write(&blob, &bytes).unwrap();

    let meta_path = patient.join("meta.json");
    let meta = fs::read_to_string(&meta_path).unwrap();
    fs::write(&meta_path, meta.replace("\"T2\"", "\"T3\"")).unwrap();
    assert!(matches!(
        load_patient(&patient),
        Err(Error::Dataset(DatasetError::UnknownModality { .. }))
    ));

    fs::write(&meta_path, "{ not json").unwrap();
    let err = load_patient(&patient).unwrap_err();
    assert!(matches!(
        err,
        Error::Dataset(DatasetError::MalformedSidecar { .. })
    ));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn survival_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let rows = vec![
        ("a".to_string(), SurvivalRecord::new(3.5, true)),
        ("b".to_string(), SurvivalRecord::new(10.0, false)),
    ];
    write_survival_csv(&path, &rows).unwrap();
    assert!(fs::read_to_string(&path)
        .unwrap()
        .starts_with("patient_id,time,event\n"));
    assert_eq!(read_survival_csv(&path).unwrap(), rows);
}

fn tiny_with_dim(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        mlp_dim: 2 * dim,
        input_shape: (16, 16, 16),
        ..ModelConfig::tiny()
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let config = tiny_with_dim(96);
    let state = ModelState::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(a.path(), &config, &state, serde_json::Value::Null).unwrap();
    let (cfg2, loaded) = load_checkpoint(a.path()).unwrap().model(None).unwrap();
    assert_eq!(cfg2, config);
    assert_eq!(loaded, state);
    save_checkpoint(b.path(), &cfg2, &loaded, serde_json::Value::Null).unwrap();
    for f in [MANIFEST_FILE, PARAMS_FILE] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn forward_pass_is_bit_identical_after_round_trip() {
    let config = tiny_with_dim(96);
    let state = ModelState::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &config, &state, serde_json::Value::Null).unwrap();
    let (_, loaded) = load_checkpoint(dir.path())
        .unwrap()
        .model(Some(&config))
        .unwrap();
    let record = &generate_synthetic_cohort(1, (16, 16, 16), 4, 8).unwrap()[0];
    let volume = preprocess(&record.volume, (16, 16, 16)).unwrap();
    let run = |s: &ModelState<f32>| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let plan = sample_mask_plan(
            config.patches_per_modality(),
            &Modality::ALL,
            0.75,
            1.0,
            &mut rng,
        )
        .unwrap();
        let enc = encode(&volume, &plan, s, &config).unwrap();
        (enc.hidden.clone(), decode(&enc, &plan, s, &config).unwrap())
    };
    let (h1, d1) = run(&state);
    let (h2, d2) = run(&loaded);
    assert_eq!(
        h1.as_slice()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>(),
        h2.as_slice()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    );
    for m in Modality::ALL {
        let (a, b) = (d1.get(m).unwrap(), d2.get(m).unwrap());
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn width_mismatch_is_a_config_error() {
    let small = tiny_with_dim(64);
    let state = ModelState::<f32>::init(&small, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &small, &state, serde_json::Value::Null).unwrap();
    let err = load_checkpoint(dir.path())
        .unwrap()
        .model(Some(&tiny_with_dim(96)))
        .unwrap_err();
    assert!(
        matches!(
            err,
            Error::Checkpoint(CheckpointError::WidthMismatch { .. })
        ),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_and_missing_parameters_are_rejected() {
    let config = tiny_with_dim(96);
    let state = ModelState::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &config, &state, serde_json::Value::Null).unwrap();
    let manifest_path = dir.path().join(MANIFEST_FILE);
    let original = fs::read_to_string(&manifest_path).unwrap();

    fs::write(
        &manifest_path,
        original.replacen("\"cls_token\"", "\"bogus_token\"", 1),
    )
    .unwrap();
    let err = load_checkpoint(dir.path())
        .unwrap()
        .model(None)
        .unwrap_err();
    assert!(matches!(
        err,
        Error::Checkpoint(
            CheckpointError::MissingParameter(_) | CheckpointError::UnknownParameter(_)
        )
    ));

    // an extra tensor that no parameter claims
    let mut manifest: serde_json::Value = serde_json::from_str(&original).unwrap();
    let blob_len = fs::metadata(dir.path().join(PARAMS_FILE)).unwrap().len();
    manifest["tensors"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({"name": "stray", "shape": [1, 1], "offset": blob_len}));
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let mut blob = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
    blob.extend(1.0f32.to_le_bytes());
    fs::write(dir.path().join(PARAMS_FILE), &blob).unwrap();
    let err = load_checkpoint(dir.path())
        .unwrap()
        .model(None)
        .unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(CheckpointError::UnknownParameter(ref n)) if n == "stray"),
        "{err}"
    );

    // blob shorter than the manifest describes
    blob.truncate(blob.len() - 8);
    fs::write(dir.path().join(PARAMS_FILE), &blob).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(Error::Checkpoint(CheckpointError::BlobMismatch { .. }))
    ));
}

#[test]
fn task_checkpoint_keeps_head_under_prefix() {
    let config = tiny_with_dim(96);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let task = TaskModel {
        model: ModelState::<f32>::init(&config, &mut rng).unwrap(),
        head: ClsHead::init(96, &mut rng),
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(
        dir.path(),
        &config,
        &task,
        serde_json::json!({"task": "cls"}),
    )
    .unwrap();
    let ckpt = load_checkpoint(dir.path()).unwrap();
    assert!(ckpt.names().any(|n| n == "head.linear.weight"));
    let (_, model) = ckpt.model(None).unwrap();
    assert_eq!(model, task.model);
    let mut head = ClsHead::zeros(96);
    ckpt.head(&mut head).unwrap();
    assert_eq!(head, task.head);
    assert_eq!(
        task.parameter_count(),
        model.parameter_count() + head.parameter_count()
    );
}
