use super::*;

fn synthetic_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::mnist_default(seed);
    c.dataset = DataConfig {
        name: DatasetName::Synthetic,
        dir: None,
        train_limit: Some(600),
        test_limit: Some(300),
    };
    c.pretrain = TrainConfig {
        lr: 0.05,
        epochs: 2,
        batch: 32,
        ..Default::default()
    };
    c.selection.epochs = 1;
    c.selection.batch = 64;
    c.selection.examples = Some(256);
    c.finetune = TrainConfig {
        lr: 0.01,
        epochs: 1,
        batch: 32,
        ..Default::default()
    };
    c
}

#[test]
fn config_validation() {
    let good = synthetic_config(0);
    good.validate().unwrap();
    let mut c = good.clone();
    c.prune.rate = 1.0;
    assert!(c.validate().is_err());
    let mut c = good.clone();
    c.pretrain.batch = 0;
    assert!(c.validate().is_err());
    let mut c = good.clone();
    c.arch = "vgg".into();
    assert!(matches!(c.validate(), Err(Error::UnknownArch { .. })));
    let mut c = good.clone();
    c.selection.examples = Some(0);
    assert!(c.validate().is_err());
}

#[test]
fn config_json_requires_seed_and_rejects_unknown_fields() {
    let c = synthetic_config(3);
    let mut v = serde_json::to_value(&c).unwrap();
    assert_eq!(serde_json::from_value::<ExperimentConfig>(v.clone()).unwrap(), c);
    v.as_object_mut().unwrap().insert("colour".into(), json!(1));
    assert!(serde_json::from_value::<ExperimentConfig>(v.clone()).is_err());
    v.as_object_mut().unwrap().remove("colour");
    v.as_object_mut().unwrap().remove("seed");
    let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn untrained_network_is_near_chance() {
    let mut c = synthetic_config(1);
    c.pretrain.epochs = 0;
    let data = load_data(&c.dataset, c.seed).unwrap();
    let runner = Runner::new(c, None, false).unwrap();
    let net = runner.pretrain(&data).unwrap();
    let acc = evaluate(&net.value, &data.test, 100).unwrap();
    assert!(acc < 0.3, "{acc}");
}

#[test]
fn pretraining_learns_and_is_deterministic() {
    let c = synthetic_config(2);
    let data = load_data(&c.dataset, c.seed).unwrap();
    let runner = Runner::new(c, None, false).unwrap();
    let a = runner.pretrain(&data).unwrap();
    let b = runner.pretrain(&data).unwrap();
    assert_eq!(a.artifact.hash, b.artifact.hash);
    let acc = evaluate(&a.value, &data.test, 100).unwrap();
    assert!(acc > 0.5, "{acc}");
}

#[test]
fn divergence_is_reported() {
    let mut c = synthetic_config(2);
    c.pretrain.lr = 1e200;
    let data = load_data(&c.dataset, c.seed).unwrap();
    let runner = Runner::new(c, None, false).unwrap();
    assert!(matches!(runner.pretrain(&data), Err(Error::Diverged { .. })));
}

#[test]
fn zero_finetune_epochs_keep_pruned_accuracy() {
    let mut c = synthetic_config(4);
    c.finetune.epochs = 0;
    let data = load_data(&c.dataset, c.seed).unwrap();
    let out = Runner::new(c, None, false).unwrap().run(&data).unwrap();
    assert_eq!(out.record.final_accuracy, out.record.pruned_accuracy);
    assert!(out.record.reduction.flops_drop_pct > 40.0);
    assert_eq!(out.record.beta_histograms.len(), 3);
    assert_eq!(out.record.beta_histograms[0].counts.iter().sum::<usize>(), 16);
}

#[test]
fn rate_zero_keeps_accuracy() {
    let mut c = synthetic_config(5);
    c.prune.rate = 0.0;
    c.finetune.lr = 1e-3;
    c.dataset.test_limit = None;
    let data = load_data(&c.dataset, c.seed).unwrap();
    let out = Runner::new(c, None, false).unwrap().run(&data).unwrap();
    let r = &out.record;
    assert_eq!(r.reduction.params_drop_pct, 0.0);
    assert_eq!(r.reduction.flops_drop_pct, 0.0);
    assert_eq!(r.pruned_accuracy, r.baseline_accuracy);
    assert!((r.final_accuracy - r.baseline_accuracy).abs() <= 0.002 + 1e-12, "{r:?}");
}

#[test]
fn store_reuses_and_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let c = synthetic_config(6);
    let data = load_data(&c.dataset, c.seed).unwrap();
    let first = Runner::new(c.clone(), Some(&store), false).unwrap().run(&data).unwrap();
    let again = Runner::new(c.clone(), Some(&store), false).unwrap().run(&data).unwrap();
    let forced = Runner::new(c, Some(&store), true).unwrap().run(&data).unwrap();
    assert_eq!(first.record.without_timestamp(), again.record.without_timestamp());
    assert_eq!(first.record.without_timestamp(), forced.record.without_timestamp());
    for stage in ["pretrain", "knockoff", "select", "plan", "prune", "finetune"] {
        let h = &first.record.artifacts[stage];
        let files: Vec<_> = std::fs::read_dir(dir.path().join("objects"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with(h.as_str()))
            .collect();
        assert_eq!(files.len(), 1, "{stage}");
        assert_eq!(&sha256_hex(&std::fs::read(files[0].path()).unwrap()), h);
    }
}

#[test]
fn corrupted_store_object_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let key = stage_key("x", &json!({"a": 1}));
    let r = store.put("x", &key, "bin", b"hello").unwrap();
    assert_eq!(store.lookup("x", &key).unwrap().unwrap().1, b"hello");
    std::fs::write(dir.path().join("objects").join(&r.file), b"jello").unwrap();
    assert!(store.lookup("x", &key).is_err());
    assert!(store.lookup("x", "other").unwrap().is_none());
}

#[test]
fn ablation_enumerates_eight_variants() {
    let cfgs = ablation_configs(&synthetic_config(0));
    assert_eq!(cfgs.len(), 8);
    let mut seen: Vec<_> = cfgs.iter().map(|c| (c.selection.control, c.selection.bias)).collect();
    seen.dedup();
    assert_eq!(seen.len(), 8);
}

#[test]
fn metrics_lines_append() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/metrics.jsonl");
    let mut c = synthetic_config(7);
    c.pretrain.epochs = 0;
    c.finetune.epochs = 0;
    c.prune.criterion = Criterion::L1;
    let data = load_data(&c.dataset, c.seed).unwrap();
    let rec = Runner::new(c, None, false).unwrap().run(&data).unwrap().record;
    append_metrics(&path, &rec).unwrap();
    append_metrics(&path, &rec).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], rec);
    assert_eq!(rec.label, "l1");
}

#[test]
fn planted_zero_epochs_is_half_on_average() {
    let config = PlantedConfig {
        selection_epochs: 0,
        examples: 256,
        ..Default::default()
    };
    let mean: f64 = (0..8)
        .map(|s| planted_diagnostic(s, ControlMode::Noise, &config).unwrap().precision)
        .sum::<f64>()
        / 8.0;
    assert!((mean - 0.5).abs() <= 0.2, "{mean}");
}

#[test]
fn planted_teacher_layout() {
    let planted = crate::data::make_planted_dataset(0, 16, 4, 4).unwrap();
    let t = build_teacher(&planted, false).unwrap();
    assert_eq!(t.infer_shapes().unwrap()[0], vec![16, 1, 1]);
    let prunable = t.prunable_layers();
    assert_eq!(prunable.len(), 1);
    assert_eq!((prunable[0].conv, prunable[0].mix_point, prunable[0].consumer), (0, 1, 3));
}

#[test]
fn top_k_and_precision() {
    assert_eq!(top_k(&[0.1, 0.9, 0.9, 0.2], 2), vec![1, 2]);
    assert_eq!(top_k(&[0.0; 4], 2), vec![0, 1]);
    assert_eq!(precision(&[1, 2], &[2, 3]), 0.5);
}
