use super::*;
use crate::multistage::param_checksum;
use crate::phantom::{simulate_sequence, PhantomSpec};

fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(NetworkConfig::new(4, 4, 2));
    cfg.seed = seed;
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 2;
    cfg.stages = 2;
    cfg
}

fn tiny_data() -> TrainingData {
    let seqs: Vec<RfSequence> = (0..2)
        .map(|s| simulate_sequence(&PhantomSpec::uniform(32, 32, 0.01, 2, 10 + s)).unwrap().0)
        .collect();
    TrainingData::from_sequences(&seqs, &seqs[..1], 2).unwrap()
}

fn losses(o: &TrainOutcome) -> Vec<f64> {
    o.stages
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.losses.l_total))
        .collect()
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config(0);
    assert!(cfg.validate().is_ok());
    cfg.batch_size = 2;
    assert!(matches!(cfg.validate(), Err(Error::Configuration(_))));
    let mut cfg = tiny_config(0);
    cfg.learning_rate = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(0);
    cfg.frames = 3;
    assert!(cfg.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::desk(4)).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::desk(4));
    assert_eq!(back.learning_rate, 1e-3);
    let minimal = r#"{"T": 3, "network": {"levels": 4, "base_channels": 8, "T": 3,
        "lstm_hidden": [8, 8, 16, 32], "upsample_factor": 4}}"#;
    let cfg: TrainConfig = serde_json::from_str(minimal).unwrap();
    assert_eq!(cfg, TrainConfig::new(NetworkConfig::new(4, 8, 3)));
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(5, 1, 0, 10);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(5, 1, 0, 10));
    assert_ne!(a, epoch_order(5, 1, 1, 10));
}

#[test]
fn empty_training_set_is_no_data() {
    let err = TrainingData::from_sequences(&[], &[], 2).unwrap_err();
    assert!(matches!(err, Error::NoData(_)));
}

#[test]
fn same_seed_same_trajectory_and_resume_matches() {
    let data = tiny_data();
    let cfg = tiny_config(21);
    let a = train_in_memory(&cfg, &data).unwrap();
    let b = train_in_memory(&cfg, &data).unwrap();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(losses(&a).len(), 2 * 3 + 2 * 2);

    let dir = tempfile::tempdir().unwrap();
    let first = train_with_data(
        &cfg,
        &data,
        dir.path(),
        None,
        TrainOptions {
            stop_after_epochs: Some(2),
        },
    )
    .unwrap();
    assert!(!first.stages[0].complete);
    let rest = resume(dir.path(), Some(&data), TrainOptions::default()).unwrap();
    let mut split = losses(&first);
    split.extend(losses(&rest));
    let full = losses(&a);
    assert_eq!(split.len(), full.len());
    for (x, y) in split.iter().zip(&full) {
        assert!(((x - y) / y).abs() <= 1e-6, "{x} vs {y}");
    }
    let log = read_train_log(dir.path()).unwrap();
    assert_eq!(log.len(), full.len());
    for (line, y) in log.iter().zip(&full) {
        assert_eq!(line["l_total"].as_f64().unwrap(), *y);
        assert_eq!(line["t"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn run_checkpoint_round_trip_is_byte_identical() {
    let data = tiny_data();
    let cfg = tiny_config(3);
    let a = tempfile::tempdir().unwrap();
    train_with_data(
        &cfg,
        &data,
        a.path(),
        None,
        TrainOptions {
            stop_after_epochs: Some(1),
        },
    )
    .unwrap();
    let ck = RunCheckpoint::load(a.path()).unwrap();
    assert_eq!(ck.adam.step, 2);
    let b = tempfile::tempdir().unwrap();
    ck.save(b.path()).unwrap();
    let c = tempfile::tempdir().unwrap();
    RunCheckpoint::load(b.path()).unwrap().save(c.path()).unwrap();
    let files = |d: &Path| {
        let mut v = Vec::new();
        let mut stack = vec![d.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else if e.file_name().unwrap() != LOG_FILE {
                    v.push((e.strip_prefix(d).unwrap().to_path_buf(), fs::read(&e).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(files(b.path()), files(c.path()));

    let mut state: serde_json::Value = serde_json::from_str(&fs::read_to_string(c.path().join(STATE_FILE)).unwrap()).unwrap();
    state["format_version"] = 99.into();
    fs::write(c.path().join(STATE_FILE), state.to_string()).unwrap();
    assert!(matches!(RunCheckpoint::load(c.path()), Err(Error::IncompatibleCheckpoint(_))));
}

#[test]
fn stage_two_leaves_stage_one_untouched() {
    let data = tiny_data();
    let mut cfg = tiny_config(8);
    cfg.stages = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = train_with_data(&cfg, &data, dir.path(), None, TrainOptions::default()).unwrap();
    assert!(out.stack.stage(1).unwrap().frozen);
    let before = param_checksum(&out.stack.stage(1).unwrap().net).unwrap();
    let bytes_before = fs::read(dir.path().join("stage1/head.j0.weight.f32")).unwrap();
    let s2 = train_run_stage(dir.path(), 2, false, Some(&data)).unwrap();
    assert_eq!(s2.stage, 2);
    let stack = StageStack::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(stack.len(), 2);
    assert_eq!(param_checksum(&stack.stage(1).unwrap().net).unwrap(), before);
    assert_eq!(fs::read(dir.path().join("stage1/head.j0.weight.f32")).unwrap(), bytes_before);
    assert!(matches!(
        train_run_stage(dir.path(), 1, false, Some(&data)),
        Err(Error::FreezeViolation(_))
    ));
    assert!(matches!(
        train_run_stage(dir.path(), 4, false, Some(&data)),
        Err(Error::Configuration(_))
    ));
}

#[test]
fn huge_step_diverges_with_dump() {
    let data = tiny_data();
    let mut cfg = tiny_config(1);
    cfg.learning_rate = 1e38;
    cfg.clip_norm = 1e30;
    let dir = tempfile::tempdir().unwrap();
    let err = train_with_data(&cfg, &data, dir.path(), None, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert_eq!(err.kind(), crate::ErrorKind::Divergence);
    assert!(dir.path().join(DUMP_FILE).is_file());
}

#[test]
fn zero_motion_is_learned() {
    let spec = PhantomSpec::uniform(32, 32, 0.0, 2, 6);
    let (seq, _) = simulate_sequence(&spec).unwrap();
    let data = TrainingData::from_sequences(std::slice::from_ref(&seq), &[], 2).unwrap();
    let mut cfg = tiny_config(2);
    cfg.stages = 1;
    cfg.epochs_stage1 = 30;
    let out = train_in_memory(&cfg, &data).unwrap();
    let s = &out.stages[0];
    assert!(s.final_loss.unwrap() <= s.initial_loss);
    let fwd = out.stack.stage(1).unwrap().net.forward(&seq).unwrap();
    for step in &fwd.steps {
        assert!(step.displacement.mean_abs() < 0.1, "{}", step.displacement.mean_abs());
    }
}
