use std::path::Path;

use nco_core::env::{generate, EnvId, GenerateOptions};
use nco_core::policy::{ParamSet, Policy, PolicyConfig};
use nco_core::tensor::Tensor;
use nco_core::train::ncof::{Ncof, NcofArray};
use nco_core::train::{
    clip_grad_norm, dataset_to_ncof, fit, load_checkpoint, load_config, match_params, read_dataset, resolve,
    save_checkpoint, write_dataset, CheckpointMeta, FitOptions, MetricsRow, MultiStepLr, TrainConfig, TrainError,
    PRESETS,
};
use proptest::prelude::*;

const BASE: &str = r#"
[env]
name = "tsp"
num_loc = 20
"#;

fn cfg(extra: &[&str]) -> Result<TrainConfig, TrainError> {
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    resolve(&[("base.toml".into(), BASE.into())], &overrides)
}

fn meta() -> CheckpointMeta {
    CheckpointMeta {
        kind: "checkpoint".into(),
        config_hash: "abc".into(),
        epoch: 3,
        global_step: 42,
        extra: serde_json::json!({"rng": [1, 2, 3]}),
    }
}

fn bits(p: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn ncof_round_trip_is_bit_exact() {
    let odd = [0.0f32, -0.0, f32::MIN_POSITIVE / 3.0, f32::NAN, f32::INFINITY, 1.0 / 3.0];
    let file = Ncof {
        arrays: vec![
            ("a".into(), NcofArray::F32(Tensor::new(vec![2, 3], odd.to_vec()))),
            ("b".into(), NcofArray::I32(Tensor::new(vec![4], vec![i32::MIN, -1, 0, i32::MAX]))),
            ("c".into(), NcofArray::U8(Tensor::new(vec![0, 5], vec![]))),
            ("d".into(), NcofArray::U8(Tensor::new(vec![3], vec![0, 1, 255]))),
        ],
        meta: serde_json::json!({"k": "v"}),
    };
    let bytes = file.to_bytes().unwrap();
    assert_eq!(&bytes[..5], b"NCOF1");
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    // payload after the header is exactly the declared arrays
    assert_eq!(bytes.len() - 9 - header_len, 6 * 4 + 4 * 4 + 3);
    let back = Ncof::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let NcofArray::F32(a) = back.get("a").unwrap() else { panic!("dtype") };
    let got: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
    let want: Vec<u32> = odd.iter().map(|x| x.to_bits()).collect();
    assert_eq!(got, want);
    assert_eq!(back.get("c").unwrap().shape(), &[0, 5]);
}

#[test]
fn ncof_rejects_bad_magic_and_truncation() {
    let file = Ncof {
        arrays: vec![("x".into(), NcofArray::F32(Tensor::new(vec![2], vec![1.0, 2.0])))],
        meta: serde_json::json!({}),
    };
    let mut bytes = file.to_bytes().unwrap();
    let mut wrong = bytes.clone();
    wrong[4] = b'2';
    assert!(matches!(Ncof::from_bytes(&wrong), Err(TrainError::MagicMismatch)));
    assert!(matches!(Ncof::from_bytes(b"NC"), Err(TrainError::MagicMismatch)));
    let short = &bytes[..bytes.len() - 1];
    assert!(matches!(Ncof::from_bytes(short), Err(TrainError::Format(_))));
    bytes.push(0);
    assert!(matches!(Ncof::from_bytes(&bytes), Err(TrainError::Format(_))));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let policy = Policy::new(PolicyConfig::am(EnvId::Cvrp), 7).unwrap();
    let extra = vec![("optim.step".into(), NcofArray::I32(Tensor::new(vec![1], vec![5])))];
    let (p1, p2) = (dir.path().join("a.ncof"), dir.path().join("b.ncof"));
    save_checkpoint(&p1, &policy.params, extra.clone(), &meta()).unwrap();
    let (loaded, m, _) = load_checkpoint(&p1).unwrap();
    assert_eq!(m, meta());
    assert_eq!(bits(&loaded), bits(&policy.params));
    save_checkpoint(&p2, &loaded, extra, &m).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn loading_into_a_different_width_names_the_first_array() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ncof");
    let small = Policy::new(PolicyConfig::am(EnvId::Tsp), 1).unwrap();
    save_checkpoint(&path, &small.params, vec![], &meta()).unwrap();
    let (stored, _, _) = load_checkpoint(&path).unwrap();
    let mut wide_cfg = PolicyConfig::am(EnvId::Tsp);
    wide_cfg.embedding_dim = 64;
    let wide = Policy::new(wide_cfg, 1).unwrap();
    let err = match_params(&wide.params, &stored).unwrap_err();
    let first = wide
        .params
        .names()
        .filter(|n| wide.params.get(n).unwrap().shape() != stored.get(n).unwrap().shape())
        .min()
        .unwrap()
        .to_string();
    match err {
        TrainError::ShapeMismatchOnLoad { name, expected, found } => {
            assert_eq!(name, first);
            assert_eq!(&expected, wide.params.get(&first).unwrap().shape());
            assert_eq!(found.as_deref(), Some(stored.get(&first).unwrap().shape()));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn greedy_is_identical_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ncof");
    let policy = Policy::new(PolicyConfig::am(EnvId::Tsp), 3).unwrap();
    let inst = generate(EnvId::Tsp, 20, 100, 11, &GenerateOptions::default()).unwrap();
    let before = policy.greedy(&inst, None).unwrap();
    save_checkpoint(&path, &policy.params, vec![], &meta()).unwrap();
    let (stored, _, _) = load_checkpoint(&path).unwrap();
    let reloaded = Policy { config: policy.config.clone(), params: match_params(&policy.params, &stored).unwrap() };
    let after = reloaded.greedy(&inst, None).unwrap();
    assert_eq!(before.actions, after.actions);
    let bits = |r: &[f32]| r.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before.reward), bits(&after.reward));
}

#[test]
fn dataset_schema_and_round_trip() {
    let inst = generate(EnvId::Tsp, 50, 10, 1234, &GenerateOptions::default()).unwrap();
    let file = dataset_to_ncof(&inst);
    assert_eq!(file.arrays.len(), 1);
    assert_eq!(file.arrays[0].0, "locs");
    assert_eq!(file.arrays[0].1.dtype(), "f32");
    assert_eq!(file.arrays[0].1.shape(), &[10, 50, 2]);

    let dir = tempfile::tempdir().unwrap();
    for env in EnvId::ALL {
        let path = dir.path().join(format!("{}.ncof", env.name()));
        let inst = generate(env, 10, 16, 1234, &GenerateOptions::default()).unwrap();
        write_dataset(&inst, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, inst, "{env:?}");
        let regenerated = generate(env, 10, 16, 1234, &GenerateOptions::default()).unwrap();
        assert_eq!(regenerated, back);
    }
}

#[test]
fn checkpoint_is_not_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ncof");
    save_checkpoint(&path, &ParamSet::new(), vec![], &meta()).unwrap();
    assert!(read_dataset(&path).is_err());
    std::fs::write(&path, b"not a container").unwrap();
    assert!(matches!(read_dataset(&path), Err(TrainError::MagicMismatch)));
}

#[test]
fn config_defaults_and_overrides() {
    let plain = cfg(&[]).unwrap();
    assert_eq!(plain.model.policy.encoder.num_layers, 3);
    assert_eq!(plain.train.optimizer.learning_rate, 1e-4);
    assert_eq!(plain.train.optimizer.weight_decay, 0.0);
    assert_eq!(plain.train.gradient_clip_val, 1.0);
    assert_eq!(plain.train.scheduler.step_size, vec![80, 95]);
    assert_eq!(plain.data.val_size, 10_000);
    // an explicitly empty override list is the same as none at all
    assert_eq!(resolve(&[("base.toml".into(), BASE.into())], &[]).unwrap(), plain);

    let deep = cfg(&["model.policy.encoder.num_layers=6"]).unwrap();
    assert_eq!(deep.model.policy.encoder.num_layers, 6);
    assert_eq!(deep.policy_config().num_layers, 6);

    let pomo = cfg(&["model.type=\"pomo\""]).unwrap();
    assert_eq!(pomo.train.optimizer.weight_decay, 1e-6);
    assert_eq!(pomo.model.policy.encoder.num_layers, 6);
    // user values beat the preset
    let pomo3 = cfg(&["model.type=pomo", "model.policy.encoder.num_layers=3"]).unwrap();
    assert_eq!(pomo3.model.policy.encoder.num_layers, 3);
    assert_eq!(cfg(&["model.type=am_lr1e-3"]).unwrap().train.optimizer.learning_rate, 1e-3);
    // integers are accepted where floats are expected
    assert_eq!(cfg(&["train.gradient_clip_val=2"]).unwrap().train.gradient_clip_val, 2.0);
}

#[test]
fn later_files_win() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.toml"), dir.path().join("b.toml"));
    std::fs::write(&a, format!("{BASE}\n[train]\nmax_epochs = 10\n[train.scheduler]\nstep_size = [5]\n")).unwrap();
    std::fs::write(&b, "[train]\nmax_epochs = 20\n").unwrap();
    let c = load_config(&[&a, &b], &[]).unwrap();
    assert_eq!(c.train.max_epochs, 20);
    let c = load_config(&[&a, &b], &["train.max_epochs=50".into()]).unwrap();
    assert_eq!(c.train.max_epochs, 50);
    assert!(matches!(load_config(&[Path::new("/nonexistent.toml")], &[]), Err(TrainError::Io { .. })));
}

#[test]
fn config_errors() {
    let dup = format!("{BASE}\n[train]\nmax_epochs = 10\nmax_epochs = 20\n");
    assert!(matches!(resolve(&[("dup.toml".into(), dup)], &[]), Err(TrainError::ConfigParse(_))));
    assert!(matches!(cfg(&["train.max_epoch=5"]), Err(TrainError::UnknownKey(k)) if k == "train.max_epoch"));
    assert!(matches!(cfg(&["model.policy.encoder.num_layers=\"six\""]), Err(TrainError::TypeError { .. })));
    assert!(matches!(cfg(&["train.max_epochs=1.5"]), Err(TrainError::TypeError { .. })));
    assert!(matches!(resolve(&[], &[]), Err(TrainError::MissingRequired(k)) if k == "env.name"));
    assert!(
        matches!(resolve(&[], &["env.name=tsp".into()]), Err(TrainError::MissingRequired(k)) if k == "env.num_loc")
    );
    assert!(matches!(cfg(&["train.scheduler.step_size=[80, 100]"]), Err(TrainError::InvalidConfig(_))));
    assert!(matches!(cfg(&["train.gradient_clip_val=0.0"]), Err(TrainError::InvalidConfig(_))));
    assert!(matches!(cfg(&["model.type=nope"]), Err(TrainError::InvalidConfig(_))));
    assert!(matches!(cfg(&["model.policy.decoder.embedding_dim=64"]), Err(TrainError::InvalidConfig(_))));
    assert!(matches!(cfg(&["model.baseline=critic"]), Err(TrainError::InvalidConfig(_))));
    assert!(matches!(cfg(&["env.name=tsp", "env.num_loc=1"]), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn lr_schedule_examples() {
    let c = cfg(&[]).unwrap();
    let s = MultiStepLr {
        base: c.train.optimizer.learning_rate,
        milestones: c.train.scheduler.step_size.clone(),
        gamma: c.train.scheduler.gamma,
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
    assert!(close(s.lr(0), 1e-4));
    assert!(close(s.lr(79), 1e-4));
    assert!(close(s.lr(80), 1e-5));
    assert!(close(s.lr(94), 1e-5));
    assert!(close(s.lr(95), 1e-6));
    assert!(close(s.lr(99), 1e-6));
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(values in prop::collection::vec(-1e3f32..1e3, 1..40), split in 1usize..5, max in 0.01f64..5.0) {
        let mut grads = ParamSet::new();
        for (i, chunk) in values.chunks(split).enumerate() {
            grads.insert(format!("g{i}"), Tensor::new(vec![chunk.len()], chunk.to_vec()));
        }
        let before = clip_grad_norm(&mut grads, max);
        let after: f64 = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-6);
        if before <= max {
            prop_assert!((after - before).abs() <= 1e-9 * before.max(1.0));
        }
    }
}

#[test]
fn step_accounting_for_every_preset() {
    for env in ["tsp", "cvrp", "op", "pctsp", "pdp"] {
        for preset in PRESETS {
            let c = cfg(&[&format!("env.name={env}"), &format!("model.type=\"{preset}\"")]).unwrap();
            assert_eq!(c.total_steps(), 250_000, "{env} {preset}");
            assert_eq!(c.steps_per_epoch() * c.train.max_epochs, 250_000);
        }
    }
    let am = cfg(&[]).unwrap();
    let pomo = cfg(&["model.type=pomo"]).unwrap();
    let sym = cfg(&["model.type=symnco"]).unwrap();
    let a2c = cfg(&["model.type=a2c"]).unwrap();
    // the rollout baseline spends half of each step on the baseline rollout
    assert_eq!(am.batch_size(), 256);
    assert_eq!(a2c.batch_size(), 512);
    assert_eq!(pomo.batch_size() * 20, 512 / 20 * 20);
    assert_eq!(sym.batch_size(), 51);
    assert_eq!(cfg(&["model.type=am_xl"]).unwrap().train.max_epochs, 500);
}

fn tiny(extra: &[&str]) -> TrainConfig {
    let mut o = vec![
        "env.num_loc=6",
        "deterministic=true",
        "model.policy.encoder.embedding_dim=16",
        "model.policy.decoder.embedding_dim=16",
        "model.policy.encoder.num_heads=2",
        "model.policy.decoder.num_heads=2",
        "model.policy.encoder.num_layers=1",
        "model.policy.encoder.hidden_dim=32",
        "train.max_epochs=3",
        "train.epoch_size=48",
        "train.batch_size=16",
        "train.scheduler.step_size=[2]",
        "train.optimizer.learning_rate=1e-3",
        "data.val_size=32",
    ];
    o.extend_from_slice(extra);
    cfg(&o).unwrap()
}

fn without_time(rows: &[MetricsRow]) -> Vec<(usize, u64, u64, u64, u64)> {
    rows.iter().map(|r| (r.epoch, r.step, r.train_reward.to_bits(), r.val_cost.to_bits(), r.lr.to_bits())).collect()
}

fn run(c: &TrainConfig, dir: &Path, resume: bool, stop: Option<usize>) -> nco_core::train::FitResult {
    fit(c, &FitOptions { run_dir: dir.to_path_buf(), resume, stop_after: stop, verbose: false }).unwrap()
}

const VARIANTS: &[&[&str]] = &[
    &[],
    &["model.baseline=exponential"],
    &["model.type=pomo", "model.num_starts=3"],
    &["model.type=symnco", "model.num_augments=2"],
    &["model.type=a2c"],
    &["model.type=am_ppo", "model.ppo.minibatch=8"],
    &["env.name=cvrp", "env.num_loc=5"],
];

#[test]
fn training_runs_are_deterministic_and_resumable() {
    for extra in VARIANTS {
        let c = tiny(extra);
        let (a, b, r) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run(&c, a.path(), false, None);
        let second = run(&c, b.path(), false, None);
        assert_eq!(first.metrics.len(), 3, "{extra:?}");
        assert!(first.metrics.iter().all(|m| m.train_reward.is_finite() && m.val_cost.is_finite()));
        assert_eq!(without_time(&first.metrics), without_time(&second.metrics), "{extra:?}");
        assert_eq!(bits(&first.params), bits(&second.params), "{extra:?}");

        let partial = run(&c, r.path(), false, Some(1));
        assert_eq!(partial.metrics.len(), 1);
        let resumed = run(&c, r.path(), true, None);
        assert_eq!(without_time(&resumed.metrics), without_time(&first.metrics), "resume {extra:?}");
        assert_eq!(bits(&resumed.params), bits(&first.params), "resume {extra:?}");

        for k in 1..=3 {
            assert!(a.path().join(format!("checkpoints/epoch_{k}.ncof")).exists());
        }
        assert!(a.path().join("best.ncof").exists());
        let echoed = std::fs::read_to_string(a.path().join("config.toml")).unwrap();
        assert_eq!(resolve(&[("echo".into(), echoed)], &[]).unwrap(), c);
        let csv = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "epoch,step,train_reward,val_cost,lr,seconds");
        assert_eq!(csv.lines().count(), 4);
    }
}

#[test]
fn schedule_and_steps_show_in_metrics() {
    let c = tiny(&[]);
    let dir = tempfile::tempdir().unwrap();
    let out = run(&c, dir.path(), false, None);
    let lrs: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3 * 0.1]);
    let steps: Vec<u64> = out.metrics.iter().map(|m| m.step).collect();
    assert_eq!(steps, vec![3, 6, 9]);
    let (policy, loaded) = nco_core::train::load_policy(&dir.path().join("checkpoints/epoch_3.ncof")).unwrap();
    assert_eq!(loaded, c);
    assert_eq!(bits(&policy.params), bits(&out.policy.params));
}

#[test]
fn resume_with_a_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(&[]), dir.path(), false, Some(1));
    let other = tiny(&["seed=99"]);
    let err =
        fit(&other, &FitOptions { run_dir: dir.path().to_path_buf(), resume: true, stop_after: None, verbose: false });
    assert!(matches!(err, Err(TrainError::Resume(_))));
}
