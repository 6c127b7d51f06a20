use std::collections::HashSet;

use boldsynth_core::model::apply_ablation;
use boldsynth_core::optim::cosine_lr;
use boldsynth_core::synth::phantom_subjects;
use boldsynth_core::training::{epoch_order, read_history, split_subjects, train_on, RunOptions};
use boldsynth_core::{
    Ablation, BoldNet, Checkpoint, Device, EncoderConfig, Error, PhantomSpec, Subject, TrainConfig,
};
use proptest::prelude::*;

fn subjects(n: usize) -> Vec<Subject> {
    phantom_subjects(&PhantomSpec::default(), n).unwrap()
}

/// 2 subjects × 12 slices at batch 8: three steps per epoch.
fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.training.batch_size = 8;
    cfg.training.max_epochs = 4;
    cfg
}

fn run(cfg: &TrainConfig, train: &[Subject], val: &[Subject], opts: RunOptions) -> boldsynth_core::training::TrainOutcome {
    let encoder = cfg.model.load_encoder(&Device::Cpu).unwrap();
    train_on(cfg, train, val, encoder, opts).unwrap()
}

fn param_values(ck: &Checkpoint) -> Vec<(String, Vec<f32>)> {
    ck.params
        .iter()
        .map(|(k, t)| (k.clone(), t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

#[test]
fn one_epoch_writes_history_and_checkpoints() {
    let data = subjects(3);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.max_epochs = 1;
    let out = run(&cfg, &data[..2], &data[2..], RunOptions { out_dir: Some(dir.path().into()), resume: None });
    assert_eq!(out.step_losses.len(), 3);
    assert_eq!(out.history.len(), 1);
    let rec = &out.history[0];
    assert_eq!((rec.epoch, rec.global_step), (0, 3));
    assert_eq!(rec.lr, cfg.training.lr);
    assert_eq!(rec.ablation, "sa=on,sc=on,loss=Full");
    assert!(rec.val_psnr.unwrap().is_finite());
    assert!(rec.val_msssim.unwrap().is_finite());
    assert!(rec.train_losses.total.is_finite());
    assert_eq!(read_history(dir.path().join("history.jsonl")).unwrap(), out.history);
    for file in ["last.safetensors", "best.safetensors"] {
        let ck = Checkpoint::load(dir.path().join(file)).unwrap();
        assert_eq!((ck.epoch, ck.step_in_epoch, ck.global_step), (1, 0, 3));
        assert_eq!(ck.best_val, rec.val_msssim);
        assert_eq!(ck.config, cfg);
    }
}

#[test]
fn runs_are_reproducible() {
    let data = subjects(2);
    let mut cfg = small_config();
    cfg.training.max_steps = Some(2);
    let a = run(&cfg, &data, &[], RunOptions::default());
    let b = run(&cfg, &data, &[], RunOptions::default());
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(param_values(&a.checkpoint), param_values(&b.checkpoint));

    cfg.training.seed = 1;
    let c = run(&cfg, &data, &[], RunOptions::default());
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn mid_epoch_resume_matches_uninterrupted_run() {
    let data = subjects(2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.max_steps = Some(4);
    let full = run(&cfg, &data, &[], RunOptions::default());

    cfg.training.max_steps = Some(2);
    run(&cfg, &data, &[], RunOptions { out_dir: Some(dir.path().into()), resume: None });
    let ck = Checkpoint::load(dir.path().join("last.safetensors")).unwrap();
    assert_eq!((ck.epoch, ck.step_in_epoch, ck.global_step), (0, 2, 2));

    cfg.training.max_steps = Some(4);
    let resumed = run(&cfg, &data, &[], RunOptions { out_dir: None, resume: Some(ck) });
    assert_eq!(resumed.step_losses.len(), 2);
    assert_eq!(resumed.step_losses[..], full.step_losses[2..]);
    assert_eq!(param_values(&resumed.checkpoint), param_values(&full.checkpoint));
    assert_eq!(resumed.checkpoint.global_step, 4);
}

#[test]
fn resume_rejects_a_changed_config() {
    let data = subjects(2);
    let mut cfg = small_config();
    cfg.training.max_steps = Some(1);
    let ck = run(&cfg, &data, &[], RunOptions::default()).checkpoint;
    cfg.training.lr = 1e-3;
    let encoder = cfg.model.load_encoder(&Device::Cpu).unwrap();
    let err = train_on(&cfg, &data, &[], encoder, RunOptions { out_dir: None, resume: Some(ck.clone()) })
        .err()
        .unwrap();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");

    let other = EncoderConfig::tiny(99);
    let encoder = boldsynth_core::Encoder::from_config(&other, boldsynth_core::DType::F32, &Device::Cpu).unwrap();
    assert!(ck.restore_model(encoder).is_err());
}

#[test]
fn restored_model_predicts_like_the_trained_one() {
    let data = subjects(2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.max_epochs = 1;
    let out = run(&cfg, &data, &[], RunOptions { out_dir: Some(dir.path().into()), resume: None });
    let ck = Checkpoint::load(dir.path().join("last.safetensors")).unwrap();
    let restored = ck.restore_model(cfg.model.load_encoder(&Device::Cpu).unwrap()).unwrap();
    let a = out.model.predict(&data[0].t1).unwrap();
    let b = restored.predict(&data[0].t1).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn split_sizes_follow_the_floor_rule() {
    for (n, want) in [(10, 8), (5, 4), (2, 1), (3, 2)] {
        let items: Vec<usize> = (0..n).collect();
        let (tr, val) = split_subjects(&items, 0.8, 42).unwrap();
        assert_eq!((tr.len(), val.len()), (want, n - want), "n = {n}");
        let all: HashSet<usize> = tr.iter().chain(&val).copied().collect();
        assert_eq!(all.len(), n);
        assert_eq!(split_subjects(&items, 0.8, 42).unwrap(), (tr, val));
    }
    assert!(split_subjects(&[0usize], 0.8, 0).is_err());
    assert!(split_subjects(&[0usize, 1], 1.0, 0).is_err());
}

#[test]
fn ablations_change_the_instantiated_parameters() {
    let cfg = TrainConfig::tiny();
    let enc_cfg = cfg.model.encoder_config().unwrap();
    let names = |ablation: Ablation| -> Vec<String> {
        let net = BoldNet::new(cfg.model.load_encoder(&Device::Cpu).unwrap(), &cfg.model, &ablation, 5, 0).unwrap();
        net.trainable().vars.keys().cloned().collect()
    };
    let full = names(Ablation::default());
    assert!(full.iter().any(|k| k.starts_with("fusion.main.")));
    assert!(full.iter().any(|k| k.starts_with("fusion.skip")));

    let sa_off = Ablation { slice_attention: false, ..Ablation::default() };
    assert!(!apply_ablation(&sa_off, &enc_cfg).fuse);
    assert!(names(sa_off).iter().all(|k| !k.starts_with("fusion.")));

    let sc_off = Ablation { skip_connections: false, ..Ablation::default() };
    assert!(apply_ablation(&sc_off, &enc_cfg).skip_layers.is_empty());
    let sc_names = names(sc_off);
    assert!(sc_names.iter().all(|k| !k.starts_with("fusion.skip")));
    assert!(sc_names.len() < full.len());
}

#[test]
fn config_round_trips_and_overrides() {
    let mut cfg = TrainConfig::tiny();
    assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    cfg.apply_override("training.batch_size=4").unwrap();
    cfg.apply_override("ablation.loss_set=l1_msssim").unwrap();
    assert_eq!(cfg.training.batch_size, 4);
    assert_eq!(cfg.effective_loss_weights().lambda_perc, 0.0);
    assert!(cfg.apply_override("training.slice_window=4").is_err());
    assert!(cfg.apply_override("nosuch.key=1").is_err());
    assert!(cfg.apply_override("training.lr").is_err());
    assert!(TrainConfig::from_toml_str("[training]\nbogus = 1\n").is_err());

    let mut longer = cfg.clone();
    longer.training.max_epochs = 500;
    assert_eq!(longer.digest(), cfg.digest());
    longer.training.seed = 3;
    assert_ne!(longer.digest(), cfg.digest());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epoch_order_is_a_seeded_permutation(
        depths in prop::collection::vec(1usize..6, 1..5),
        seed in any::<u64>(),
        epoch in 0usize..50,
    ) {
        let order = epoch_order(&depths, seed, epoch);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let want: Vec<(usize, usize)> = depths.iter().enumerate().flat_map(|(v, &d)| (0..d).map(move |z| (v, z))).collect();
        prop_assert_eq!(sorted, want);
        prop_assert_eq!(order, epoch_order(&depths, seed, epoch));
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 1usize..400, lr in 1e-5f64..1e-2, frac in 0.0f64..1.0) {
        let min = lr * frac;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let v = cosine_lr(s, total, lr, min).unwrap();
            prop_assert!(v <= prev + 1e-18 && v >= min - 1e-18 && v <= lr + 1e-18);
            prev = v;
        }
        prop_assert!(cosine_lr(total + 1, total, lr, min).is_err());
    }
}
