use std::collections::BTreeMap;
use std::path::Path;

use gcpa_core::archive::{self, Archive};
use gcpa_core::data::{load_dataset, AugmentConfig, DatasetIndex, Split};
use gcpa_core::network::{AblationFlags, Gcpa, NetworkConfig};
use gcpa_core::params::{ParamGroup, ParamRole, ParamStore};
use gcpa_core::synthetic::{write_synthetic, SyntheticSpec};
use gcpa_core::trainer::{
    load_checkpoint, lr_at, save_checkpoint, train, Checkpoint, Sgd, TrainConfig, Trainer, CHECKPOINT_FORMAT,
};
use gcpa_core::{Error, Tensor};
use proptest::prelude::*;

const SIDE: usize = 32;

fn dataset(root: &Path, count: usize) -> DatasetIndex {
    write_synthetic(root, "synth", SyntheticSpec { count, size: SIDE, seed: 5 }).unwrap();
    load_dataset(root, "synth", Split::Train).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        warmup_fraction: 0.25,
        seed: 9,
        augment: AugmentConfig {
            resize: 40,
            crop: SIDE,
            flip_probability: 0.5,
            enabled: true,
        },
        ..TrainConfig::default()
    }
}

fn build(flags: AblationFlags) -> (Gcpa, ParamStore) {
    let mut store = ParamStore::new();
    let config = NetworkConfig {
        flags,
        ..NetworkConfig::desk_scale()
    };
    let net = Gcpa::build(&mut store, &config, 3).unwrap();
    (net, store)
}

fn trainable(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .filter(|(_, e)| e.role.is_trainable())
        .map(|(_, e)| (e.name.clone(), (*e.value).clone()))
        .collect()
}

#[test]
fn warmup_junction_is_continuous_and_hits_the_maxima() {
    let cfg = TrainConfig::default();
    for total in [30, 997, 30_000] {
        let warmup = (cfg.warmup_fraction * total as f64).ceil() as usize;
        let (b, h) = lr_at(warmup, total, &cfg).unwrap();
        assert_eq!((b, h), (5e-3, 0.05));
        // the ramp line evaluated at the junction
        let (b0, h0) = lr_at(warmup - 1, total, &cfg).unwrap();
        let ramp_b = b0 + 5e-3 / warmup as f64;
        let ramp_h = h0 + 0.05 / warmup as f64;
        assert!((ramp_b - b).abs() < 1e-15 && (ramp_h - h).abs() < 1e-15);
    }
}

#[test]
fn final_step_decays_below_a_thousandth_of_the_maximum() {
    let cfg = TrainConfig::default();
    for total in [10_000, 30_000, 123_457] {
        let (b, h) = lr_at(total - 1, total, &cfg).unwrap();
        assert!(b < 5e-3 / 1000.0 && h < 0.05 / 1000.0, "total {total}: {b} {h}");
        assert!(b > 0.0);
    }
    assert!(matches!(lr_at(10, 10, &cfg), Err(Error::StepRange { step: 10, total: 10 })));
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_unimodal(total in 2usize..5000, frac in 0.01f64..0.9) {
        let cfg = TrainConfig { warmup_fraction: frac, ..TrainConfig::default() };
        let mut prev = -1.0;
        let mut rising = true;
        for step in 0..total {
            let (b, h) = lr_at(step, total, &cfg).unwrap();
            prop_assert!((0.0..=5e-3).contains(&b) && (0.0..=0.05).contains(&h));
            prop_assert!((h / 10.0 - b).abs() < 1e-15);
            if rising && h < prev {
                rising = false;
            }
            if !rising {
                prop_assert!(h <= prev);
            }
            prev = h;
        }
    }
}

#[test]
fn zero_learning_rates_freeze_trainable_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let (net, store) = build(AblationFlags::full());
    let before = trainable(&store);
    let initial = store.to_named();
    let cfg = TrainConfig {
        max_lr_backbone: 0.0,
        max_lr_head: 0.0,
        ..small_config(1)
    };
    let (ckpt, log) = train(&net, store, &data, cfg).unwrap();
    assert_eq!(log.len(), 2);
    let after: BTreeMap<_, _> = before.keys().map(|k| (k.clone(), ckpt.params[k].clone())).collect();
    assert_eq!(before, after);
    // running statistics are state and still move
    let moved = initial
        .iter()
        .filter(|(k, v)| k.ends_with("running_mean") && ckpt.params[*k] != **v)
        .count();
    assert!(moved > 0);
}

#[test]
fn seeded_runs_produce_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let run = || {
        let (net, store) = build(AblationFlags::full());
        train(&net, store, &data, small_config(2)).unwrap()
    };
    let (ck_a, log_a) = run();
    let (ck_b, log_b) = run();
    assert_eq!(log_a.len(), 4);
    assert_eq!(log_a, log_b);
    assert_eq!(ck_a, ck_b);
    for (i, r) in log_a.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.loss_total.is_finite());
    }
}

#[test]
fn different_seeds_change_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let (net, store) = build(AblationFlags::full());
    let (_, a) = train(&net, store.clone(), &data, small_config(1)).unwrap();
    let (_, b) = train(&net, store, &data, TrainConfig { seed: 10, ..small_config(1) }).unwrap();
    assert_ne!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let (net, store) = build(AblationFlags::full());
    let (ckpt, _) = train(&net, store, &data, small_config(1)).unwrap();
    assert!(!ckpt.momentum.is_empty());
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let (_, restored) = loaded.restore().unwrap();
    assert_eq!(restored.to_named(), ckpt.params);
}

#[test]
fn resume_reproduces_the_uninterrupted_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let cfg = small_config(3);
    let (net, store) = build(AblationFlags::full());
    let (full_ckpt, full_log) = train(&net, store.clone(), &data, cfg.clone()).unwrap();
    assert_eq!(full_log.len(), 6);

    for k in [1, 3] {
        let mut first = Trainer::new(&net, store.clone(), &data, cfg.clone()).unwrap();
        let head = first.run_until(k, |_, _| Ok(())).unwrap();
        let path = dir.path().join(format!("step{k}.safetensors"));
        save_checkpoint(&first.checkpoint(), &path).unwrap();
        drop(first);

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.step, k);
        let (net2, _) = ckpt.restore().unwrap();
        let mut resumed = Trainer::resume(&net2, &data, &ckpt).unwrap();
        let tail = resumed.run_until(usize::MAX, |_, _| Ok(())).unwrap();
        assert_eq!(head, full_log[..k]);
        assert_eq!(tail, full_log[k..]);
        assert_eq!(resumed.checkpoint(), full_ckpt);
    }
}

#[test]
fn loading_another_ablation_variant_names_the_mismatched_tensors() {
    let (_, full) = build(AblationFlags::full());
    let (_, mut baseline) = build(AblationFlags::baseline());
    let err = baseline.load_named(&full.to_named()).unwrap_err();
    let Error::Inventory(msg) = err else { panic!("expected inventory error, got {err}") };
    assert!(msg.contains("unexpected `stage1.fia."), "{msg}");
    assert!(msg.contains("missing `top.conv.weight`"), "{msg}");

    let (_, shared) = build(AblationFlags {
        gcf_shared: true,
        ..AblationFlags::full()
    });
    let ckpt = Checkpoint {
        params: shared.to_named(),
        momentum: BTreeMap::new(),
        step: 0,
        network: NetworkConfig::desk_scale(),
        train: TrainConfig::default(),
    };
    let Err(Error::Inventory(msg)) = ckpt.restore() else { panic!("restore should fail") };
    assert!(msg.contains("missing `gcf.1.fc3.weight`") && msg.contains("unexpected `gcf.shared."), "{msg}");
}

#[test]
fn resume_rejects_a_different_network() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 2);
    let (net, store) = build(AblationFlags::full());
    let ckpt = Trainer::new(&net, store, &data, small_config(1)).unwrap().checkpoint();
    let (other, _) = build(AblationFlags::baseline());
    assert!(matches!(Trainer::resume(&other, &data, &ckpt), Err(Error::Config(_))));
}

#[test]
fn unknown_version_and_garbage_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v2.safetensors");
    let metadata = BTreeMap::from([
        ("format".to_owned(), CHECKPOINT_FORMAT.to_owned()),
        ("version".to_owned(), "2".to_owned()),
    ]);
    let tensors = BTreeMap::from([("param/w".to_owned(), Tensor::zeros([2]))]);
    archive::write(&path, &Archive { tensors, metadata }).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Version { found, expected }) => assert_eq!((found.as_str(), expected.as_str()), ("2", "1")),
        other => panic!("expected version error, got {other:?}"),
    }

    let junk = dir.path().join("junk.safetensors");
    std::fs::write(&junk, b"definitely not tensors").unwrap();
    assert!(matches!(load_checkpoint(&junk), Err(Error::Corrupt { .. })));

    let (net, store) = build(AblationFlags::full());
    let ckpt = Checkpoint {
        params: store.to_named(),
        momentum: BTreeMap::new(),
        step: 0,
        network: net.config().clone(),
        train: TrainConfig::default(),
    };
    let good = dir.path().join("good.safetensors");
    save_checkpoint(&ckpt, &good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    std::fs::write(&good, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&good), Err(Error::Corrupt { .. })));
}

#[test]
fn divergence_aborts_with_the_offending_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let (net, store) = build(AblationFlags::full());
    let cfg = TrainConfig {
        max_lr_backbone: 1e12,
        max_lr_head: 1e12,
        ..small_config(10)
    };
    match train(&net, store, &data, cfg) {
        Err(Error::NonFiniteLoss { step }) => assert!(step > 0 && step < 20),
        other => panic!("expected divergence, got {:?}", other.map(|(_, log)| log.len())),
    }
}

#[test]
fn normalization_parameters_are_exempt_from_decay() {
    let (_, store) = build(AblationFlags::full());
    let opt = Sgd::new(0.9, 5e-4);
    let mut seen = (0, 0);
    for (id, e) in store.iter() {
        let wd = opt.decay_for(&store, id);
        match e.role {
            ParamRole::NormScale | ParamRole::NormShift => {
                assert_eq!(wd, 0.0, "{}", e.name);
                seen.0 += 1;
            }
            ParamRole::ConvWeight | ParamRole::DenseWeight | ParamRole::ConvBias | ParamRole::DenseBias => {
                assert_eq!(wd, 5e-4, "{}", e.name);
                seen.1 += 1;
            }
            ParamRole::RunningMean | ParamRole::RunningVar => assert_eq!(wd, 0.0),
        }
    }
    assert!(seen.0 > 0 && seen.1 > 0);

    // with a zero gradient only decayed tensors move
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::full([2], 1.0), ParamRole::ConvWeight, ParamGroup::Head).unwrap();
    let g = s.add("g", Tensor::full([2], 1.0), ParamRole::NormScale, ParamGroup::Head).unwrap();
    let mut opt = Sgd::new(0.9, 0.5);
    opt.step(&mut s, &[(w, Tensor::zeros([2])), (g, Tensor::zeros([2]))], (0.0, 0.1));
    assert_eq!(s.get(w).data(), &[0.95, 0.95]);
    assert_eq!(s.get(g).data(), &[1.0, 1.0]);
}

#[test]
fn backbone_and_head_follow_their_own_rates() {
    let mut s = ParamStore::new();
    let b = s.add("b", Tensor::full([1], 0.0), ParamRole::ConvWeight, ParamGroup::Backbone).unwrap();
    let h = s.add("h", Tensor::full([1], 0.0), ParamRole::ConvWeight, ParamGroup::Head).unwrap();
    let mut opt = Sgd::new(0.0, 0.0);
    let one = Tensor::full([1], 1.0);
    opt.step(&mut s, &[(b, one.clone()), (h, one)], (0.25, 2.0));
    assert_eq!(s.get(b).data(), &[-0.25]);
    assert_eq!(s.get(h).data(), &[-2.0]);
}

#[test]
fn step_records_carry_the_scheduled_rates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 4);
    let (net, store) = build(AblationFlags::full());
    let cfg = small_config(2);
    let (_, log) = train(&net, store, &data, cfg.clone()).unwrap();
    for r in &log {
        assert_eq!((r.lr_backbone, r.lr_head), lr_at(r.step, log.len(), &cfg).unwrap());
        let recomposed = r.loss_aux.iter().fold(r.loss_dom, |acc, a| acc + a);
        assert!((recomposed - r.loss_total).abs() < 1e-12);
    }
}

#[test]
fn trainer_requires_labeled_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = dataset(dir.path(), 2);
    let (net, store) = build(AblationFlags::full());
    data.split = Split::Test;
    assert!(matches!(Trainer::new(&net, store.clone(), &data, small_config(1)), Err(Error::Config(_))));
    data.split = Split::Train;
    let bad = TrainConfig {
        warmup_fraction: 0.0,
        ..small_config(1)
    };
    assert!(matches!(Trainer::new(&net, store, &data, bad), Err(Error::Config(_))));
}
