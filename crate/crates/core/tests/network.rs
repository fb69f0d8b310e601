use gcpa_core::backbone::BackboneConfig;
use gcpa_core::network::{bce_loss, total_loss, training_loss, AblationFlags, Gcpa, LossConfig, NetworkConfig};
use gcpa_core::params::{Ctx, Mode, ParamId, ParamStore};
use gcpa_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk(flags: AblationFlags) -> NetworkConfig {
    NetworkConfig {
        flags,
        ..NetworkConfig::desk_scale()
    }
}

fn random(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn names(store: &ParamStore, ids: &[ParamId]) -> Vec<String> {
    ids.iter().map(|&id| store.entry(id).name.clone()).collect()
}

#[test]
fn train_mode_yields_dominant_and_three_aux_maps() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 0).unwrap();
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 64, 64], 1));
    let out = net.forward(&mut cx, x).unwrap();
    assert_eq!(cx.graph().shape(out.dominant), [2, 1, 64, 64]);
    assert_eq!(out.aux.len(), 3);
    for &a in &out.aux {
        assert_eq!(cx.graph().shape(a), [2, 1, 64, 64]);
    }
}

#[test]
fn infer_mode_never_touches_auxiliary_heads() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 0).unwrap();
    let aux = names(&store, &net.aux_head_params());
    assert_eq!(aux.len(), 6);
    let mut cx = Ctx::new(&mut store, Mode::Infer);
    let x = cx.graph_mut().constant(random([1, 3, 32, 32], 2));
    let out = net.forward(&mut cx, x).unwrap();
    assert!(out.aux.is_empty());
    let touched = cx.touched_names();
    assert!(touched.iter().all(|n| !aux.contains(n)), "{touched:?}");
    assert!(touched.iter().any(|n| n.starts_with("head.dominant")));
}

#[test]
fn baseline_has_no_block_parameters() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &desk(AblationFlags::baseline()), 0).unwrap();
    assert!(net.fia_params().is_empty());
    assert!(net.sr_params().is_empty());
    assert!(net.ha_params().is_empty());
    assert!(net.gcf_params().is_empty());
    let prefixes = ["ha.", "sr", "gcf.", "stage1.fia", "stage2.fia", "stage3.fia"];
    assert!(store.names().all(|n| prefixes.iter().all(|p| !n.starts_with(p))));
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 32, 32], 3));
    let out = net.forward(&mut cx, x).unwrap();
    assert_eq!(cx.graph().shape(out.dominant), [2, 1, 32, 32]);
}

#[test]
fn disabling_context_flow_skips_its_parameters() {
    let flags = AblationFlags {
        use_gcf: false,
        ..AblationFlags::full()
    };
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &desk(flags), 0).unwrap();
    assert!(net.gcf_params().is_empty());
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 32, 32], 4));
    net.forward(&mut cx, x).unwrap();
    assert!(cx.touched_names().iter().all(|n| !n.starts_with("gcf")));
}

#[test]
fn full_flags_reproduce_the_full_inventory() {
    let mut a = ParamStore::new();
    let net = Gcpa::build(&mut a, &desk(AblationFlags::full()), 0).unwrap();
    let mut b = ParamStore::new();
    Gcpa::build(&mut b, &NetworkConfig::desk_scale(), 0).unwrap();
    let shapes = |s: &ParamStore| s.to_named().into_iter().map(|(k, v)| (k, v.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(shapes(&a), shapes(&b));
    let total = a.len();
    let mut cx = Ctx::new(&mut a, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 32, 32], 5));
    let out = net.forward(&mut cx, x).unwrap();
    assert_eq!(out.aux.len(), 3);
    assert_eq!(cx.touched_names().len(), total, "train mode reads every stored tensor");
}

#[test]
fn inconsistent_flags_are_rejected() {
    let shared_without_gcf = AblationFlags {
        use_gcf: false,
        gcf_shared: true,
        ..AblationFlags::full()
    };
    let gcf_without_fia = AblationFlags {
        use_fia: false,
        ..AblationFlags::full()
    };
    for flags in [shared_without_gcf, gcf_without_fia] {
        let err = Gcpa::build(&mut ParamStore::new(), &desk(flags), 0).unwrap_err();
        assert!(matches!(err, Error::Flags(_)), "{err}");
    }
}

#[test]
fn every_trainable_parameter_gets_a_finite_gradient() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 6).unwrap();
    let trainable = store.iter().filter(|(_, e)| e.role.is_trainable()).count();
    let masks = Tensor::from_fn([2, 1, 32, 32], |i| f64::from(u8::from(i % 3 == 0)));
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 32, 32], 7));
    let out = net.forward(&mut cx, x).unwrap();
    let loss = training_loss(&mut cx, &out, &masks, &LossConfig::default()).unwrap();
    let grads = cx.graph().backward(loss.total).unwrap();
    let pg = cx.param_grads(&grads);
    assert_eq!(pg.len(), trainable);
    assert!(pg.iter().all(|(_, g)| g.all_finite()));
}

#[test]
fn batch_permutation_permutes_outputs() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 8).unwrap();
    let x = random([3, 3, 32, 32], 9);
    let permuted = Tensor::stack(&[x.sample(2), x.sample(0), x.sample(1)]).unwrap();
    for mode in [Mode::Train, Mode::Infer] {
        let run = |store: &mut ParamStore, t: &Tensor| {
            let mut cx = Ctx::new(store, mode);
            let v = cx.graph_mut().constant(t.clone());
            let out = net.forward(&mut cx, v).unwrap();
            cx.graph().value(out.dominant).clone()
        };
        let a = run(&mut store, &x);
        let b = run(&mut store, &permuted);
        for (i, j) in [(0, 2), (1, 0), (2, 1)] {
            for (p, q) in b.sample(i).data().iter().zip(a.sample(j).data()) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }
}

#[test]
fn predict_is_the_sigmoid_of_the_dominant_logits() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 10).unwrap();
    let head_w = store.id("head.dominant.weight").unwrap();
    let head_b = store.id("head.dominant.bias").unwrap();
    let shape = store.get(head_w).shape().to_vec();
    store.set(head_w, Tensor::zeros(shape)).unwrap();
    let x = random([1, 3, 32, 32], 11);
    let p = net.predict(&mut store, &x).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
    store.set(head_b, Tensor::full([1], 20.0)).unwrap();
    let p = net.predict(&mut store, &x).unwrap();
    assert!(p.data().iter().all(|&v| v > 0.999 && v < 1.0));
}

#[test]
fn bce_of_a_half_map_is_ln_two() {
    let s = Tensor::full([1, 1, 4, 4], 0.5);
    for g in [Tensor::zeros([1, 1, 4, 4]), Tensor::from_fn([1, 1, 4, 4], |i| f64::from(u8::from(i % 2 == 0)))] {
        assert!((bce_loss(&s, &g, 1e-7).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
    }
}

#[test]
fn bce_of_a_perfect_map_is_at_the_clamp_floor() {
    let g = Tensor::from_fn([1, 1, 4, 4], |i| f64::from(u8::from(i % 3 == 0)));
    let l = bce_loss(&g, &g, 1e-7).unwrap();
    assert!(l <= 1e-6 && l > 0.0);
    assert!((l - -(1.0f64 - 1e-7).ln()).abs() < 1e-15);
}

#[test]
fn bce_two_pixel_case() {
    let s = Tensor::from_vec([2], vec![0.9, 0.2]).unwrap();
    let g = Tensor::from_vec([2], vec![1.0, 0.0]).unwrap();
    let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((bce_loss(&s, &g, 1e-7).unwrap() - expected).abs() < 1e-15);
    assert!((expected - 0.164252).abs() < 1e-6);
}

#[test]
fn bce_rejects_bad_ground_truth() {
    let s = Tensor::full([4], 0.3);
    assert!(matches!(bce_loss(&s, &Tensor::full([4], 0.5), 1e-7), Err(Error::NonBinary(_))));
    assert!(matches!(bce_loss(&s, &Tensor::zeros([5]), 1e-7), Err(Error::Shape { .. })));
}

#[test]
fn total_loss_arithmetic() {
    let ones = LossConfig::default();
    assert_eq!(total_loss(0.5, [0.1, 0.2, 0.3], &ones), 1.1);
    let zeros = LossConfig {
        lambda: [0.0; 3],
        ..LossConfig::default()
    };
    assert_eq!(total_loss(0.37, [0.1, 0.2, 0.3], &zeros), 0.37);
    let halves = LossConfig {
        lambda: [0.5; 3],
        ..LossConfig::default()
    };
    assert_eq!(total_loss(0.2, [0.4, 0.4, 0.4], &halves), 0.8);
}

#[test]
fn tape_loss_agrees_with_the_clamped_definition() {
    let mut store = ParamStore::new();
    let net = Gcpa::build(&mut store, &NetworkConfig::desk_scale(), 12).unwrap();
    let masks = Tensor::from_fn([2, 1, 32, 32], |i| f64::from(u8::from(i % 5 < 2)));
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.graph_mut().constant(random([2, 3, 32, 32], 13));
    let out = net.forward(&mut cx, x).unwrap();
    let cfg = LossConfig::default();
    let terms = training_loss(&mut cx, &out, &masks, &cfg).unwrap();
    let value = |v| cx.graph().value(v).data()[0];
    let prob = |v| cx.graph().value(v).map(|z| 1.0 / (1.0 + (-z).exp()));
    let dom = bce_loss(&prob(out.dominant), &masks, cfg.epsilon).unwrap();
    assert!((value(terms.dominant) - dom).abs() < 1e-9);
    let aux: Vec<f64> = out.aux.iter().map(|&a| bce_loss(&prob(a), &masks, cfg.epsilon).unwrap()).collect();
    let total = total_loss(dom, [aux[0], aux[1], aux[2]], &cfg);
    assert!((value(terms.total) - total).abs() < 1e-9);
}

#[test]
fn tiny_backbone_with_pretrained_path_cannot_be_built() {
    let mut cfg = NetworkConfig::desk_scale();
    cfg.backbone = BackboneConfig {
        pretrained_weights_path: Some("x.safetensors".into()),
        ..BackboneConfig::tiny()
    };
    assert!(Gcpa::build(&mut ParamStore::new(), &cfg, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bce_is_non_negative(pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40)) {
        let s = Tensor::from_vec([pairs.len()], pairs.iter().map(|p| p.0).collect()).unwrap();
        let g = Tensor::from_vec([pairs.len()], pairs.iter().map(|p| f64::from(u8::from(p.1))).collect()).unwrap();
        prop_assert!(bce_loss(&s, &g, 1e-7).unwrap() >= 0.0);
    }
}
