use agc_core::data::{generate_synthetic_dataset, Dataset, Pair, PairBatch, SynthConfig};
use agc_core::losses::PairLabel;
use agc_core::nets::AttributePredictor;
use agc_core::rng::{stream_rng, Stream};
use agc_core::tensor::Tensor;
use agc_core::train::{
    load_checkpoint, loss_csv, pretrain_for, resolve_config, save_checkpoint, train, train_step, Ablation, LossMask,
    TrainConfig, TrainState,
};
use agc_core::Error;

fn tiny_data(seed: u64) -> Dataset {
    generate_synthetic_dataset(&SynthConfig {
        identities: 4,
        samples_per_identity: 2,
        height: 32,
        width: 32,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config(ablation: Ablation) -> TrainConfig {
    let mut c = TrainConfig::benchmark();
    c.ablation = ablation;
    c.steps = 8;
    c.generator.base_width = 4;
    c.generator.embed_dim = 8;
    c.generator.head_width = 2;
    c.discriminator.base_width = 4;
    c.predictor.base_width = 4;
    c.feature.base_width = 4;
    c.pretrain.steps = 3;
    c.pretrain.finetune_steps = 3;
    c
}

/// A state around an untrained predictor, plus the preprocessed data.
fn fresh(ablation: Ablation) -> (TrainState, Dataset) {
    let raw = tiny_data(1);
    let cfg = resolve_config(&raw, &tiny_config(ablation)).unwrap();
    let ds = raw.preprocess(&cfg.preprocess).unwrap();
    let a = AttributePredictor::new(cfg.predictor.clone(), &mut stream_rng(0, Stream::Init, 100)).unwrap();
    (TrainState::new(cfg, a).unwrap(), ds)
}

#[test]
fn resume_from_checkpoint_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (mut straight, ds) = fresh(Ablation::Full);
    let mut resumed = straight.clone();
    let full = straight.run(&ds, 8, None).unwrap();

    resumed.run(&ds, 3, None).unwrap();
    let path = dir.path().join("mid.agck");
    save_checkpoint(&path, &resumed).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    let tail = loaded.run(&ds, 5, None).unwrap();
    assert_eq!(&full[3..], &tail[..]);
    assert_eq!(straight.g_pol.params().tensors(), loaded.g_pol.params().tensors());
    assert_eq!(straight.opt_d_vis.m, loaded.opt_d_vis.m);
}

#[test]
fn same_start_gives_identical_traces() {
    let (mut a, ds) = fresh(Ablation::Full);
    let mut b = a.clone();
    assert_eq!(a.run(&ds, 10, None).unwrap(), b.run(&ds, 10, None).unwrap());
}

#[test]
fn frozen_networks_are_untouched_and_every_term_is_logged() {
    let (mut st, ds) = fresh(Ablation::Full);
    let (a0, v0) = (st.a.params().clone(), st.v.params().clone());
    let hist = st.run(&ds, 6, None).unwrap();
    assert_eq!(st.a.params().tensors(), a0.tensors());
    assert_eq!(st.v.params().tensors(), v0.tensors());
    assert!(st.a.is_frozen());
    let w = st.config.weights;
    let lambdas = [1.0, w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5];
    for r in &hist {
        assert!(r.terms.iter().all(|t| t.is_some_and(f64::is_finite)));
        assert!(r.d_vis.is_some() && r.d_pol.is_some());
        let sum: f64 = r.terms.iter().zip(lambdas).map(|(t, l)| t.unwrap() * l).sum();
        assert!((sum - r.total).abs() <= 1e-6 * r.total.abs().max(1.0), "{sum} vs {}", r.total);
    }
}

#[test]
fn reconstruction_only_fixed_point() {
    // All-zero visible images and a generator whose output layer is zero:
    // the output is tanh(0) = 0, the loss is 0 and so is every gradient.
    let raw = tiny_data(2);
    let mut cfg = tiny_config(Ablation::Full);
    cfg.mask = Some(LossMask {
        cpl: false,
        e: true,
        gan: false,
        a: false,
        ppol: false,
        pa: false,
    });
    let cfg = resolve_config(&raw, &cfg).unwrap();
    let mut ds = raw.preprocess(&cfg.preprocess).unwrap();
    for s in &mut ds.samples {
        s.visible = Tensor::zeros(s.visible.shape());
    }
    let a = AttributePredictor::new(cfg.predictor.clone(), &mut stream_rng(0, Stream::Init, 100)).unwrap();
    let mut st = TrainState::new(cfg, a).unwrap();
    for net in [&mut st.g_vis, &mut st.g_pol] {
        let (w, b) = net.output_layer();
        let store = net.params_mut();
        for i in std::iter::once(w).chain(b) {
            let shape = store.tensors()[i].shape().to_vec();
            store.tensors_mut()[i] = Tensor::zeros(&shape);
        }
    }
    let before = st.g_pol.params().clone();
    let hist = st.run(&ds, 3, None).unwrap();
    for r in &hist {
        assert_eq!(r.terms[1], Some(0.0));
        assert_eq!(r.total, 0.0);
    }
    assert_eq!(st.g_pol.params().tensors(), before.tensors());
}

#[test]
fn non_finite_loss_names_the_term() {
    let (mut st, mut ds) = fresh(Ablation::CplE);
    // Sample 1's visible image only ever serves as a reconstruction target here.
    let shape = ds.samples[1].visible.shape().to_vec();
    ds.samples[1].visible = Tensor::from_fn(&shape, |_| f32::NAN);
    let pair = |v: usize, p: usize| Pair {
        visible: v,
        polar: p,
        label: PairLabel::from_identities(ds.samples[v].identity, ds.samples[p].identity),
        visible_attributes: ds.samples[v].attributes,
        polar_attributes: ds.samples[p].attributes,
    };
    let batch = PairBatch {
        pairs: vec![pair(0, 1), pair(2, 4)],
    };
    match train_step(&mut st, &ds, &batch) {
        Err(Error::NonFinite { term, step }) => {
            assert_eq!(term, "e");
            assert_eq!(step, 1);
        }
        other => panic!("expected a named non-finite error, got {other:?}"),
    }
}

#[test]
fn ablation_presets_select_their_terms() {
    assert_eq!(Ablation::CplE.mask().active_names(), vec!["cpl", "e"]);
    assert_eq!(Ablation::NoAttr.mask().active_names(), vec!["cpl", "e", "gan", "ppol", "pa"]);
    assert_eq!(Ablation::Full.mask().active_names(), vec!["cpl", "e", "gan", "a", "ppol", "pa"]);
    let (mut st, ds) = fresh(Ablation::CplE);
    let hist = st.run(&ds, 2, None).unwrap();
    let csv = loss_csv(&st.config.mask(), &hist);
    assert_eq!(csv.lines().next().unwrap(), "step,loss_cpl,loss_e,total");
    assert_eq!(csv.lines().count(), 3);
    assert!(hist.iter().all(|r| r.d_vis.is_none() && r.terms[2].is_none()));
}

#[test]
fn train_writes_history_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Ablation::Full);
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    let out = train(&tiny_data(3), &cfg, Some(dir.path())).unwrap();
    for f in ["loss_history.csv", "checkpoint_000002.agck", "checkpoint_000004.agck", "pretrain_report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let loaded = load_checkpoint(&dir.path().join("checkpoint_000004.agck")).unwrap();
    assert_eq!(loaded.step, 4);
    assert_eq!(loaded.g_vis.params().tensors(), out.state.g_vis.params().tensors());
    assert!(loaded.a.is_frozen());
}

#[test]
fn training_needs_two_train_identities() {
    let raw = generate_synthetic_dataset(&SynthConfig {
        identities: 2,
        samples_per_identity: 2,
        height: 32,
        width: 32,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(resolve_config(&raw, &tiny_config(Ablation::Full)), Err(Error::InvalidArgument(_))));
}

#[test]
fn pretraining_reduces_loss() {
    let raw = generate_synthetic_dataset(&SynthConfig {
        identities: 6,
        samples_per_identity: 2,
        height: 32,
        width: 32,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = tiny_config(Ablation::Full);
    cfg.pretrain.steps = 60;
    cfg.pretrain.source = agc_core::train::PretrainSource::Auxiliary {
        identities: 16,
        samples_per_identity: 2,
    };
    let cfg = resolve_config(&raw, &cfg).unwrap();
    let prepared = raw.preprocess(&cfg.preprocess).unwrap();
    let (a, report) = pretrain_for(&raw, &prepared, &cfg).unwrap();
    assert!(a.is_frozen());
    assert!(report.epoch_means.last().unwrap() < report.epoch_means.first().unwrap());
    assert_eq!(report.held_out_accuracy.len(), 10);
}
