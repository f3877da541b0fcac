mod common;

use std::collections::BTreeMap;

use skillformer::exec::Exec;
use skillformer::numerics::{Tape, Tensor};
use skillformer::params::ParamStore;
use skillformer::training::{
    cosine_lr, evaluate, stratified_split, train_with, AdamW, EvalOptions, Metrics, TrainOptions,
};
use skillformer::Error;

#[test]
fn cosine_schedule() {
    assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
    assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 2e-3)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

fn scalar_store(v: f64, trainable: bool) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(vec![1], vec![v]).unwrap(), trainable);
    s
}

fn grads_of(store: &ParamStore, g: f64) -> skillformer::numerics::Gradients {
    let id = store.ids().next().unwrap();
    let mut tape = Tape::new(store);
    let p = tape.param(id);
    let s = tape.scale(p, g);
    let loss = tape.sum(s);
    tape.backward(loss).unwrap()
}

#[test]
fn adamw_examples() {
    let mut store = scalar_store(1.5, true);
    let g = grads_of(&store, 0.0);
    AdamW::new(0.9, 0.999, 1e-8, 0.0).step(&mut store, &g, 0.1).unwrap();
    assert_eq!(store.value(store.ids().next().unwrap()).item(), 1.5);

    let mut store = scalar_store(1.0, true);
    let g = grads_of(&store, 1.0);
    AdamW::new(0.9, 0.999, 1e-8, 0.0).step(&mut store, &g, 0.1).unwrap();
    assert!((store.value(store.ids().next().unwrap()).item() - 0.9).abs() < 1e-6);

    let mut store = scalar_store(2.0, true);
    let g = grads_of(&store, 0.0);
    AdamW::new(0.9, 0.999, 1e-8, 0.01).step(&mut store, &g, 0.1).unwrap();
    assert_eq!(store.value(store.ids().next().unwrap()).item(), 2.0 * (1.0 - 0.001));

    let mut frozen = scalar_store(2.0, false);
    let g = grads_of(&scalar_store(2.0, true), 1.0);
    AdamW::new(0.9, 0.999, 1e-8, 0.01).step(&mut frozen, &g, 0.1).unwrap();
    assert_eq!(frozen.value(frozen.ids().next().unwrap()).item(), 2.0);

    let mut wide = ParamStore::new();
    wide.add("p", Tensor::zeros([3]), true);
    let g = grads_of(&scalar_store(1.0, true), 1.0);
    assert!(matches!(AdamW::new(0.9, 0.999, 1e-8, 0.0).step(&mut wide, &g, 0.1), Err(Error::Dimension(_))));
}

#[test]
fn metrics_structure() {
    let labels = vec![0, 1, 2, 3, 1, 2, 2, 1];
    let scen = vec![0, 0, 1, 1, 2, 2, 2, 0];
    let perfect = Metrics::from_predictions(&labels, &labels, &scen);
    assert_eq!(perfect.overall_accuracy, 1.0);
    for (y, row) in perfect.confusion.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            assert_eq!(c == 0, y != p || !labels.contains(&y));
        }
    }
    let majority = vec![2; labels.len()];
    let m = Metrics::from_predictions(&labels, &majority, &scen);
    assert_eq!(m.overall_accuracy, 3.0 / 8.0);
    assert!((m.weighted_scenario_mean() - m.overall_accuracy).abs() < 1e-12);
    for (y, row) in m.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == y).count());
    }
    let report = m.report();
    assert!(report.contains("overall accuracy") && report.contains("confusion"));
}

#[test]
fn split_is_stratified_and_disjoint() {
    let scen: Vec<u8> = (0..300).map(|i| (i % 3) as u8).collect();
    let (train, val) = stratified_split(&scen, 0.1, 4);
    assert_eq!(val.len(), 30);
    for s in 0..3u8 {
        assert_eq!(val.iter().filter(|&&i| scen[i] == s).count(), 10);
    }
    let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..300).collect::<Vec<_>>());
    assert_eq!(stratified_split(&scen, 0.1, 4), (train, val));
}

#[test]
fn lr_zero_leaves_weights_unchanged() {
    let mut cfg = common::tiny_run();
    cfg.train.lr = 0.0;
    cfg.train.weight_decay = 0.01;
    let out = train_with(&cfg, &common::tiny_data(40, 1), TrainOptions::default()).unwrap();
    for ((_, a), (_, b)) in out.initial_store.iter().zip(out.final_store.iter()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn training_is_deterministic_and_executor_independent() {
    let cfg = common::tiny_run();
    let data = common::tiny_data(50, 2);
    let run = |exec| {
        let mut lines = Vec::new();
        let out = train_with(
            &cfg,
            &data,
            TrainOptions {
                exec,
                on_epoch: Some(Box::new(|r: &skillformer::training::EpochRecord| lines.push(r.to_json_line()))),
                ..Default::default()
            },
        )
        .unwrap();
        (out.loss_curve, out.checkpoint.to_bytes(), lines)
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Sequential);
    let c = run(Exec::Parallel);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.0), bits(&c.0));
    assert_eq!(a.1, b.1);
    assert_eq!(a.1, c.1);
    assert_eq!(a.2.len(), cfg.train.epochs);
    let rec: serde_json::Value = serde_json::from_str(&a.2[0]).unwrap();
    for key in ["epoch", "lr", "train_loss", "val_acc", "per_scenario"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
}

#[test]
fn frozen_tensors_survive_training_and_first_loss_is_near_uniform() {
    let cfg = common::tiny_run();
    let out = train_with(&cfg, &common::tiny_data(40, 3), TrainOptions::default()).unwrap();
    assert!((out.loss_curve[0] - 4f64.ln()).abs() < 0.05, "{}", out.loss_curve[0]);
    for ((_, a), (_, b)) in out.initial_store.iter().zip(out.final_store.iter()) {
        if !a.trainable {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
    assert!(out.loss_curve.iter().all(|l| l.is_finite()));
    assert!(out.best_epoch < cfg.train.epochs);
}

#[test]
fn diverging_run_aborts_with_a_diagnostic() {
    let mut cfg = common::tiny_run();
    cfg.train.lr = 1e200;
    cfg.train.epochs = 3;
    let err = train_with(&cfg, &common::tiny_data(40, 4), TrainOptions::default())
        .err()
        .expect("training should diverge");
    let msg = err.to_string();
    assert!(matches!(err, Error::Numeric(_)), "{msg}");
    assert!(msg.contains("step") && msg.contains("first non-finite"), "{msg}");
}

#[test]
fn evaluate_checks_geometry_and_matches_merged() {
    let cfg = common::tiny_run();
    let data = common::tiny_data(40, 5);
    let out = train_with(&cfg, &data, TrainOptions::default()).unwrap();
    let test = common::tiny_data(30, 6);
    let merged = evaluate(&out.checkpoint, &test, &EvalOptions::default()).unwrap();
    let plain = evaluate(
        &out.checkpoint,
        &test,
        &EvalOptions {
            merge: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(merged.confusion, plain.confusion);
    assert!((merged.mean_loss.unwrap() - plain.mean_loss.unwrap()).abs() < 1e-6);
    assert!((merged.weighted_scenario_mean() - merged.overall_accuracy).abs() < 1e-12);
    let scen: BTreeMap<u8, usize> = merged.per_scenario.iter().map(|(k, v)| (*k, v.total)).collect();
    assert_eq!(scen.values().sum::<usize>(), 30);

    let mut spec = common::tiny_spec();
    spec.views = 3;
    let wrong = skillformer::data::generate(&spec, 5, 1, Exec::default()).unwrap();
    assert!(matches!(evaluate(&out.checkpoint, &wrong, &EvalOptions::default()), Err(Error::Config(_))));
    let subset = EvalOptions {
        views: Some(vec![2, 0]),
        ..Default::default()
    };
    assert!(evaluate(&out.checkpoint, &wrong, &subset).is_ok());
    spec.views = 2;
    spec.image_size = 12;
    let small = skillformer::data::generate(&spec, 5, 1, Exec::default()).unwrap();
    assert!(matches!(evaluate(&out.checkpoint, &small, &EvalOptions::default()), Err(Error::Config(_))));
}
