use skillformer::config::{Preset, SkillFormerConfig};
use skillformer::layers::{Init, Linear};
use skillformer::lora::{self, merge_weight};
use skillformer::model::SkillFormer;
use skillformer::numerics::{grad_check, CheckOptions, Tape, Tensor};
use skillformer::params::ParamStore;
use skillformer::rng;
use skillformer::Error;

fn dense(store: &mut ParamStore, i: usize, o: usize, seed: u64) -> Linear {
    Linear::new(store, "dense", i, o, Init::GaussianFanIn, false, &mut rng::seeded(seed))
}

#[test]
fn wrapped_layer_matches_base_at_init() {
    let mut store = ParamStore::new();
    let base = dense(&mut store, 6, 5, 1);
    let layer = lora::wrap(&mut store, base.clone(), 2, 4.0, &mut rng::seeded(2)).unwrap();
    let x = Tensor::randn([7, 6], 1.0, &mut rng::seeded(3));
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y0 = base.forward(&mut tape, xv).unwrap();
    let y1 = layer.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y0), tape.value(y1));
}

#[test]
fn rank_bounds() {
    let mut store = ParamStore::new();
    let base = dense(&mut store, 6, 5, 1);
    assert!(lora::wrap(&mut store, base.clone(), 5, 1.0, &mut rng::seeded(0)).is_ok());
    let mut store = ParamStore::new();
    let base = dense(&mut store, 6, 5, 1);
    assert!(matches!(lora::wrap(&mut store, base.clone(), 6, 1.0, &mut rng::seeded(0)), Err(Error::Config(_))));
    assert!(matches!(lora::wrap(&mut store, base, 0, 1.0, &mut rng::seeded(0)), Err(Error::Config(_))));
}

#[test]
fn paper_presets_construct() {
    for p in [Preset::Ego, Preset::Exos, Preset::EgoExos] {
        let (model, _) = SkillFormer::new(&p.model(), 0).unwrap();
        let (r, a) = (p.model().lora.rank, p.model().lora.alpha);
        for layer in model.backbone.dense_layers() {
            let ad = layer.adapter.as_ref().unwrap();
            assert_eq!((ad.rank, ad.alpha), (r, a));
        }
    }
}

#[test]
fn hand_computed_forward() {
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "d", 2, 2, Init::Zeros, false, &mut rng::seeded(0));
    let layer = lora::wrap(&mut store, base, 1, 2.0, &mut rng::seeded(0)).unwrap();
    let ad = layer.adapter.clone().unwrap();
    *store.value_mut(ad.a) = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    *store.value_mut(ad.b) = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let y = layer.forward(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn gradients_reach_only_the_adapter() {
    let mut store = ParamStore::new();
    let base = dense(&mut store, 6, 5, 1);
    let layer = lora::wrap(&mut store, base, 2, 4.0, &mut rng::seeded(2)).unwrap();
    let ad = layer.adapter.clone().unwrap();
    *store.value_mut(ad.b) = Tensor::randn([5, 2], 0.5, &mut rng::seeded(4));
    let x = Tensor::randn([3, 6], 1.0, &mut rng::seeded(5));
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = layer.forward(&mut tape, xv).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert!(g.param(layer.base.weight).is_none());
    assert!(g.param(layer.base.bias).is_none());
    assert!(g.param(ad.a).unwrap().l2_norm() > 0.0);
    assert!(g.param(ad.b).unwrap().l2_norm() > 0.0);

    let rep = grad_check(
        &mut store,
        &[ad.a, ad.b],
        |t| {
            let xv = t.constant(Tensor::randn([3, 6], 1.0, &mut rng::seeded(5)));
            let y = layer.forward(t, xv)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        CheckOptions { eps: 1e-5, ..Default::default() },
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn merge_equivalence_over_random_inputs() {
    let mut store = ParamStore::new();
    let base = dense(&mut store, 12, 9, 1);
    let layer = lora::wrap(&mut store, base, 3, 6.0, &mut rng::seeded(2)).unwrap();
    let ad = layer.adapter.clone().unwrap();
    assert_eq!(layer.merged_weight(&store).unwrap(), *store.value(layer.base.weight));
    *store.value_mut(ad.b) = Tensor::randn([9, 3], 0.3, &mut rng::seeded(6));
    let merged_w = layer.merged_weight(&store).unwrap();
    let mut merged_store = ParamStore::new();
    let w = merged_store.add("w", merged_w, false);
    let b = merged_store.add("b", store.value(layer.base.bias).clone(), false);

    let x = Tensor::randn([1000, 12], 1.0, &mut rng::seeded(7));
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let adapted = layer.forward(&mut tape, xv).unwrap();
    let mut mtape = Tape::new(&merged_store);
    let (xv, wv, bv) = (mtape.constant(x), mtape.param(w), mtape.param(b));
    let merged = mtape.linear(xv, wv, bv).unwrap();
    assert!(tape.value(adapted).max_abs_diff(mtape.value(merged)) < 1e-12);
}

#[test]
fn merge_weight_rejects_mismatched_factors() {
    let w = Tensor::zeros([4, 3]);
    let a = Tensor::zeros([2, 3]);
    let b = Tensor::zeros([5, 2]);
    assert!(matches!(merge_weight(&w, &a, &b, 2, 1.0), Err(Error::Dimension(_))));
}

#[test]
fn trainable_count_of_one_layer() {
    let mut store = ParamStore::new();
    let base = dense(&mut store, 8, 8, 1);
    let layer = lora::wrap(&mut store, base, 2, 1.0, &mut rng::seeded(0)).unwrap();
    assert_eq!(layer.trainable_count(), 32);
    assert_eq!(store.counts().0, 32);
}

fn counts(cfg: &SkillFormerConfig) -> (usize, usize) {
    let (_, store) = SkillFormer::new(cfg, 0).unwrap();
    let c = SkillFormer::count_params(&store);
    (c.trainable, c.total)
}

#[test]
fn desk_trainable_fraction_and_rank_monotonicity() {
    let cfg = Preset::Desk.model();
    let (trainable, total) = counts(&cfg);
    assert!((trainable as f64) / (total as f64) < 0.5);
    let mut prev = 0;
    for r in [1, 2, 4, 8, 16] {
        let mut c = cfg.clone();
        c.lora.rank = r;
        let (t, _) = counts(&c);
        assert!(t > prev);
        prev = t;
    }
}

#[test]
fn merged_model_has_base_parameter_count() {
    let cfg = Preset::Desk.model();
    let (model, store) = SkillFormer::new(&cfg, 0).unwrap();
    let (_, merged) = model.merged(&store).unwrap();
    let (_, plain) = SkillFormer::build(&cfg, false, 0).unwrap();
    assert_eq!(SkillFormer::count_params(&merged).total, SkillFormer::count_params(&plain).total);
    assert!(merged.iter().all(|(_, p)| !p.name.contains("lora")));
}
